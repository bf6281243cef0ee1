//! The fusion network: a shared seven-layer feature extractor, the unity
//! fusion attention block, a 1×1 fusion conv and a four-layer
//! reconstruction head.
//!
//! ```text
//! image_k ─▶ FEB1..7 ─▶ F_k ─┐
//!                            ├─▶ channel attn ─▶ spatial attn ─▶ concat ─▶ FFB ─▶ ICB1..4 ─▶ fused
//! image_j ─▶ FEB1..7 ─▶ F_j ─┘
//! ```

mod attention;
pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use attention::{channel_attention, spatial_attention, AttentionMaps};

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, ConvWeights, Element, Shape, Tensor};

pub const FEATURE_CHANNELS: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
/// Number of source images the stock fusion conv accepts.
pub const INPUTS: usize = 2;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
/// Smallest spatial side; the spatial attention conv is 7×7.
pub const MIN_SIDE: usize = 7;
pub const INIT_SCHEME: &str = "kaiming-normal-fan-in";

const FEB_LAYERS: usize = 7;
const ICB_LAYERS: usize = 4;

/// Which parts of the attention block are active.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    /// Channel then spatial attention.
    #[default]
    Ufa,
    /// Channel attention only.
    NoSa,
    /// Spatial attention only.
    NoCa,
    /// Raw features go straight to the fusion conv.
    NoUfa,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Ufa, Ablation::NoSa, Ablation::NoCa, Ablation::NoUfa];

    pub fn uses_channel_attention(self) -> bool {
        matches!(self, Ablation::Ufa | Ablation::NoSa)
    }

    pub fn uses_spatial_attention(self) -> bool {
        matches!(self, Ablation::Ufa | Ablation::NoCa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Ufa => "UFA",
            Ablation::NoSa => "NO-SA",
            Ablation::NoCa => "NO-CA",
            Ablation::NoUfa => "NO-UFA",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown ablation mode {s:?} (expected UFA, NO-SA, NO-CA or NO-UFA)"
                ))
            })
    }
}

#[derive(Clone, Debug)]
pub struct FusionNetwork<T: Element = f32> {
    /// FEB1..FEB7, shared by every input branch.
    pub feb: Vec<ConvWeights<T>>,
    /// The 2→1 7×7 conv of spatial attention, shared by every branch.
    pub spatial: ConvWeights<T>,
    /// 128→64 1×1 fusion conv, no activation.
    pub ffb: ConvWeights<T>,
    /// ICB1..ICB4; the last one ends in a sigmoid.
    pub icb: Vec<ConvWeights<T>>,
    pub ablation: Ablation,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

/// `(name, out, in, kernel)` for every layer, in checkpoint order.
pub fn layer_plan() -> Vec<(String, usize, usize, usize)> {
    let mut plan = Vec::new();
    for i in 0..FEB_LAYERS {
        let input = if i == 0 { IMAGE_CHANNELS } else { FEATURE_CHANNELS };
        plan.push((format!("feb{}", i + 1), FEATURE_CHANNELS, input, 3));
    }
    plan.push(("spatial".to_string(), 1, 2, 7));
    plan.push(("ffb".to_string(), FEATURE_CHANNELS, INPUTS * FEATURE_CHANNELS, 1));
    for i in 0..ICB_LAYERS {
        let output = if i + 1 == ICB_LAYERS { IMAGE_CHANNELS } else { FEATURE_CHANNELS };
        plan.push((format!("icb{}", i + 1), output, FEATURE_CHANNELS, 3));
    }
    plan
}

impl<T: Element> FusionNetwork<T> {
    /// Fresh network: normal kernels with std `gain / sqrt(fan_in)`,
    /// `gain = sqrt(2 / (1 + slope²))`, and zero biases.
    pub fn new(ablation: Ablation, seed: u64) -> Self {
        let slope = DEFAULT_LEAKY_SLOPE;
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_plan()
            .into_iter()
            .map(|(_, out, input, k)| {
                let fan_in = (input * k * k) as f64;
                let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("positive std");
                let kernel_shape = Shape::new(out, input, k, k);
                let values = (0..kernel_shape.numel())
                    .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                    .collect();
                let kernel = Tensor::parameter(kernel_shape, values).expect("planned shape");
                let bias = Tensor::parameter(Shape::new(1, out, 1, 1), vec![T::zero(); out])
                    .expect("planned shape");
                ConvWeights::new(kernel, bias).expect("planned kernel size")
            })
            .collect();
        Self::from_layers(layers, ablation, slope, seed).expect("planned layers")
    }

    /// Assembles a network from layers in [`layer_plan`] order.
    pub fn from_layers(
        layers: Vec<ConvWeights<T>>,
        ablation: Ablation,
        leaky_slope: f64,
        init_seed: u64,
    ) -> Result<Self> {
        let plan = layer_plan();
        if layers.len() != plan.len() {
            return Err(Error::shape(format!(
                "expected {} layers, got {}",
                plan.len(),
                layers.len()
            )));
        }
        for ((name, out, input, k), layer) in plan.iter().zip(&layers) {
            let got = layer.kernel.shape();
            if got != Shape::new(*out, *input, *k, *k) {
                return Err(Error::shape(format!(
                    "layer {name}: expected kernel ({out}, {input}, {k}, {k}), got {got}"
                )));
            }
        }
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::invalid(format!("leaky slope {leaky_slope} outside (0, 1)")));
        }
        let mut layers = layers.into_iter();
        let feb = layers.by_ref().take(FEB_LAYERS).collect();
        let spatial = layers.next().expect("planned");
        let ffb = layers.next().expect("planned");
        let icb = layers.collect();
        Ok(FusionNetwork {
            feb,
            spatial,
            ffb,
            icb,
            ablation,
            leaky_slope,
            init_seed,
        })
    }

    pub fn layers(&self) -> Vec<&ConvWeights<T>> {
        self.feb
            .iter()
            .chain([&self.spatial, &self.ffb])
            .chain(self.icb.iter())
            .collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvWeights<T>> {
        self.feb
            .iter_mut()
            .chain([&mut self.spatial, &mut self.ffb])
            .chain(self.icb.iter_mut())
            .collect()
    }

    /// `layer.weight` / `layer.bias` names matching [`FusionNetwork::parameters`].
    pub fn parameter_names() -> Vec<String> {
        layer_plan()
            .into_iter()
            .flat_map(|(name, ..)| [format!("{name}.weight"), format!("{name}.bias")])
            .collect()
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers()
            .into_iter()
            .flat_map(|l| [&l.kernel, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&self) -> FusionNetwork<U> {
        let layers = self
            .layers()
            .into_iter()
            .map(|l| ConvWeights {
                kernel: l.kernel.cast(),
                bias: l.bias.cast(),
            })
            .collect();
        FusionNetwork::from_layers(layers, self.ablation, self.leaky_slope, self.init_seed)
            .expect("validated on construction")
    }

    fn slope(&self) -> T {
        T::from_f64_lossy(self.leaky_slope)
    }

    /// FEB1..FEB7, each a 3×3 conv followed by LeakyReLU.
    pub fn extract_features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.c != IMAGE_CHANNELS {
            return Err(Error::shape(format!(
                "feature extraction expects {IMAGE_CHANNELS} channels, got {s}"
            )));
        }
        if s.h < MIN_SIDE || s.w < MIN_SIDE {
            return Err(Error::shape(format!(
                "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {s}"
            )));
        }
        let mut x = image.clone();
        for layer in &self.feb {
            x = layer.apply(&x)?.leaky_relu(self.slope());
        }
        Ok(x)
    }

    /// Fuses the per-input features into one 64-channel map, returning the
    /// attention maps the active mode computed.
    pub fn fuse_features(&self, features: &[Tensor<T>]) -> Result<(Tensor<T>, AttentionMaps<T>)> {
        if features.len() != INPUTS {
            return Err(Error::invalid(format!(
                "the fusion conv takes exactly {INPUTS} inputs, got {}",
                features.len()
            )));
        }
        let mut maps = AttentionMaps::default();
        let mut branch: Vec<Tensor<T>> = features.to_vec();
        if self.ablation.uses_channel_attention() {
            maps.channel = channel_attention(&branch)?;
            branch = branch
                .iter()
                .zip(&maps.channel)
                .map(|(f, m)| f.mul(m))
                .collect::<Result<_>>()?;
        }
        if self.ablation.uses_spatial_attention() {
            maps.spatial = spatial_attention(&branch, &self.spatial)?;
            branch = branch
                .iter()
                .zip(&maps.spatial)
                .map(|(f, m)| f.mul(m))
                .collect::<Result<_>>()?;
        }
        let fused = self.ffb.apply(&concat_channels(&branch)?)?;
        Ok((fused, maps))
    }

    pub fn ufa_fuse(&self, features: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.fuse_features(features).map(|(fused, _)| fused)
    }

    /// ICB1..ICB3 with LeakyReLU, ICB4 with a sigmoid.
    pub fn reconstruct(&self, fused: &Tensor<T>) -> Result<Tensor<T>> {
        let s = fused.shape();
        if s.c != FEATURE_CHANNELS {
            return Err(Error::shape(format!(
                "reconstruction expects {FEATURE_CHANNELS} channels, got {s}"
            )));
        }
        let mut x = fused.clone();
        let last = self.icb.len() - 1;
        for (i, layer) in self.icb.iter().enumerate() {
            let y = layer.apply(&x)?;
            x = if i == last { y.sigmoid() } else { y.leaky_relu(self.slope()) };
        }
        Ok(x)
    }

    pub fn forward_with_attention(&self, images: &[Tensor<T>]) -> Result<(Tensor<T>, AttentionMaps<T>)> {
        if images.len() != INPUTS {
            return Err(Error::invalid(format!(
                "expected {INPUTS} source images, got {}",
                images.len()
            )));
        }
        if images[0].shape() != images[1].shape() {
            return Err(Error::shape(format!(
                "source images differ in shape: {} vs {}",
                images[0].shape(),
                images[1].shape()
            )));
        }
        let features = images
            .iter()
            .map(|img| self.extract_features(img))
            .collect::<Result<Vec<_>>>()?;
        let (fused, maps) = self.fuse_features(&features)?;
        Ok((self.reconstruct(&fused)?, maps))
    }

    /// Fused image for two aligned `(N, 3, H, W)` sources.
    pub fn forward(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.forward_with_attention(images).map(|(out, _)| out)
    }

    pub fn dump_attention(&self, images: &[Tensor<T>]) -> Result<AttentionMaps<T>> {
        self.forward_with_attention(images).map(|(_, maps)| maps)
    }
}

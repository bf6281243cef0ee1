use crate::error::Result;
use crate::tensor::{concat_channels, softmax_over_set, ConvWeights, Element, PoolMode, Tensor};

/// Attention weights computed during one forward pass, one entry per input.
///
/// `channel[k]` is `(N, 64, 1, 1)`, `spatial[k]` is `(N, 1, H, W)`. A family
/// is empty when the ablation mode skips it.
#[derive(Clone, Debug)]
pub struct AttentionMaps<T: Element = f32> {
    pub channel: Vec<Tensor<T>>,
    pub spatial: Vec<Tensor<T>>,
}

impl<T: Element> Default for AttentionMaps<T> {
    fn default() -> Self {
        AttentionMaps {
            channel: Vec::new(),
            spatial: Vec::new(),
        }
    }
}

/// Global average pool per input, then softmax across inputs per channel.
/// No learned parameters.
pub fn channel_attention<T: Element>(features: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let pooled: Vec<Tensor<T>> = features.iter().map(Tensor::global_avg_pool).collect();
    softmax_over_set(&pooled)
}

/// Channel-wise mean and max maps, the shared 7×7 conv, then softmax across
/// inputs per pixel.
pub fn spatial_attention<T: Element>(
    features: &[Tensor<T>],
    conv: &ConvWeights<T>,
) -> Result<Vec<Tensor<T>>> {
    let logits = features
        .iter()
        .map(|f| {
            let pooled = concat_channels(&[f.channel_pool(PoolMode::Avg), f.channel_pool(PoolMode::Max)])?;
            conv.apply(&pooled)
        })
        .collect::<Result<Vec<_>>>()?;
    softmax_over_set(&logits)
}

//! Binary checkpoint format.
//!
//! ```text
//! "UFAF"  u16 version
//! u32 metadata length, then:
//!     u8 len + ablation name, f64 leaky slope, u8 len + init scheme,
//!     u64 init seed, f64 lambda, u32 epochs completed, u64 optimizer step
//! u32 tensor count, then per tensor:
//!     u16 len + name, u8 rank, u32 dims[rank], f32 values (row-major)
//! ```
//!
//! All integers and floats are little-endian. Kernels are stored as
//! `(O, I, kh, kw)`, biases as `(O)`. Optimizer moments, when present, are
//! stored as `adam.m.<param>` / `adam.v.<param>` with the parameter's dims.

use std::fs;
use std::path::Path;

use super::{layer_plan, Ablation, FusionNetwork};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, ConvWeights, Element, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"UFAF";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub ablation: Ablation,
    pub leaky_slope: f64,
    pub init_scheme: String,
    pub init_seed: u64,
    pub lambda: f64,
    pub epochs_completed: u32,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

fn to_f32<T: Element>(values: &[T]) -> Vec<f32> {
    values.iter().map(|v| v.as_f64() as f32).collect()
}

impl Checkpoint {
    pub fn from_network<T: Element>(
        net: &FusionNetwork<T>,
        lambda: f64,
        epochs_completed: u32,
        optimizer: Option<&AdamState<T>>,
    ) -> Self {
        let names = FusionNetwork::<T>::parameter_names();
        let params = net.parameters();
        let dims_of = |p: &Tensor<T>, name: &str| -> Vec<usize> {
            if name.ends_with(".bias") {
                vec![p.shape().c]
            } else {
                p.shape().dims().to_vec()
            }
        };
        let mut tensors: Vec<NamedTensor> = names
            .iter()
            .zip(&params)
            .map(|(name, p)| NamedTensor {
                name: name.clone(),
                dims: dims_of(p, name),
                values: to_f32(p.data()),
            })
            .collect();
        let mut optimizer_step = 0;
        if let Some(state) = optimizer.filter(|s| s.first_moment.len() == params.len()) {
            optimizer_step = state.step;
            for (prefix, moments) in [("adam.m", &state.first_moment), ("adam.v", &state.second_moment)] {
                for ((name, p), m) in names.iter().zip(&params).zip(moments) {
                    tensors.push(NamedTensor {
                        name: format!("{prefix}.{name}"),
                        dims: dims_of(p, name),
                        values: to_f32(m),
                    });
                }
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                ablation: net.ablation,
                leaky_slope: net.leaky_slope,
                init_scheme: super::INIT_SCHEME.to_string(),
                init_seed: net.init_seed,
                lambda,
                epochs_completed,
                optimizer_step,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn values_for<T: Element>(&self, name: &str, shape: Shape) -> Result<Vec<T>> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.values.len() != shape.numel() || t.dims.iter().product::<usize>() != shape.numel() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dims {:?}, expected {shape}",
                t.dims
            )));
        }
        Ok(t.values.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect())
    }

    pub fn to_network<T: Element>(&self) -> Result<FusionNetwork<T>> {
        let layers = layer_plan()
            .into_iter()
            .map(|(name, out, input, k)| {
                let ks = Shape::new(out, input, k, k);
                let bs = Shape::new(1, out, 1, 1);
                let kernel = Tensor::parameter(ks, self.values_for(&format!("{name}.weight"), ks)?)?;
                let bias = Tensor::parameter(bs, self.values_for(&format!("{name}.bias"), bs)?)?;
                ConvWeights::new(kernel, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        FusionNetwork::from_layers(layers, self.meta.ablation, self.meta.leaky_slope, self.meta.init_seed)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Optimizer moments, if the checkpoint carries them.
    pub fn optimizer_state<T: Element>(&self) -> Result<Option<AdamState<T>>> {
        let names = FusionNetwork::<T>::parameter_names();
        if self.tensor(&format!("adam.m.{}", names[0])).is_none() {
            return Ok(None);
        }
        let net = self.to_network::<T>()?;
        let mut first_moment = Vec::new();
        let mut second_moment = Vec::new();
        for (name, p) in names.iter().zip(net.parameters()) {
            first_moment.push(self.values_for(&format!("adam.m.{name}"), p.shape())?);
            second_moment.push(self.values_for(&format!("adam.v.{name}"), p.shape())?);
        }
        Ok(Some(AdamState {
            step: self.meta.optimizer_step,
            first_moment,
            second_moment,
        }))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut meta = Vec::new();
        put_short_str(&mut meta, self.meta.ablation.as_str())?;
        meta.extend_from_slice(&self.meta.leaky_slope.to_le_bytes());
        put_short_str(&mut meta, &self.meta.init_scheme)?;
        meta.extend_from_slice(&self.meta.init_seed.to_le_bytes());
        meta.extend_from_slice(&self.meta.lambda.to_le_bytes());
        meta.extend_from_slice(&self.meta.epochs_completed.to_le_bytes());
        meta.extend_from_slice(&self.meta.optimizer_step.to_le_bytes());

        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(too_big)?.to_le_bytes());
        for t in &self.tensors {
            let name = u16::try_from(t.name.len()).map_err(too_big)?;
            out.extend_from_slice(&name.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(u8::try_from(t.dims.len()).map_err(too_big)?);
            for &d in &t.dims {
                out.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
            }
            if t.dims.iter().product::<usize>() != t.values.len() {
                return Err(Error::Checkpoint(format!("tensor {} dims do not match its values", t.name)));
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_end = r.pos + meta_len;
        let ablation: Ablation = r
            .short_str("ablation")?
            .parse()
            .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
        let meta = CheckpointMeta {
            ablation,
            leaky_slope: r.f64("leaky slope")?,
            init_scheme: r.short_str("init scheme")?,
            init_seed: r.u64("init seed")?,
            lambda: r.f64("lambda")?,
            epochs_completed: r.u32("epoch count")?,
            optimizer_step: r.u64("optimizer step")?,
        };
        if r.pos > meta_end {
            return Err(r.fail("metadata overruns its declared length"));
        }
        // Later versions may append metadata fields; skip what we don't know.
        r.pos = meta_end;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| r.fail("tensor name is not UTF-8"))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.fail("tensor dims overflow"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.fail("tensor too large"))?, "values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ufaf.partial");
        fs::write(&tmp, self.encode()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn too_big(_: std::num::TryFromIntError) -> Error {
    Error::Checkpoint("field too large for the checkpoint format".into())
}

fn put_short_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.push(u8::try_from(s.len()).map_err(too_big)?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::Checkpoint(format!("{msg} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(&format!("truncated checkpoint reading {what}"))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.array(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.array(what).map(f64::from_le_bytes)
    }

    fn short_str(&mut self, what: &str) -> Result<String> {
        let len = self.take(1, what)?[0] as usize;
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| self.fail(&format!("{what} is not UTF-8")))
    }
}

//! Minimal layer toolkit on top of `candle-core` autograd.
//!
//! Every trainable tensor is a named [`Var`]. Layers expose their variables
//! through [`Params`] so the trainers can choose which groups an optimizer
//! step touches and so checkpoints and parameter hashes see a stable order.

mod checkpoint;
mod im2col;
mod layers;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use im2col::{im2col, PatchGeometry};
pub use layers::{Conv1d, Conv2d, LayerNorm, Linear};
pub use optim::{grad_norm, Sgd, SgdConfig};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered list of named variables.
pub type Params = Vec<(String, Var)>;

pub fn device() -> Device {
    Device::Cpu
}

/// Seeded weight initializer. Candle's own random constructors draw from a
/// thread-local generator, so all model weights go through here instead.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?)
    }

    pub fn constant(&mut self, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        Ok(Var::from_tensor(&Tensor::from_vec(
            vec![value; n],
            shape,
            &device(),
        )?)?)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Written through `tanh` so neither direction overflows for large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_last(x)?.exp()?)
}

/// Inverted dropout with an explicit generator so training runs replay exactly.
pub fn dropout(x: &Tensor, p: f32, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| {
            if rng.gen::<f32>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
    Ok(x.mul(&mask)?)
}

/// SHA-256 over names, shapes and raw little-endian values of `params`.
pub fn hash_params(params: &[(String, Var)]) -> Result<String> {
    let mut h = Sha256::new();
    for (name, var) in params {
        h.update(name.as_bytes());
        for d in var.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in flat_f32(var.as_tensor())? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

/// Copy checkpoint tensors into live variables, matching by name and shape.
pub fn load_params(params: &[(String, Var)], ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    for (name, var) in params {
        let key = format!("{prefix}{name}");
        let (dims, data) = ckpt
            .tensor(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if dims != var.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {dims:?}, model expects {:?}",
                var.dims()
            )));
        }
        var.set(&Tensor::from_vec(data.to_vec(), dims, &device())?)?;
    }
    Ok(())
}

pub fn prefixed(prefix: &str, params: Params) -> Params {
    params
        .into_iter()
        .map(|(n, v)| (format!("{prefix}{n}"), v))
        .collect()
}

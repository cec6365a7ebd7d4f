use candle_core::{Tensor, Var, D};

use super::im2col::{im2col, PatchGeometry};
use super::{Init, Params};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: init.uniform(&[out_dim, in_dim], bound)?,
            bias: init.uniform(&[out_dim], bound)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x` is `(.., in_dim)`; output is `(.., out_dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().t()?;
        if x.rank() == 1 {
            let y = x.unsqueeze(0)?.matmul(&w)?.squeeze(0)?;
            return Ok(y.add(self.bias.as_tensor())?);
        }
        let mut dims = x.dims().to_vec();
        let rows = x.reshape(((), self.in_dim()))?;
        let y = rows.matmul(&w)?.broadcast_add(self.bias.as_tensor())?;
        *dims.last_mut().expect("rank checked") = self.out_dim();
        Ok(y.reshape(dims)?)
    }

    pub fn params(&self) -> Params {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Ok(Self {
            weight: init.normal(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt())?,
            bias: init.constant(&[out_ch], 0.0)?,
            stride,
            padding: kernel / 2,
        })
    }

    /// Scales the initial weights, used to start residual branches near identity.
    pub fn scaled(self, factor: f64) -> Result<Self> {
        let w = (self.weight.as_tensor() * factor)?;
        self.weight.set(&w)?;
        Ok(self)
    }

    /// `x` is `(N, C, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let (o, c, k, _) = self.weight.dims4()?;
        let geom = PatchGeometry {
            kh: k,
            kw: k,
            stride_h: self.stride,
            stride_w: self.stride,
            pad_h: self.padding,
            pad_w: self.padding,
            dil_h: 1,
            dil_w: 1,
        };
        let (ho, wo) = geom.out_size(h, w);
        let cols = im2col(x, geom)?;
        let wm = self.weight.as_tensor().reshape((o, c * k * k))?;
        let b = self.bias.as_tensor().reshape(((), 1))?;
        let y = wm.matmul(&cols)?.broadcast_add(&b)?;
        Ok(y.reshape((o, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
    }

    pub fn params(&self) -> Params {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

/// Dilated temporal convolution with symmetric zero padding, so the output
/// has the same number of time steps as the input.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Var,
    pub bias: Var,
    dilation: usize,
}

impl Conv1d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        assert!(kernel % 2 == 1, "symmetric context needs an odd kernel");
        let fan_in = (in_ch * kernel) as f64;
        Ok(Self {
            weight: init.normal(&[out_ch, in_ch, kernel], (2.0 / fan_in).sqrt())?,
            bias: init.constant(&[out_ch], 0.0)?,
            dilation,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Number of steps on either side that influence one output step.
    pub fn radius(&self) -> usize {
        self.dilation * (self.kernel() - 1) / 2
    }

    /// `x` is `(N, C, T)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, t) = x.dims3()?;
        let (o, _, k) = self.weight.dims3()?;
        let b = self.bias.as_tensor().reshape(((), 1))?;
        let geom = PatchGeometry {
            kh: 1,
            kw: k,
            stride_h: 1,
            stride_w: 1,
            pad_h: 0,
            pad_w: self.radius(),
            dil_h: 1,
            dil_w: self.dilation,
        };
        let cols = im2col(&x.reshape((n, c, 1, t))?, geom)?;
        let wm = self.weight.as_tensor().reshape((o, c * k))?;
        let y = wm.matmul(&cols)?.broadcast_add(&b)?;
        Ok(y.reshape((o, n, t))?.transpose(0, 1)?.contiguous()?)
    }

    pub fn params(&self) -> Params {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&[dim], 1.0)?,
            beta: init.constant(&[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }

    pub fn params(&self) -> Params {
        vec![
            ("gamma".into(), self.gamma.clone()),
            ("beta".into(), self.beta.clone()),
        ]
    }
}

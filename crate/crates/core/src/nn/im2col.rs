//! Patch extraction for convolutions as a differentiable tensor op.
//!
//! `im2col` maps `(N, C, H, W)` to a `(C * kh * kw, N * Ho * Wo)` matrix so a
//! convolution becomes one matrix product with the `(O, C * kh * kw)` weight.
//! Its gradient is the matching scatter-add (`col2im`).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dil_h: usize,
    pub dil_w: usize,
}

impl PatchGeometry {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let eh = self.dil_h * (self.kh - 1) + 1;
        let ew = self.dil_w * (self.kw - 1) + 1;
        (
            (h + 2 * self.pad_h - eh) / self.stride_h + 1,
            (w + 2 * self.pad_w - ew) / self.stride_w + 1,
        )
    }

    /// Visit every (column row, column, source offset) triple that reads a real
    /// (non-padding) input element.
    #[inline]
    fn for_each(&self, n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_size(h, w);
        let cols = n * ho * wo;
        for ci in 0..c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let row_base = row * cols;
                    for b in 0..n {
                        let src_base = (b * c + ci) * h * w;
                        let col_base = row_base + b * ho * wo;
                        for y in 0..ho {
                            let sy = (y * self.stride_h + i * self.dil_h) as isize - self.pad_h as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src_row = src_base + sy as usize * w;
                            let dst_row = col_base + y * wo;
                            for x in 0..wo {
                                let sx = (x * self.stride_w + j * self.dil_w) as isize - self.pad_w as isize;
                                if sx >= 0 && sx < w as isize {
                                    f(dst_row + x, src_row + sx as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_f32<'a>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

struct Im2Col(PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let src = contiguous_f32(storage, layout)?;
        let g = self.0;
        let (ho, wo) = g.out_size(h, w);
        let rows = c * g.kh * g.kw;
        let mut out = vec![0f32; rows * n * ho * wo];
        g.for_each(n, c, h, w, |dst, s| out[dst] = src[s]);
        Ok((CpuStorage::F32(out), Shape::from((rows, n * ho * wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let g = grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im {
            geom: self.0,
            n,
            c,
            h,
            w,
        })?;
        Ok(Some(g))
    }
}

struct Col2Im {
    geom: PatchGeometry,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let src = contiguous_f32(storage, layout)?;
        let (n, c, h, w) = (self.n, self.c, self.h, self.w);
        let mut out = vec![0f32; n * c * h * w];
        self.geom.for_each(n, c, h, w, |col, dst| out[dst] += src[col]);
        Ok((CpuStorage::F32(out), Shape::from((n, c, h, w))))
    }
}

/// `(N, C, H, W)` to `(C * kh * kw, N * Ho * Wo)`; differentiable.
pub fn im2col(x: &Tensor, geom: PatchGeometry) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(geom))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn geom(k: usize, s: usize, p: usize, d: usize) -> PatchGeometry {
        PatchGeometry {
            kh: k,
            kw: k,
            stride_h: s,
            stride_w: s,
            pad_h: p,
            pad_w: p,
            dil_h: d,
            dil_w: d,
        }
    }

    #[test]
    fn shape_and_values() {
        let x = Tensor::arange(0f32, 16.0, &crate::nn::device())
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let cols = im2col(&x, geom(3, 1, 1, 1)).unwrap();
        assert_eq!(cols.dims(), &[9, 16]);
        let v = cols.to_vec2::<f32>().unwrap();
        // centre tap reproduces the input, corner tap is padded at the border
        assert_eq!(v[4], (0..16).map(|i| i as f32).collect::<Vec<_>>());
        assert_eq!(v[0][0], 0.0);
        assert_eq!(v[0][5], 0.0);
        assert_eq!(v[8][0], 5.0);
    }

    #[test]
    fn gradient_is_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y
        let mut init = Init::new(1);
        for g in [geom(3, 2, 1, 1), geom(3, 1, 2, 2), geom(1, 1, 0, 1)] {
            let x = init.normal(&[2, 3, 7, 6], 1.0).unwrap();
            let cols = im2col(x.as_tensor(), g).unwrap();
            let y = init.normal(cols.dims(), 1.0).unwrap();
            let lhs = (cols.clone() * y.as_tensor())
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            let grads = (cols * y.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
            let gx = grads.get(&x).unwrap();
            let rhs = (gx * x.as_tensor())
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}

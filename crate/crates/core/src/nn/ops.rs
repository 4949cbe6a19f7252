//! Differentiable tensor primitives the network is assembled from.
//!
//! Convolutions are lowered to a single GEMM per call: [`Im2Col`] unfolds
//! the input into a `(C·kh·kw, B·Ho·Wo)` patch matrix and [`Col2Im`] is its
//! adjoint (scatter-add). Each op is the other's backward pass, so both the
//! forward and backward of a convolution stay on the matmul fast path.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, D};

use crate::error::{Error, Result};

/// Geometry of a patch extraction over a `(batch, channels, height, width)` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config(format!("degenerate patch geometry {self:?}")));
        }
        if self.height + 2 * self.pad < self.kernel_h || self.width + 2 * self.pad < self.kernel_w {
            return Err(Error::Precondition(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h, self.kernel_w, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Source coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col_impl<T: Copy + Default>(src: &[T], g: &PatchGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let mut dst = vec![T::default(); g.rows() * ncols];
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let drow = &mut dst[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let img = &src[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let Some(iy) = g.source(oy, ky, g.height) else { continue };
                        let out = &mut drow[b * plane + oy * ow..][..ow];
                        let line = &img[iy * g.width..(iy + 1) * g.width];
                        for (ox, o) in out.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                *o = line[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_impl<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &PatchGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let mut dst = vec![T::default(); g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let srow = &src[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let base = (b * g.channels + c) * g.height * g.width;
                    for oy in 0..oh {
                        let Some(iy) = g.source(oy, ky, g.height) else { continue };
                        let inp = &srow[b * plane + oy * ow..][..ow];
                        let line = &mut dst[base + iy * g.width..base + (iy + 1) * g.width];
                        for (ox, v) in inp.iter().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                line[ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous_range(layout: &Layout, op: &str) -> candle_core::Result<(usize, usize)> {
    layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{op}: input must be contiguous")))
}

/// Unfolds `(B, C, H, W)` into the `(C·kh·kw, B·Ho·Wo)` patch matrix.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col(pub PatchGeometry);

/// Adjoint of [`Im2Col`]: folds a patch matrix back into `(B, C, H, W)` by summation.
#[derive(Debug, Clone, Copy)]
pub struct Col2Im(pub PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (start, end) = contiguous_range(layout, "im2col")?;
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_impl(&v[start..end], g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_impl(&v[start..end], g)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (start, end) = contiguous_range(layout, "col2im")?;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_impl(&v[start..end], g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_impl(&v[start..end], g)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Forward value of the second argument, gradient routed entirely to the first.
struct StraightThrough;

impl CustomOp2 for StraightThrough {
    fn name(&self) -> &'static str {
        "straight-through"
    }

    fn cpu_fwd(
        &self,
        _s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            candle_core::bail!("straight-through: shapes {:?} and {:?} differ", l1.shape(), l2.shape());
        }
        let (start, end) = contiguous_range(l2, "straight-through")?;
        let out = match s2 {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            other => candle_core::bail!("straight-through: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, l2.shape().clone()))
    }

    fn bwd(
        &self,
        _arg1: &Tensor,
        _arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad_res.clone()), None))
    }
}

/// Returns `value` bit-for-bit in the forward pass while copying the incoming
/// gradient unchanged onto `input` (and none onto `value`).
pub fn straight_through(input: &Tensor, value: &Tensor) -> Result<Tensor> {
    Ok(input.apply_op2(&value.detach().contiguous()?, StraightThrough)?)
}

pub fn conv_geometry(x: &Tensor, kernel_h: usize, kernel_w: usize, stride: usize, pad: usize) -> Result<PatchGeometry> {
    let (batch, channels, height, width) = x.dims4()?;
    let g = PatchGeometry {
        batch,
        channels,
        height,
        width,
        kernel_h,
        kernel_w,
        stride,
        pad,
    };
    g.validate()?;
    Ok(g)
}

/// 2-D cross-correlation. `weight` is `(C_out, C_in, kh, kw)`, `bias` is `(C_out,)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (c_out, c_in, kh, kw) = weight.dims4()?;
    let g = conv_geometry(x, kh, kw, stride, pad)?;
    if g.channels != c_in {
        return Err(Error::Shape(format!(
            "conv expects {c_in} input channels, got {}",
            g.channels
        )));
    }
    let cols = if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        x.transpose(0, 1)?.contiguous()?.reshape((c_in, g.cols()))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let out = weight
        .reshape((c_out, g.rows()))?
        .matmul(&cols)?
        .reshape((c_out, g.batch, g.out_h(), g.out_w()))?
        .transpose(0, 1)?
        .contiguous()?;
    match bias {
        Some(b) => Ok(out.broadcast_add(&b.reshape((1, c_out, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Transposed convolution (the adjoint of [`conv2d`] with the same stride and padding).
/// `weight` is `(C_in, C_out, k, k)`; output side is `(in - 1)·stride - 2·pad + k`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (batch, c_in, h, w) = x.dims4()?;
    let (wc_in, c_out, kh, kw) = weight.dims4()?;
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "transposed conv expects {wc_in} input channels, got {c_in}"
        )));
    }
    if (h - 1) * stride + kh < 2 * pad || (w - 1) * stride + kw < 2 * pad {
        return Err(Error::Precondition("transposed conv output would be empty".into()));
    }
    let g = PatchGeometry {
        batch,
        channels: c_out,
        height: (h - 1) * stride + kh - 2 * pad,
        width: (w - 1) * stride + kw - 2 * pad,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad,
    };
    g.validate()?;
    debug_assert_eq!((g.out_h(), g.out_w()), (h, w));
    let xt = x.transpose(0, 1)?.contiguous()?.reshape((c_in, batch * h * w))?;
    let cols = weight
        .reshape((c_in, c_out * kh * kw))?
        .t()?
        .matmul(&xt)?
        .contiguous()?;
    let out = cols.apply_op1(Col2Im(g))?;
    match bias {
        Some(b) => Ok(out.broadcast_add(&b.reshape((1, c_out, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Concatenates feature maps along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn lcg_values(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Direct-loop cross-correlation used as the reference.
    fn naive_conv(
        x: &[f64],
        (b, c, h, w): (usize, usize, usize, usize),
        k: &[f64],
        (co, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * co * oh * ow];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let dev = Device::Cpu;
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 4)] {
            let (b, c, h, w, co) = (2, 3, 8, 6, 4);
            let xs = lcg_values(b * c * h * w, 1);
            let ks = lcg_values(co * c * k * k, 2);
            let x = Tensor::from_vec(xs.clone(), (b, c, h, w), &dev).unwrap();
            let kt = Tensor::from_vec(ks.clone(), (co, c, k, k), &dev).unwrap();
            let y = conv2d(&x, &kt, None, stride, pad).unwrap();
            let (expect, oh, ow) = naive_conv(&xs, (b, c, h, w), &ks, (co, k, k), stride, pad);
            assert_eq!(y.dims4().unwrap(), (b, co, oh, ow));
            let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, e) in got.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry.
        let dev = Device::Cpu;
        let (b, ci, co, h, k, s, p) = (2, 3, 5, 8, 4, 2, 1);
        let x = Tensor::from_vec(lcg_values(b * ci * h * h, 3), (b, ci, h, h), &dev).unwrap();
        let wk = Tensor::from_vec(lcg_values(co * ci * k * k, 4), (co, ci, k, k), &dev).unwrap();
        let y = conv2d(&x, &wk, None, s, p).unwrap();
        let (_, _, oh, ow) = y.dims4().unwrap();
        let r = Tensor::from_vec(lcg_values(b * co * oh * ow, 5), (b, co, oh, ow), &dev).unwrap();
        let lhs = (y * &r).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        // conv_transpose weight layout is (C_in', C_out') = (co, ci).
        let xt = conv_transpose2d(&r, &wk, None, s, p).unwrap();
        assert_eq!(xt.dims4().unwrap(), (b, ci, h, h));
        let rhs = (x * xt).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn im2col_backward_is_col2im() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(lcg_values(2 * 2 * 5 * 5, 9), (2, 2, 5, 5), &dev).unwrap()).unwrap();
        let g = conv_geometry(x.as_tensor(), 3, 3, 2, 1).unwrap();
        let cols = x.as_tensor().apply_op1(Im2Col(g)).unwrap();
        let r = Tensor::from_vec(lcg_values(g.rows() * g.cols(), 10), (g.rows(), g.cols()), &dev).unwrap();
        let loss = (cols * &r).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        let expect = r.apply_op1(Col2Im(g)).unwrap();
        let diff = (gx - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn straight_through_copies_value_and_gradient() {
        let dev = Device::Cpu;
        let z = Var::from_tensor(&Tensor::new(&[0.3f64, -1.2, 2.0], &dev).unwrap()).unwrap();
        let e = Var::from_tensor(&Tensor::new(&[1.0f64, 0.5, -0.25], &dev).unwrap()).unwrap();
        let q = straight_through(z.as_tensor(), e.as_tensor()).unwrap();
        assert_eq!(q.to_vec1::<f64>().unwrap(), vec![1.0, 0.5, -0.25]);
        let w = Tensor::new(&[1.0f64, 2.0, 3.0], &dev).unwrap();
        let grads = (q * w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(z.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(grads.get(e.as_tensor()).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(lcg_values(4 * 7, 11), (4, 7), &dev)
            .unwrap()
            .affine(30.0, 0.0)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        let s = softmax_last_dim(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in s {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}

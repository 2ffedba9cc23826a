//! Fused 2-D convolution with bias as a custom op. Forward and backward are
//! patch extraction plus one matrix product per image.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor};
use gemm::Parallelism;

use super::ops::{contiguous, dispatch3, Real};

/// Geometry of a square-kernel convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Patch length `C k k`.
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output positions per image.
    pub fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Calls `f(row, col, src, len)` for every run of in-bounds patch entries;
    /// along a run `col` advances by 1 and `src` by the stride.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (ho, wo) = (self.out_height(), self.out_width());
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let ox_lo = p.saturating_sub(kx).div_ceil(s);
                    let ox_hi = (self.width + p).saturating_sub(kx).div_ceil(s).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src = (c * self.height + iy as usize) * self.width + ox_lo * s + kx - p;
                        f(row, oy * wo + ox_lo, src, ox_hi - ox_lo);
                    }
                }
            }
        }
    }

    /// One image `(C, H, W)` into `(C k k, H_out W_out)`; `dst` must be zeroed.
    pub fn im2col<T: Copy>(&self, src: &[T], dst: &mut [T]) {
        let (cols, s) = (self.cols(), self.stride);
        self.for_each_run(|r, c, i, len| {
            let out = &mut dst[r * cols + c..r * cols + c + len];
            if s == 1 {
                out.copy_from_slice(&src[i..i + len]);
            } else {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = src[i + j * s];
                }
            }
        });
    }

    /// Adjoint of [`Geometry::im2col`], accumulating into `dst`.
    pub fn col2im<T: Copy + AddAssign>(&self, src: &[T], dst: &mut [T]) {
        let (cols, s) = (self.cols(), self.stride);
        self.for_each_run(|r, c, i, len| {
            let run = &src[r * cols + c..r * cols + c + len];
            if s == 1 {
                for (o, &v) in dst[i..i + len].iter_mut().zip(run) {
                    *o += v;
                }
            } else {
                for (j, &v) in run.iter().enumerate() {
                    dst[i + j * s] += v;
                }
            }
        });
    }
}

/// Row-major `dst (m, n) (+)= lhs (m, k) . rhs (k, n)`, with each operand
/// given as (row stride, column stride).
fn matmul<T: Real>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    accumulate: bool,
    lhs: (&[T], usize, usize),
    rhs: (&[T], usize, usize),
) {
    assert!(dst.len() >= m * n);
    assert!(m == 0 || k == 0 || lhs.0.len() > (m - 1) * lhs.1 + (k - 1) * lhs.2);
    assert!(k == 0 || n == 0 || rhs.0.len() > (k - 1) * rhs.1 + (n - 1) * rhs.2);
    // SAFETY: the bounds above keep every access inside the slices.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.0.as_ptr(),
            lhs.2 as isize,
            lhs.1 as isize,
            rhs.0.as_ptr(),
            rhs.2 as isize,
            rhs.1 as isize,
            if accumulate { T::ONE } else { T::default() },
            T::ONE,
            false,
            false,
            false,
            Parallelism::None,
        );
    }
}

fn forward<T: Real>(g: &Geometry, n: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (co, rows, cols) = (b.len(), g.rows(), g.cols());
    let mut out = vec![T::default(); n * co * cols];
    let mut patches = vec![T::default(); rows * cols];
    for i in 0..n {
        patches.fill(T::default());
        g.im2col(&x[i * g.image_len()..(i + 1) * g.image_len()], &mut patches);
        let y = &mut out[i * co * cols..(i + 1) * co * cols];
        for (o, &bias) in b.iter().enumerate() {
            y[o * cols..(o + 1) * cols].fill(bias);
        }
        matmul((co, cols, rows), y, true, (w, rows, 1), (&patches, cols, 1));
    }
    out
}

/// Gradients packed as `[dx | dw | db]`.
fn backward<T: Real>(g: &Geometry, n: usize, co: usize, x: &[T], w: &[T], dy: &[T]) -> Vec<T> {
    let (rows, cols, img) = (g.rows(), g.cols(), g.image_len());
    let mut out = vec![T::default(); n * img + co * rows + co];
    let (dx, rest) = out.split_at_mut(n * img);
    let (dw, db) = rest.split_at_mut(co * rows);
    let mut patches = vec![T::default(); rows * cols];
    for i in 0..n {
        let dy_i = &dy[i * co * cols..(i + 1) * co * cols];
        for (o, acc) in db.iter_mut().enumerate() {
            for &v in &dy_i[o * cols..(o + 1) * cols] {
                *acc += v;
            }
        }
        patches.fill(T::default());
        g.im2col(&x[i * img..(i + 1) * img], &mut patches);
        // dw += dy_i . patches^T
        matmul((co, rows, cols), dw, true, (dy_i, cols, 1), (&patches, 1, cols));
        // dpatches = w^T . dy_i
        matmul((rows, cols, co), &mut patches, false, (w, 1, rows), (dy_i, cols, 1));
        g.col2im(&patches, &mut dx[i * img..(i + 1) * img]);
    }
    out
}

/// Fused `conv(x, w) + b` over `(N, C, H, W)`, `(C_out, C, k, k)` and `(C_out)`.
#[derive(Debug, Clone, Copy)]
struct Conv(Geometry);

/// Gradients of [`Conv`] for `(x, w, dy)`, packed as `[dx | dw | db]`.
#[derive(Debug, Clone, Copy)]
struct ConvGrad(Geometry);

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-fused"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = l1.shape().dims()[0];
        let co = l3.shape().elem_count();
        let shape = Shape::from((n, co, g.out_height(), g.out_width()));
        let out = dispatch3!("conv2d", s1, l1, s2, l2, s3, l3, |x, w, b| forward(g, n, x, w, b));
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(w, &grad.contiguous()?, &ConvGrad(self.0))?;
        let (nx, nw, nb) = (x.elem_count(), w.elem_count(), b.elem_count());
        Ok((
            Some(packed.narrow(0, 0, nx)?.reshape(x.shape())?),
            Some(packed.narrow(0, nx, nw)?.reshape(w.shape())?),
            Some(packed.narrow(0, nx + nw, nb)?.reshape(b.shape())?),
        ))
    }
}

impl CustomOp3 for ConvGrad {
    fn name(&self) -> &'static str {
        "conv2d-fused-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = l1.shape().dims()[0];
        let co = l2.shape().dims()[0];
        let len = n * g.image_len() + co * g.rows() + co;
        let out = dispatch3!("conv2d", s1, l1, s2, l2, s3, l3, |x, w, dy| backward(g, n, co, x, w, dy));
        Ok((out, Shape::from(len)))
    }
}

/// Zero-padded 2-D convolution of `(N, C, H, W)` by `(C_out, C, k, k)` plus
/// a `(C_out)` bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 || bias.dims() != [co] || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        candle_core::bail!(
            "conv2d weight {:?} and bias {:?} do not fit input {:?}",
            weight.shape(),
            bias.shape(),
            x.shape()
        );
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, Conv(g))
}

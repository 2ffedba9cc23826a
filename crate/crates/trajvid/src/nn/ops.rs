//! Group normalization and nearest upsampling as custom ops with closed-form
//! backward passes.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor};

pub(crate) trait Real: Copy + Default + std::ops::AddAssign + 'static {
    const ONE: Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    const ONE: Self = 1.0;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    const ONE: Self = 1.0;
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

pub(crate) fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom op needs contiguous operands"),
    }
}

macro_rules! dispatch3 {
    ($name:literal, $s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, $f:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => {
                CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?, contiguous(c, $l3)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => {
                CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?, contiguous(c, $l3)?))
            }
            _ => candle_core::bail!("{} supports matching f32 or f64 operands", $name),
        }
    };
}
pub(crate) use dispatch3;

#[derive(Debug, Clone, Copy)]
struct NormShape {
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
    silu: bool,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl NormShape {
    fn group_len(&self) -> usize {
        self.c / self.groups * self.hw
    }

    /// Mean and reciprocal standard deviation of group `(i, g)`.
    fn stats<T: Real>(&self, x: &[T], i: usize, g: usize) -> (f64, f64) {
        let len = self.group_len();
        let start = (i * self.c + g * (self.c / self.groups)) * self.hw;
        let xs = &x[start..start + len];
        let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / len as f64;
        let var = xs.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / len as f64;
        (mean, 1.0 / (var + self.eps).sqrt())
    }

    fn forward<T: Real>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); x.len()];
        let cg = self.c / self.groups;
        for i in 0..self.n {
            for g in 0..self.groups {
                let (mean, rstd) = self.stats(x, i, g);
                for ch in g * cg..(g + 1) * cg {
                    let (ga, be) = (gamma[ch].to_f64(), beta[ch].to_f64());
                    let base = (i * self.c + ch) * self.hw;
                    for p in base..base + self.hw {
                        let z = (x[p].to_f64() - mean) * rstd * ga + be;
                        out[p] = T::from_f64(if self.silu { z * sigmoid(z) } else { z });
                    }
                }
            }
        }
        out
    }

    /// Gradient at the affine output, through the activation.
    #[inline]
    fn through_activation(&self, dy: f64, xhat: f64, ga: f64, be: f64) -> f64 {
        if self.silu {
            let z = xhat * ga + be;
            let s = sigmoid(z);
            dy * s * (1.0 + z * (1.0 - s))
        } else {
            dy
        }
    }

    /// `[dx | dgamma | dbeta]`.
    fn backward<T: Real>(&self, x: &[T], gamma: &[T], beta: &[T], dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::default(); x.len() + 2 * self.c];
        let mut dgamma = vec![0.0f64; self.c];
        let mut dbeta = vec![0.0f64; self.c];
        let cg = self.c / self.groups;
        let len = self.group_len() as f64;
        for i in 0..self.n {
            for g in 0..self.groups {
                let (mean, rstd) = self.stats(x, i, g);
                // sums of dxhat and dxhat * xhat over the group
                let (mut s1, mut s2) = (0.0, 0.0);
                for ch in g * cg..(g + 1) * cg {
                    let (ga, be) = (gamma[ch].to_f64(), beta[ch].to_f64());
                    let base = (i * self.c + ch) * self.hw;
                    for p in base..base + self.hw {
                        let xhat = (x[p].to_f64() - mean) * rstd;
                        let d = self.through_activation(dy[p].to_f64(), xhat, ga, be);
                        dgamma[ch] += d * xhat;
                        dbeta[ch] += d;
                        s1 += d * ga;
                        s2 += d * ga * xhat;
                    }
                }
                let (m1, m2) = (s1 / len, s2 / len);
                for ch in g * cg..(g + 1) * cg {
                    let (ga, be) = (gamma[ch].to_f64(), beta[ch].to_f64());
                    let base = (i * self.c + ch) * self.hw;
                    for p in base..base + self.hw {
                        let xhat = (x[p].to_f64() - mean) * rstd;
                        let d = self.through_activation(dy[p].to_f64(), xhat, ga, be);
                        dx[p] = T::from_f64(rstd * (d * ga - m1 - xhat * m2));
                    }
                }
            }
        }
        let off = x.len();
        for ch in 0..self.c {
            dx[off + ch] = T::from_f64(dgamma[ch]);
            dx[off + self.c + ch] = T::from_f64(dbeta[ch]);
        }
        dx
    }
}

#[derive(Debug, Clone, Copy)]
struct GroupNormOp(NormShape);

/// Takes `(x, [gamma | beta], dy)`.
#[derive(Debug, Clone, Copy)]
struct GroupNormGrad(NormShape);

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
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
        let s = self.0;
        let out = dispatch3!("group-norm", s1, l1, s2, l2, s3, l3, |x, g, b| s.forward(x, g, b));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let affine = Tensor::cat(&[gamma, beta], 0)?;
        let packed = x.apply_op3_no_bwd(&affine, &grad.contiguous()?, &GroupNormGrad(self.0))?;
        let (nx, c) = (x.elem_count(), gamma.elem_count());
        Ok((
            Some(packed.narrow(0, 0, nx)?.reshape(x.shape())?),
            Some(packed.narrow(0, nx, c)?.reshape(gamma.shape())?),
            Some(packed.narrow(0, nx + c, c)?.reshape(gamma.shape())?),
        ))
    }
}

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-grad"
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
        let s = self.0;
        let out = dispatch3!("group-norm", s1, l1, s2, l2, s3, l3, |x, gb: &[_], dy| s
            .backward(x, &gb[..s.c], &gb[s.c..], dy));
        Ok((out, Shape::from(l1.shape().elem_count() + 2 * s.c)))
    }
}

/// Group normalization of `(N, C, H, W)` with per-channel affine `(C)`,
/// optionally followed by SiLU.
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
    silu: bool,
) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 || gamma.dims() != [c] || beta.dims() != [c] {
        candle_core::bail!("group norm with {groups} groups does not fit {:?}", x.shape());
    }
    let shape = NormShape {
        n,
        c,
        hw: h * w,
        groups,
        eps,
        silu,
    };
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp(shape))
}

/// Nearest-neighbour upsampling of `(N, C, H, W)` by an integer factor.
#[derive(Debug, Clone, Copy)]
struct Upsample(usize);

/// Adjoint of [`Upsample`]: sums each `factor x factor` block.
#[derive(Debug, Clone, Copy)]
struct BlockSum(usize);

fn upsample<T: Copy + Default>(x: &[T], rows: usize, w: usize, f: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len() * f * f];
    let wo = w * f;
    for r in 0..rows {
        let src = &x[r * w..(r + 1) * w];
        let first = r * f * wo;
        for (j, &v) in src.iter().enumerate() {
            out[first + j * f..first + (j + 1) * f].fill(v);
        }
        for k in 1..f {
            out.copy_within(first..first + wo, first + k * wo);
        }
    }
    out
}

fn block_sum<T: Copy + Default + std::ops::AddAssign>(x: &[T], rows: usize, w: usize, f: usize) -> Vec<T> {
    let mut out = vec![T::default(); rows * w];
    let wo = w * f;
    for r in 0..rows {
        let dst = &mut out[r * w..(r + 1) * w];
        for k in 0..f {
            let src = &x[(r * f + k) * wo..(r * f + k + 1) * wo];
            for (j, d) in dst.iter_mut().enumerate() {
                for &v in &src[j * f..(j + 1) * f] {
                    *d += v;
                }
            }
        }
    }
    out
}

impl CustomOp1 for Upsample {
    fn name(&self) -> &'static str {
        "upsample-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let f = self.0;
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(upsample(contiguous(x, l)?, n * c * h, w, f)),
            CpuStorage::F64(x) => CpuStorage::F64(upsample(contiguous(x, l)?, n * c * h, w, f)),
            _ => candle_core::bail!("upsample supports f32 and f64"),
        };
        Ok((out, Shape::from((n, c, h * f, w * f))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum(self.0))?))
    }
}

impl CustomOp1 for BlockSum {
    fn name(&self) -> &'static str {
        "block-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let f = self.0;
        if h % f != 0 || w % f != 0 {
            candle_core::bail!("block sum of {:?} by {f}", l.shape());
        }
        let (ho, wo) = (h / f, w / f);
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(block_sum(contiguous(x, l)?, n * c * ho, wo, f)),
            CpuStorage::F64(x) => CpuStorage::F64(block_sum(contiguous(x, l)?, n * c * ho, wo, f)),
            _ => candle_core::bail!("block sum supports f32 and f64"),
        };
        Ok((out, Shape::from((n, c, ho, wo))))
    }
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    if factor == 0 {
        candle_core::bail!("upsample factor must be positive");
    }
    x.contiguous()?.apply_op1(Upsample(factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    fn reference_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        let g = x.reshape((b, groups, c / groups * h * w)).unwrap();
        let centered = g.broadcast_sub(&g.mean_keepdim(D::Minus1).unwrap()).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let normed = centered
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .reshape((b, c, h, w))
            .unwrap();
        normed
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn group_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0.5f64, 2.0, (3, 6, 4, 5), &dev).unwrap()).unwrap();
        let gamma = Var::from_tensor(&Tensor::randn(1f64, 0.5, 6, &dev).unwrap()).unwrap();
        let beta = Var::from_tensor(&Tensor::randn(0f64, 0.5, 6, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (3, 6, 4, 5), &dev).unwrap();
        for silu in [false, true] {
            let ours = group_norm(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), 3, 1e-5, silu).unwrap();
            let mut want = reference_norm(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), 3);
            if silu {
                want = want.silu().unwrap();
            }
            assert!(max_diff(&ours, &want) < 1e-12);
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (want * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &gamma, &beta] {
                let d = max_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap());
                assert!(d < 1e-10, "silu={silu}: gradient differs by {d}");
            }
        }
    }

    #[test]
    fn upsample_matches_builtin() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 3, 5), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 3, 6, 10), &dev).unwrap();
        let ours = upsample_nearest(x.as_tensor(), 2).unwrap();
        let want = x.as_tensor().upsample_nearest2d(6, 10).unwrap();
        assert!(max_diff(&ours, &want) < 1e-15);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (want * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap()) < 1e-12);
    }
}

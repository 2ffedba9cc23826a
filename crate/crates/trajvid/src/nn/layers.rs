//! Convolution, linear and normalization layers over [`ParamStore`] tensors.

use candle_core::Tensor;

use super::params::{Group, Init, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Multiplier on the default fan-in bound; 0 gives a zero-initialized layer.
    pub gain: f64,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            gain: 1.0,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }
}

fn weight_init(fan_in: usize, gain: f64) -> Init {
    if gain == 0.0 {
        Init::Zeros
    } else {
        Init::FanIn { fan_in, gain }
    }
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, group: Group, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let fan_in = spec.c_in * k * k;
        let weight = ps.create(
            &format!("{name}.weight"),
            &[spec.c_out, spec.c_in, k, k],
            group,
            weight_init(fan_in, spec.gain),
        )?;
        let bias = ps.create(&format!("{name}.bias"), &[spec.c_out], group, Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(super::conv::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)?)
    }
}

/// `3 x 3 x 3` convolution over `(B, T, C, H, W)` with zero padding 1 in
/// every axis, so frame count and spatial size are preserved.
#[derive(Debug, Clone)]
pub struct Conv3d {
    /// `(C_out, C_in, 3, 3, 3)`, kernel axes ordered time, height, width.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3d {
    pub fn new(ps: &mut ParamStore, name: &str, group: Group, c_in: usize, c_out: usize, gain: f64) -> Result<Self> {
        let weight = ps.create(
            &format!("{name}.weight"),
            &[c_out, c_in, 3, 3, 3],
            group,
            weight_init(c_in * 27, gain),
        )?;
        let bias = ps.create(&format!("{name}.bias"), &[c_out], group, Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let c_out = self.weight.dim(0)?;
        // stack the three temporal taps on channels and run one 2-D conv
        let padded = x.pad_with_zeros(1, 1, 1)?;
        let stacked = Tensor::cat(
            &[padded.narrow(1, 0, t)?, padded.narrow(1, 1, t)?, padded.narrow(1, 2, t)?],
            2,
        )?
        .reshape((b * t, 3 * c, h, w))?;
        let kernel = self.weight.permute((0, 2, 1, 3, 4))?.reshape((c_out, 3 * c, 3, 3))?;
        let y = super::conv::conv2d(&stacked, &kernel, &self.bias, 1, 1)?;
        Ok(y.reshape((b, t, c_out, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, group: Group, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = ps.create(
            &format!("{name}.weight"),
            &[c_out, c_in],
            group,
            Init::FanIn { fan_in: c_in, gain: 1.0 },
        )?;
        let bias = ps.create(&format!("{name}.bias"), &[c_out], group, Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, group: Group, channels: usize, groups: usize) -> Result<Self> {
        assert!(channels % groups == 0, "{channels} channels do not split into {groups} groups");
        Ok(Self {
            groups,
            gamma: ps.create(&format!("{name}.gamma"), &[channels], group, Init::Ones)?,
            beta: ps.create(&format!("{name}.beta"), &[channels], group, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(super::ops::group_norm(x, &self.gamma, &self.beta, self.groups, self.eps, false)?)
    }

    /// `silu(norm(x))` in one op.
    pub fn forward_silu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(super::ops::group_norm(x, &self.gamma, &self.beta, self.groups, self.eps, true)?)
    }
}

/// Largest divisor of `channels` not exceeding `max`.
pub fn norm_groups(channels: usize, max: usize) -> usize {
    (1..=max.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

//! Noise-prediction UNet applied per target frame.
//!
//! Input is the noisy frame concatenated with the clean first frame. The
//! timestep and the target frame index are embedded together. Conditioning
//! features enter through zero-initialized 1x1 adapters added to the encoder
//! activations at strides 2, 4, ...

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{norm_groups, Conv2d, ConvSpec, GroupNorm, Linear};
use super::params::{Group, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    None,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channels at strides 1, 2, 4, ...
    pub channels: Vec<usize>,
    /// Width of each sinusoidal embedding (timestep and frame index).
    pub embed_dim: usize,
    pub conditioning: ConditioningMode,
    /// Init gain of the output convolution.
    pub out_gain: f64,
    pub max_norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32, 32],
            embed_dim: 32,
            conditioning: ConditioningMode::Adapter,
            out_gain: 0.1,
            max_norm_groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn check(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config("backbone needs at least two positive channel levels".into()));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Config("embed_dim must be even".into()));
        }
        Ok(())
    }

    /// Scale indices that accept conditioning.
    pub fn adapter_scales(&self) -> Vec<usize> {
        match self.conditioning {
            ConditioningMode::None => Vec::new(),
            ConditioningMode::Adapter => (1..self.channels.len()).collect(),
        }
    }
}

/// `[sin(v f_k), cos(v f_k)]` with `f_k = 10000^(-k / (dim/2))`.
pub fn sinusoidal(values: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| v * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, emb: usize, max_groups: usize) -> Result<Self> {
        let g = Group::Core;
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), g, c_in, norm_groups(c_in, max_groups))?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), g, ConvSpec::new(c_in, c_out, 3))?,
            temb: Linear::new(ps, &format!("{name}.temb"), g, emb, c_out)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), g, c_out, norm_groups(c_out, max_groups))?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), g, ConvSpec::new(c_out, c_out, 3))?,
            skip: if c_in != c_out {
                Some(Conv2d::new(ps, &format!("{name}.skip"), g, ConvSpec::new(c_in, c_out, 1))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward_silu(x)?)?;
        let e = self.temb.forward(emb)?;
        let h = h.broadcast_add(&e.reshape((e.dim(0)?, e.dim(1)?, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward_silu(&h)?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: BackboneConfig,
    emb1: Linear,
    emb2: Linear,
    conv_in: Conv2d,
    enc0: ResBlock,
    downs: Vec<(Conv2d, ResBlock)>,
    adapters: Vec<Conv2d>,
    mid: ResBlock,
    ups: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    /// `cond_channels[i]` is the conditioning width at scale `i + 1`.
    pub fn new(ps: &mut ParamStore, config: &BackboneConfig, cond_channels: &[usize]) -> Result<Self> {
        config.check()?;
        let ch = &config.channels;
        let levels = ch.len();
        let g = config.max_norm_groups;
        let emb = 4 * ch[0];
        let scales = config.adapter_scales();
        if !scales.is_empty() && cond_channels.len() != scales.len() {
            return Err(Error::ScaleMismatch {
                expected: scales,
                got: (1..=cond_channels.len()).collect(),
            });
        }
        let emb1 = Linear::new(ps, "unet.emb1", Group::Core, 2 * config.embed_dim, emb)?;
        let emb2 = Linear::new(ps, "unet.emb2", Group::Core, emb, emb)?;
        let conv_in = Conv2d::new(ps, "unet.conv_in", Group::Core, ConvSpec::new(6, ch[0], 3))?;
        let enc0 = ResBlock::new(ps, "unet.enc0", ch[0], ch[0], emb, g)?;
        let mut downs = Vec::with_capacity(levels - 1);
        let mut adapters = Vec::new();
        for l in 1..levels {
            let down = Conv2d::new(
                ps,
                &format!("unet.down{l}"),
                Group::Core,
                ConvSpec::new(ch[l - 1], ch[l], 3).stride(2),
            )?;
            let block = ResBlock::new(ps, &format!("unet.enc{l}"), ch[l], ch[l], emb, g)?;
            downs.push((down, block));
            if !scales.is_empty() {
                adapters.push(Conv2d::new(
                    ps,
                    &format!("unet.adapter{l}"),
                    Group::Adapter,
                    ConvSpec::new(cond_channels[l - 1], ch[l], 1).gain(0.0),
                )?);
            }
        }
        let mid = ResBlock::new(ps, "unet.mid", ch[levels - 1], ch[levels - 1], emb, g)?;
        let mut ups = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            ups.push(ResBlock::new(ps, &format!("unet.up{l}"), ch[l + 1] + ch[l], ch[l], emb, g)?);
        }
        let norm_out = GroupNorm::new(ps, "unet.norm_out", Group::Core, ch[0], norm_groups(ch[0], g))?;
        let conv_out = Conv2d::new(
            ps,
            "unet.conv_out",
            Group::Core,
            ConvSpec::new(ch[0], 3, 3).gain(config.out_gain),
        )?;
        Ok(Self {
            config: config.clone(),
            emb1,
            emb2,
            conv_in,
            enc0,
            downs,
            adapters,
            mid,
            ups,
            norm_out,
            conv_out,
        })
    }

    fn embedding(&self, timesteps: &[usize], frame_index: &[usize], like: &Tensor) -> Result<Tensor> {
        let d = self.config.embed_dim;
        let n = timesteps.len();
        let ts: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let fs: Vec<f64> = frame_index.iter().map(|&f| f as f64).collect();
        let a = Tensor::from_vec(sinusoidal(&ts, d), (n, d), &Device::Cpu)?;
        let b = Tensor::from_vec(sinusoidal(&fs, d), (n, d), &Device::Cpu)?;
        let e = Tensor::cat(&[a, b], 1)?.to_dtype(like.dtype())?;
        Ok(self.emb2.forward(&self.emb1.forward(&e)?.silu()?)?)
    }

    /// Checks a conditioning stack (levels `(N, C_r, h_r, w_r)`) against the adapters.
    pub fn check_conditioning(&self, cond: &[Tensor], height: usize, width: usize) -> Result<()> {
        let scales = self.config.adapter_scales();
        if cond.len() != scales.len() {
            return Err(Error::ScaleMismatch {
                expected: scales,
                got: (1..=cond.len()).collect(),
            });
        }
        for (i, c) in cond.iter().enumerate() {
            let (_, ch, h, w) = c.dims4()?;
            let (eh, ew) = trajvid_core::tensor::level_size(height, width, i + 1);
            let want = self.adapters[i].weight.dim(1)?;
            if (h, w) != (eh, ew) || ch != want {
                return Err(Error::ModelShapeMismatch(format!(
                    "conditioning scale {} is {ch}x{h}x{w}, adapter expects {want}x{eh}x{ew}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// `x_t`, `frame0`: `(N, 3, H, W)`; one timestep and target frame index per row.
    pub fn forward(
        &self,
        x_t: &Tensor,
        frame0: &Tensor,
        timesteps: &[usize],
        frame_index: &[usize],
        cond: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        let (n, _, h, w) = x_t.dims4()?;
        if timesteps.len() != n || frame_index.len() != n {
            return Err(Error::ModelShapeMismatch(format!(
                "{n} rows but {} timesteps and {} frame indices",
                timesteps.len(),
                frame_index.len()
            )));
        }
        if let Some(c) = cond {
            self.check_conditioning(c, h, w)?;
        }
        let emb = self.embedding(timesteps, frame_index, x_t)?;
        let x = Tensor::cat(&[x_t, frame0], 1)?;
        let mut hcur = self.enc0.forward(&self.conv_in.forward(&x)?, &emb)?;
        let mut skips = vec![hcur.clone()];
        for (l, (down, block)) in self.downs.iter().enumerate() {
            hcur = block.forward(&down.forward(&hcur)?, &emb)?;
            if let Some(c) = cond {
                hcur = (hcur + self.adapters[l].forward(&c[l])?)?;
            }
            skips.push(hcur.clone());
        }
        hcur = self.mid.forward(&hcur, &emb)?;
        for (i, block) in self.ups.iter().enumerate() {
            let skip = &skips[skips.len() - 2 - i];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = super::ops::upsample_nearest(&hcur, 2)?.narrow(2, 0, sh)?.narrow(3, 0, sw)?;
            hcur = block.forward(&Tensor::cat(&[&up, skip], 1)?, &emb)?;
        }
        Ok(self.conv_out.forward(&self.norm_out.forward_silu(&hcur)?)?)
    }
}

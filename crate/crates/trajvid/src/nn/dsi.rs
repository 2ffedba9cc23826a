//! Dual semantic injector: segmentation features are fused into the RGB frame
//! and into the depth map by two separate processors, and each result is
//! encoded into its own feature pyramid.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use trajvid_core::tensor::level_size;
use trajvid_core::{FeatureMap, FeaturePyramid, PyramidBranch};

use super::layers::{Conv2d, ConvSpec};
use super::params::{Group, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectorConfig {
    pub base_channels: usize,
    pub channel_schedule: Vec<usize>,
    pub num_scales: usize,
    /// Width of the 1x1 segmentation projection.
    pub seg_proj_channels: usize,
    /// Segmentation channels after padding or truncation.
    pub seg_channels: usize,
    pub use_segment_feature: bool,
    pub use_depth_branch: bool,
}

impl Default for InjectorConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_schedule: vec![16, 32, 32],
            num_scales: 3,
            seg_proj_channels: 8,
            seg_channels: 8,
            use_segment_feature: true,
            use_depth_branch: true,
        }
    }
}

impl InjectorConfig {
    pub fn check(&self) -> Result<()> {
        if !(2..=5).contains(&self.num_scales) {
            return Err(Error::Config(format!("num_scales {} must lie in 2..=5", self.num_scales)));
        }
        if self.channel_schedule.len() != self.num_scales {
            return Err(Error::Config(format!(
                "channel_schedule has {} entries for {} scales",
                self.channel_schedule.len(),
                self.num_scales
            )));
        }
        if self.base_channels == 0
            || self.seg_proj_channels == 0
            || self.seg_channels == 0
            || self.channel_schedule.contains(&0)
        {
            return Err(Error::Config("injector channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Pyramid scale indices, starting at stride 2.
    pub fn scales(&self) -> Vec<usize> {
        (1..=self.num_scales).collect()
    }
}

/// One downsampling stage: `a = conv_s2(x)`, `out = a + conv(silu(a))`.
#[derive(Debug, Clone)]
struct EncoderBlock {
    down: Conv2d,
    res: Conv2d,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.down.forward(x)?;
        Ok((&a + self.res.forward(&a.silu()?)?)?)
    }
}

/// Processor plus encoder for one input stream.
#[derive(Debug, Clone)]
pub struct Branch {
    seg_proj: Option<Conv2d>,
    mix: Conv2d,
    blocks: Vec<EncoderBlock>,
}

impl Branch {
    fn new(ps: &mut ParamStore, prefix: &str, cfg: &InjectorConfig) -> Result<Self> {
        let seg_proj = if cfg.use_segment_feature {
            Some(Conv2d::new(
                ps,
                &format!("{prefix}.seg_proj"),
                Group::Dsi,
                ConvSpec::new(cfg.seg_channels, cfg.seg_proj_channels, 1),
            )?)
        } else {
            None
        };
        let mix_in = 3 + if cfg.use_segment_feature { cfg.seg_proj_channels } else { 0 };
        let mix = Conv2d::new(
            ps,
            &format!("{prefix}.mix"),
            Group::Dsi,
            ConvSpec::new(mix_in, cfg.base_channels, 3),
        )?;
        let mut blocks = Vec::with_capacity(cfg.num_scales);
        let mut c_in = cfg.base_channels;
        for (r, &c) in cfg.channel_schedule.iter().enumerate() {
            let name = format!("{prefix}.enc{}", r + 1);
            blocks.push(EncoderBlock {
                down: Conv2d::new(ps, &format!("{name}.down"), Group::Dsi, ConvSpec::new(c_in, c, 3).stride(2))?,
                res: Conv2d::new(ps, &format!("{name}.res"), Group::Dsi, ConvSpec::new(c, c, 3))?,
            });
            c_in = c;
        }
        Ok(Self { seg_proj, mix, blocks })
    }

    /// `phi(frame, seg)`: project seg, concatenate with the frame, 3x3 conv, SiLU.
    pub fn inject(&self, frame: &Tensor, seg: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = frame.dims4()?;
        let x = match &self.seg_proj {
            Some(proj) => {
                let (_, _, sh, sw) = seg.dims4()?;
                if (sh, sw) != (h, w) {
                    return Err(Error::Misaligned(format!("segmentation is {sh}x{sw}, frame is {h}x{w}")));
                }
                Tensor::cat(&[frame, &proj.forward(seg)?], 1)?
            }
            None => frame.clone(),
        };
        Ok(self.mix.forward(&x)?.silu()?)
    }

    pub fn encode(&self, injected: &Tensor) -> Result<Vec<Tensor>> {
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut x = injected.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
            levels.push(x.clone());
        }
        Ok(levels)
    }
}

/// Pyramids as batched tensors, level `r` shaped `(B, C_r, ceil(H/2^r), ceil(W/2^r))`.
#[derive(Debug, Clone)]
pub struct DualPyramids {
    pub rgb: Vec<Tensor>,
    pub depth: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct Dsi {
    pub config: InjectorConfig,
    pub rgb: Branch,
    pub depth: Option<Branch>,
}

impl Dsi {
    pub fn new(ps: &mut ParamStore, config: &InjectorConfig) -> Result<Self> {
        config.check()?;
        let rgb = Branch::new(ps, "dsi.rgb", config)?;
        let depth = if config.use_depth_branch {
            Some(Branch::new(ps, "dsi.depth", config)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            rgb,
            depth,
        })
    }

    /// `frame (B,3,H,W)`, `depth (B,1,H,W)`, `seg (B,seg_channels,H,W)`.
    pub fn forward(&self, frame: &Tensor, depth: &Tensor, seg: &Tensor) -> Result<DualPyramids> {
        let (b, c, h, w) = frame.dims4()?;
        if c != 3 {
            return Err(Error::ModelShapeMismatch(format!("frame has {c} channels")));
        }
        let (_, sc, _, _) = seg.dims4()?;
        if sc != self.config.seg_channels {
            return Err(Error::ModelShapeMismatch(format!(
                "segmentation has {sc} channels, injector expects {}",
                self.config.seg_channels
            )));
        }
        let rgb = self.rgb.encode(&self.rgb.inject(frame, seg)?)?;
        let depth = match &self.depth {
            Some(branch) => {
                let (db, dc, dh, dw) = depth.dims4()?;
                if (db, dc, dh, dw) != (b, 1, h, w) {
                    return Err(Error::Misaligned(format!("depth is {db}x{dc}x{dh}x{dw}, frame is {b}x1x{h}x{w}")));
                }
                let d3 = Tensor::cat(&[depth, depth, depth], 1)?;
                Some(branch.encode(&branch.inject(&d3, seg)?)?)
            }
            None => None,
        };
        Ok(DualPyramids { rgb, depth })
    }

    pub fn level_sizes(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        self.config.scales().into_iter().map(|r| level_size(height, width, r)).collect()
    }
}

/// Batch item `index` of a tensor pyramid as a validated [`FeaturePyramid`].
pub fn to_feature_pyramid(
    levels: &[Tensor],
    index: usize,
    branch: PyramidBranch,
    input: (usize, usize),
) -> Result<FeaturePyramid> {
    let mut maps = Vec::with_capacity(levels.len());
    let mut schedule = Vec::with_capacity(levels.len());
    for (r, l) in levels.iter().enumerate() {
        let (_, c, h, w) = l.dims4()?;
        let data = l
            .get(index)?
            .flatten_all()?
            .to_dtype(candle_core::DType::F32)?
            .to_vec1::<f32>()?;
        maps.push(FeatureMap::new(c, h, w, r + 1, input.0, input.1, data)?);
        schedule.push(c);
    }
    Ok(FeaturePyramid::new(branch, 1, schedule, maps)?)
}

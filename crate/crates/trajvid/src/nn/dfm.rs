//! Decoupled flow mapper: each pyramid level of each branch is forward-splatted
//! by the flow resized to that level, then the warped pair is fused.
//!
//! Splat taps depend only on the flow, so they are built once on the host and
//! applied to both branches as a sparse gather/scatter that autograd can see.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use trajvid_core::warp::{resize_flow, splat_taps, SPLAT_EPS};
use trajvid_core::FlowField;

use super::dsi::DualPyramids;
use super::layers::{Conv2d, Conv3d, ConvSpec};
use super::params::{Group, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub use_msf: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { use_msf: true }
    }
}

/// Splat taps of one pyramid level for a whole batch.
#[derive(Debug, Clone)]
pub struct LevelPlan {
    pub height: usize,
    pub width: usize,
    src: Tensor,
    dst: Tensor,
    weight: Tensor,
    inv_validity: Tensor,
    /// `(B, T-1, h, w)` accumulated splat weight.
    pub validity: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct WarpPlan {
    pub batch: usize,
    pub flow_frames: usize,
    pub levels: Vec<LevelPlan>,
}

impl WarpPlan {
    /// One flow per batch item, all at input resolution.
    pub fn new(flows: &[FlowField], sizes: &[(usize, usize)], dtype: DType) -> Result<Self> {
        let batch = flows.len();
        let first = flows
            .first()
            .ok_or_else(|| Error::ModelShapeMismatch("empty flow batch".into()))?;
        let frames = first.frames();
        for f in flows {
            if (f.frames(), f.height(), f.width()) != (frames, first.height(), first.width()) {
                return Err(Error::ModelShapeMismatch("flows in a batch differ in shape".into()));
            }
        }
        let dev = Device::Cpu;
        let mut levels = Vec::with_capacity(sizes.len());
        for &(h, w) in sizes {
            let n = h * w;
            let mut src = Vec::new();
            let mut dst = Vec::new();
            let mut wts = Vec::new();
            let mut acc = vec![0.0f64; batch * frames * n];
            for (b, flow) in flows.iter().enumerate() {
                let resized = resize_flow(flow, (h, w))?;
                for t in 0..frames {
                    let out_base = (b * frames + t) * n;
                    for tap in splat_taps(resized.dx(t), resized.dy(t), h, w, None) {
                        src.push((b * n) as u32 + tap.src);
                        dst.push(out_base as u32 + tap.dst);
                        wts.push(tap.weight);
                        acc[out_base + tap.dst as usize] += tap.weight as f64;
                    }
                }
            }
            let inv: Vec<f32> = acc
                .iter()
                .map(|&v| if v >= SPLAT_EPS { (1.0 / v) as f32 } else { 0.0 })
                .collect();
            let taps = wts.len();
            levels.push(LevelPlan {
                height: h,
                width: w,
                src: Tensor::from_vec(src, taps, &dev)?,
                dst: Tensor::from_vec(dst, taps, &dev)?,
                weight: Tensor::from_vec(wts, (taps, 1), &dev)?.to_dtype(dtype)?,
                inv_validity: Tensor::from_vec(inv, (batch * frames * n, 1), &dev)?.to_dtype(dtype)?,
                validity: acc.into_iter().map(|v| v as f32).collect(),
            });
        }
        Ok(Self {
            batch,
            flow_frames: frames,
            levels,
        })
    }
}

/// Forward-splats `(B, C, h, w)` features into `(B, T-1, C, h, w)`.
pub fn warp_level(features: &Tensor, plan: &LevelPlan, flow_frames: usize) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    if (h, w) != (plan.height, plan.width) {
        return Err(Error::ModelShapeMismatch(format!(
            "features are {h}x{w}, warp plan is {}x{}",
            plan.height, plan.width
        )));
    }
    let rows = features.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
    let gathered = rows.index_select(&plan.src, 0)?.broadcast_mul(&plan.weight)?;
    let acc = Tensor::zeros((b * flow_frames * h * w, c), features.dtype(), features.device())?
        .index_add(&plan.dst, &gathered, 0)?;
    let normalized = acc.broadcast_mul(&plan.inv_validity)?;
    Ok(normalized.reshape((b, flow_frames, h, w, c))?.permute((0, 1, 4, 2, 3))?)
}

/// Warped pyramids, level `r` shaped `(B, T-1, C_r, h_r, w_r)`.
#[derive(Debug, Clone)]
pub struct WarpedPyramids {
    pub rgb: Vec<Tensor>,
    pub depth: Option<Vec<Tensor>>,
}

pub fn warp_pyramids(pyr: &DualPyramids, plan: &WarpPlan) -> Result<WarpedPyramids> {
    let warp_all = |levels: &[Tensor]| -> Result<Vec<Tensor>> {
        if levels.len() != plan.levels.len() {
            return Err(Error::ScaleMismatch {
                expected: (1..=plan.levels.len()).collect(),
                got: (1..=levels.len()).collect(),
            });
        }
        levels
            .iter()
            .zip(&plan.levels)
            .map(|(l, p)| warp_level(l, p, plan.flow_frames))
            .collect()
    };
    Ok(WarpedPyramids {
        rgb: warp_all(&pyr.rgb)?,
        depth: pyr.depth.as_deref().map(warp_all).transpose()?,
    })
}

#[derive(Debug, Clone)]
enum Fuse {
    /// concat -> conv3d -> conv3d -> SiLU
    Msf { a: Conv3d, b: Conv3d },
    /// 1x1 projections, averaged when both branches exist
    Average { rgb: Conv2d, depth: Option<Conv2d> },
}

#[derive(Debug, Clone)]
pub struct Dfm {
    pub config: FusionConfig,
    fuse: Vec<Fuse>,
}

impl Dfm {
    pub fn new(ps: &mut ParamStore, channel_schedule: &[usize], use_depth: bool, config: &FusionConfig) -> Result<Self> {
        let mut fuse = Vec::with_capacity(channel_schedule.len());
        for (r, &c) in channel_schedule.iter().enumerate() {
            let name = format!("dfm.s{}", r + 1);
            fuse.push(if config.use_msf {
                let c_in = if use_depth { 2 * c } else { c };
                Fuse::Msf {
                    a: Conv3d::new(ps, &format!("{name}.msf_a"), Group::Dfm, c_in, c, 1.0)?,
                    b: Conv3d::new(ps, &format!("{name}.msf_b"), Group::Dfm, c, c, 1.0)?,
                }
            } else {
                Fuse::Average {
                    rgb: Conv2d::new(ps, &format!("{name}.proj_rgb"), Group::Dfm, ConvSpec::new(c, c, 1))?,
                    depth: if use_depth {
                        Some(Conv2d::new(ps, &format!("{name}.proj_depth"), Group::Dfm, ConvSpec::new(c, c, 1))?)
                    } else {
                        None
                    },
                }
            });
        }
        Ok(Self {
            config: config.clone(),
            fuse,
        })
    }

    /// Fuses warped sequences into the conditioning stack, level `r` shaped
    /// `(B, T-1, C_r, h_r, w_r)`.
    pub fn fuse(&self, warped: &WarpedPyramids) -> Result<Vec<Tensor>> {
        if warped.rgb.len() != self.fuse.len() {
            return Err(Error::ScaleMismatch {
                expected: (1..=self.fuse.len()).collect(),
                got: (1..=warped.rgb.len()).collect(),
            });
        }
        let mut out = Vec::with_capacity(self.fuse.len());
        for (r, f) in self.fuse.iter().enumerate() {
            let rgb = &warped.rgb[r];
            let depth = warped.depth.as_ref().map(|d| &d[r]);
            if let Some(d) = depth {
                if d.dims() != rgb.dims() {
                    return Err(Error::ModelShapeMismatch(format!(
                        "scale {}: rgb {:?} vs depth {:?}",
                        r + 1,
                        rgb.dims(),
                        d.dims()
                    )));
                }
            }
            out.push(match f {
                Fuse::Msf { a, b } => {
                    let x = match depth {
                        Some(d) => Tensor::cat(&[rgb, d], 2)?,
                        None => rgb.clone(),
                    };
                    let want = a.weight.dim(1)?;
                    if x.dim(2)? != want {
                        return Err(Error::ModelShapeMismatch(format!(
                            "scale {}: fusion expects {want} channels, got {}",
                            r + 1,
                            x.dim(2)?
                        )));
                    }
                    b.forward(&a.forward(&x)?)?.silu()?
                }
                Fuse::Average { rgb: pr, depth: pd } => {
                    let (bs, t, c, h, w) = rgb.dims5()?;
                    let flat = |x: &Tensor| x.reshape((bs * t, c, h, w));
                    let yr = pr.forward(&flat(rgb)?)?;
                    let y = match (pd, depth) {
                        (Some(pd), Some(d)) => ((yr + pd.forward(&flat(d)?)?)? * 0.5)?,
                        (None, None) => yr,
                        _ => return Err(Error::ModelShapeMismatch("depth branch presence changed".into())),
                    };
                    y.reshape((bs, t, c, h, w))?
                }
            });
        }
        Ok(out)
    }
}

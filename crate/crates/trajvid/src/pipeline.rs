//! First frame plus click trajectories to a generated clip, shared by the
//! command line and the HTTP service.

use std::path::{Path, PathBuf};
use std::time::Duration;

use trajvid_core::colormap::heatmap_rgb8;
use trajvid_core::image_ops::resize_bilinear;
use trajvid_core::trajectory::{densify_flow, tracks_to_sparse_flow, DensifyParams, SparseFlow};
use trajvid_core::{FlowField, Frame, VideoTensor};

use crate::config::{ProviderConfig, ProviderKind, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::io::trajectory_json::{FieldError, TrajectoryJson};
use crate::io::{self, flo, raster};
use crate::model::{ConditionInputs, Model, SamplerConfig};
use crate::providers::{DepthProvider, External, Heuristic, SegmentationProvider};
use crate::train::{load_model, CheckpointInfo};

pub fn segmentation_provider(cfg: &ProviderConfig) -> Result<Box<dyn SegmentationProvider>> {
    Ok(match cfg.segmentation {
        ProviderKind::Heuristic => Box::new(Heuristic { bins: cfg.heuristic_bins }),
        ProviderKind::External => Box::new(external(cfg.segmentation_endpoint.as_ref(), cfg.timeout_secs, "segmentation")?),
    })
}

pub fn depth_provider(cfg: &ProviderConfig) -> Result<Box<dyn DepthProvider>> {
    Ok(match cfg.depth {
        ProviderKind::Heuristic => Box::new(Heuristic { bins: cfg.heuristic_bins }),
        ProviderKind::External => Box::new(external(cfg.depth_endpoint.as_ref(), cfg.timeout_secs, "depth")?),
    })
}

fn external(endpoint: Option<&crate::providers::Endpoint>, timeout: u64, what: &str) -> Result<External> {
    let endpoint = endpoint.ok_or_else(|| Error::Config(format!("external {what} provider needs an endpoint")))?;
    Ok(External {
        endpoint: endpoint.clone(),
        timeout: Duration::from_secs(timeout),
    })
}

/// Maps a source-pixel coordinate onto a raster of `to` pixels, aligning
/// pixel centers.
fn rescale(v: f32, from: usize, to: usize) -> f32 {
    if from == to {
        return v;
    }
    ((v + 0.5) * to as f32 / from as f32 - 0.5).clamp(0.0, to as f32 - 1.0)
}

/// A generated clip with its conditioning flow.
#[derive(Debug, Clone)]
pub struct Generation {
    pub video: VideoTensor,
    pub flow: FlowField,
    pub sparse: SparseFlow,
}

impl Generation {
    /// Interleaved RGB8 first-vs-last motion heatmap.
    pub fn heatmap(&self) -> Result<Vec<u8>> {
        Ok(heatmap_rgb8(&self.video)?)
    }

    /// Writes `gen_####.png` for every frame, `flow_####.flo` for every
    /// conditioning frame and `heatmap.png`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for t in 0..self.video.frames() {
            let p = dir.join(frame_file_name(t));
            io::write_atomic(&p, &raster::encode_rgb(&self.video.frame(t))?)?;
            written.push(p);
        }
        for t in 0..self.flow.frames() {
            let p = dir.join(flo::file_name(t));
            flo::write(&p, &self.flow, t)?;
            written.push(p);
        }
        let p = dir.join(HEATMAP_FILE);
        io::write_atomic(&p, &raster::encode_rgb8(self.video.width(), self.video.height(), &self.heatmap()?)?)?;
        written.push(p);
        Ok(written)
    }
}

pub const HEATMAP_FILE: &str = "heatmap.png";

pub fn frame_file_name(t: usize) -> String {
    format!("gen_{t:04}.png")
}

/// A loaded checkpoint with its providers and trajectory settings.
pub struct Pipeline {
    pub model: Model,
    pub info: CheckpointInfo,
    pub segmentation: Box<dyn SegmentationProvider>,
    pub depth: Box<dyn DepthProvider>,
    pub trajectory: TrajectoryConfig,
}

impl Pipeline {
    pub fn load(checkpoint: &Path, providers: &ProviderConfig, trajectory: &TrajectoryConfig) -> Result<Self> {
        let (model, info) = load_model(checkpoint)?;
        Ok(Self {
            model,
            info,
            segmentation: segmentation_provider(providers)?,
            depth: depth_provider(providers)?,
            trajectory: trajectory.clone(),
        })
    }

    pub fn frames(&self) -> usize {
        self.model.config.frames
    }

    /// Field-level problems of `traj` against a `width x height` source image.
    pub fn validate(&self, traj: &TrajectoryJson, width: usize, height: usize) -> Vec<FieldError> {
        let mut errors = traj.field_errors(width, height);
        if traj.frames != self.frames() {
            errors.insert(
                0,
                FieldError {
                    field: "frames".into(),
                    message: format!("this checkpoint generates {} frames, got {}", self.frames(), traj.frames),
                },
            );
        }
        errors
    }

    /// Source image resized to model resolution.
    pub fn model_frame(&self, image: &Frame) -> Result<Frame> {
        let (h, w) = (self.model.config.height, self.model.config.width);
        if (image.height(), image.width()) == (h, w) {
            return Ok(image.clone());
        }
        let data = resize_bilinear(image.data(), 3, image.height(), image.width(), h, w);
        Ok(Frame::rgb(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?)
    }

    /// Sparse flow of `traj` (source pixels) at model resolution.
    pub fn sparse_flow(&self, traj: &TrajectoryJson, width: usize, height: usize) -> Result<SparseFlow> {
        let errors = self.validate(traj, width, height);
        if let Some(e) = errors.first() {
            return Err(Error::TrajectorySchema(format!("{}: {}", e.field, e.message)));
        }
        let (h, w) = (self.model.config.height, self.model.config.width);
        let mut scaled = traj.clone();
        for p in scaled.tracks.iter_mut().flatten() {
            p.x = rescale(p.x, width, w);
            p.y = rescale(p.y, height, h);
        }
        let set = scaled
            .to_set(w, h)
            .map_err(|e| Error::TrajectorySchema(format!("{}: {}", e[0].field, e[0].message)))?;
        Ok(tracks_to_sparse_flow(&set))
    }

    /// Dense conditioning flow: the completion network when it was trained
    /// and enabled, the Gaussian scatter otherwise.
    pub fn densify(&self, frame: &Frame, sparse: &SparseFlow) -> Result<FlowField> {
        if self.trajectory.use_completion && self.info.train.completion_trained {
            return self.model.completion.complete(frame, sparse, self.model.dtype());
        }
        let c = &self.model.config;
        let params = self.trajectory.densify.unwrap_or_else(|| DensifyParams::for_resolution(c.height, c.width));
        Ok(densify_flow(sparse, params)?)
    }

    pub fn generate(
        &self,
        image: &Frame,
        traj: &TrajectoryJson,
        seed: u64,
        sampler: &SamplerConfig,
        progress: impl FnMut(usize, usize),
    ) -> Result<Generation> {
        let sparse = self.sparse_flow(traj, image.width(), image.height())?;
        let frame0 = self.model_frame(image)?;
        let flow = self.densify(&frame0, &sparse)?;
        let seg = self
            .segmentation
            .segment(&frame0)?
            .aligned(frame0.height(), frame0.width());
        seg.check()?;
        let depth = self.depth.estimate_depth(&frame0)?.frame;
        let inputs = ConditionInputs {
            seg: seg.with_channels(self.model.config.injector.seg_channels),
            frame0,
            depth,
            flow: flow.clone(),
        };
        let conditioned = self.model.dsi.is_some();
        let video = self
            .model
            .generate_with(&[&inputs], &[seed], sampler, conditioned, progress)?
            .pop()
            .expect("one item in, one video out");
        Ok(Generation { video, flow, sparse })
    }
}

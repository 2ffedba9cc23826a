//! Clip records, the on-disk dataset layout, synthetic generation and
//! ingestion of real frame sequences.
//!
//! A clip directory holds `frame_####.png`, `flow_####.flo` (frame 0 to frame
//! `t + 1`), `depth0.png` (16-bit gray), `seg0.png` (indexed instance ids) and
//! `meta.json` ([`ClipMeta`]).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajvid_core::flow_estimate::FlowEstimator;
use trajvid_core::image_ops::{crop, fit_long_side, pad_zero, resize_bilinear, Padding};
use trajvid_core::scene::{clip_seed, split_indices, RenderedClip, SceneDistribution};
use trajvid_core::{FlowField, Frame, VideoTensor};

use crate::error::{Error, Result};
use crate::io::{self, flo, raster};
use crate::model::ConditionInputs;
use crate::providers::{DepthMap, DepthProvider, Provenance, SegmentationFeatures, SegmentationProvider};

pub const META_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClipSource {
    Synthetic { dataset_seed: u64, index: usize, scene_seed: u64 },
    Ingested { path: String, start_frame: usize },
}

/// How a source frame is brought to the square model raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Fixed `S x round(S * 197 / 256)` resize, then zero bands to `S x S`.
    #[default]
    FixedAspect,
    /// Long side to `S` keeping aspect, then zero bands to `S x S`.
    FitLongSide,
}

/// `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub schema_version: u32,
    pub source: ClipSource,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f32,
    /// Instance count behind `seg0.png` ids `1..=instances`; 0 is background.
    pub instances: usize,
    pub resize_policy: Option<ResizePolicy>,
    /// Interpolation used when resizing, `bilinear_half_pixel` or `none`.
    pub interpolation: String,
    /// Source crop `(x, y, w, h)` before resizing.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub pad: Padding,
    /// Flow estimator id, `ground_truth` for synthetic clips.
    pub estimator: String,
    pub segmentation_provider: Provenance,
    pub depth_provider: Provenance,
    /// Per flow frame, the row-major indices of pixels whose flow is not
    /// supervised (occluded in frame `t + 1`); absent when unknown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_flow: Option<Vec<Vec<u32>>>,
}

fn invalid_indices(valid: &[bool], frames: usize) -> Vec<Vec<u32>> {
    let n = valid.len() / frames.max(1);
    valid
        .chunks(n.max(1))
        .map(|c| c.iter().enumerate().filter(|(_, &v)| !v).map(|(i, _)| i as u32).collect())
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub video: VideoTensor,
    pub flow: FlowField,
    /// Visible-in-both bits, `(T-1) x H x W`, when known.
    pub flow_valid: Option<Vec<bool>>,
    pub depth0: DepthMap,
    pub seg0: SegmentationFeatures,
    /// Instance ids of frame 0, 0 = background.
    pub ids0: Vec<u32>,
    pub meta: ClipMeta,
}

impl ClipRecord {
    pub fn from_rendered(clip: RenderedClip, source: ClipSource) -> Self {
        let (h, w) = (clip.video.height(), clip.video.width());
        let seg0 = SegmentationFeatures::from_one_hot(&clip.ids[0], clip.instances, h, w, Provenance::SyntheticGroundTruth);
        let meta = ClipMeta {
            schema_version: META_SCHEMA_VERSION,
            source,
            width: w,
            height: h,
            frames: clip.video.frames(),
            fps: clip.video.fps(),
            instances: clip.instances,
            resize_policy: None,
            interpolation: "none".into(),
            crop: None,
            pad: Padding::default(),
            estimator: "ground_truth".into(),
            segmentation_provider: Provenance::SyntheticGroundTruth,
            depth_provider: Provenance::SyntheticGroundTruth,
            invalid_flow: Some(invalid_indices(&clip.flow_valid, clip.flow.frames())),
        };
        Self {
            depth0: DepthMap {
                frame: clip.depth[0].clone(),
                provenance: Provenance::SyntheticGroundTruth,
            },
            ids0: clip.ids[0].clone(),
            video: clip.video,
            flow: clip.flow,
            flow_valid: Some(clip.flow_valid),
            seg0,
            meta,
        }
    }

    pub fn synthetic(dist: &SceneDistribution, dataset_seed: u64, index: usize) -> Result<Self> {
        let scene_seed = clip_seed(dataset_seed, index);
        let scene = dist.sample(scene_seed)?;
        let clip = scene.render()?;
        Ok(Self::from_rendered(
            clip,
            ClipSource::Synthetic {
                dataset_seed,
                index,
                scene_seed,
            },
        ))
    }

    pub fn frame0(&self) -> Frame {
        self.video.frame(0)
    }

    /// Conditioning inputs with segmentation padded or truncated to `seg_channels`.
    pub fn condition_inputs(&self, seg_channels: usize) -> ConditionInputs {
        ConditionInputs {
            frame0: self.frame0(),
            depth: self.depth0.frame.clone(),
            seg: self.seg0.with_channels(seg_channels),
            flow: self.flow.clone(),
        }
    }

    /// Writes the clip into `dir`, which must not exist yet. The files are
    /// assembled in a sibling temp directory and renamed into place.
    pub fn write(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::AlreadyExists, "clip exists")));
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(dir, "clip directory needs a name"))?;
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let put = |file: &str, bytes: &[u8]| {
            let p = tmp.join(file);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        for t in 0..self.video.frames() {
            put(&frame_name(t), &raster::encode_rgb(&self.video.frame(t))?)?;
        }
        for t in 0..self.flow.frames() {
            put(&flo::file_name(t), &flo::encode_frame(&self.flow, t))?;
        }
        put("depth0.png", &raster::encode_depth16(&self.depth0.frame)?)?;
        let ids: Vec<u8> = self
            .ids0
            .iter()
            .map(|&i| u8::try_from(i).map_err(|_| Error::format(dir, format!("instance id {i} exceeds 255"))))
            .collect::<Result<_>>()?;
        put("seg0.png", &raster::encode_indexed(self.meta.width, self.meta.height, &ids)?)?;
        let meta = serde_json::to_vec_pretty(&self.meta).map_err(|e| Error::format(dir, e.to_string()))?;
        put("meta.json", &meta)?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: ClipMeta = serde_json::from_slice(&io::read(&meta_path)?)
            .map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.schema_version != META_SCHEMA_VERSION {
            return Err(Error::format(&meta_path, format!("schema version {}", meta.schema_version)));
        }
        let (h, w) = (meta.height, meta.width);
        let mut frames = Vec::with_capacity(meta.frames);
        for t in 0..meta.frames {
            let p = dir.join(frame_name(t));
            let f = raster::decode_rgb(&io::read(&p)?)?;
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::format(p, format!("frame is {}x{}, meta says {h}x{w}", f.height(), f.width())));
            }
            frames.push(f);
        }
        let video = VideoTensor::from_frames(&frames, meta.fps)?;
        let flows = (0..meta.frames - 1)
            .map(|t| flo::read(&dir.join(flo::file_name(t))))
            .collect::<Result<Vec<_>>>()?;
        let flow = flo::to_flow_field(&flows)?;
        let depth = raster::decode_depth(&io::read(&dir.join("depth0.png"))?)?;
        let seg_path = dir.join("seg0.png");
        let (sw, sh, ids) = raster::decode_indexed(&io::read(&seg_path)?)?;
        if (sh, sw) != (h, w) || (flow.height(), flow.width()) != (h, w) || (depth.height(), depth.width()) != (h, w) {
            return Err(Error::format(dir, "clip components disagree in size"));
        }
        let ids0: Vec<u32> = ids.into_iter().map(u32::from).collect();
        if ids0.iter().any(|&i| i as usize > meta.instances) {
            return Err(Error::format(seg_path, "instance id above the recorded count"));
        }
        let seg0 = SegmentationFeatures::from_one_hot(&ids0, meta.instances, h, w, meta.segmentation_provider);
        let flow_valid = match &meta.invalid_flow {
            None => None,
            Some(frames) => {
                if frames.len() != flow.frames() {
                    return Err(Error::format(&meta_path, "invalid_flow needs one list per flow frame"));
                }
                let mut valid = vec![true; flow.frames() * h * w];
                for (t, idx) in frames.iter().enumerate() {
                    for &i in idx {
                        let i = i as usize;
                        if i >= h * w {
                            return Err(Error::format(&meta_path, "invalid_flow index out of range"));
                        }
                        valid[t * h * w + i] = false;
                    }
                }
                Some(valid)
            }
        };
        Ok(Self {
            video,
            flow,
            flow_valid,
            depth0: DepthMap {
                frame: depth,
                provenance: meta.depth_provider,
            },
            seg0,
            ids0,
            meta,
        })
    }
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

pub fn clip_dir_name(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Renders `count` synthetic clips in memory.
pub fn synthesize(count: usize, dist: &SceneDistribution, seed: u64) -> Result<Vec<ClipRecord>> {
    (0..count).map(|i| ClipRecord::synthetic(dist, seed, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub count: usize,
    pub train_fraction: f64,
    pub clips: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Handle over a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

pub const INDEX_FILE: &str = "dataset.json";

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let p = root.join(INDEX_FILE);
        let index: DatasetIndex =
            serde_json::from_slice(&io::read(&p)?).map_err(|e| Error::format(&p, e.to_string()))?;
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.clips.is_empty()
    }

    pub fn clip_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.index.clips[i])
    }

    pub fn load(&self, i: usize) -> Result<ClipRecord> {
        ClipRecord::read(&self.clip_path(i))
    }

    pub fn load_all(&self, which: &[usize]) -> Result<Vec<ClipRecord>> {
        which.iter().map(|&i| self.load(i)).collect()
    }
}

/// Renders `count` clips under `root` and writes the index. Deterministic in `seed`.
pub fn make_dataset(root: &Path, count: usize, dist: &SceneDistribution, seed: u64, train_fraction: f64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Usage("dataset count must be at least 1".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut clips = Vec::with_capacity(count);
    for i in 0..count {
        let name = clip_dir_name(i);
        ClipRecord::synthetic(dist, seed, i)?.write(&root.join(&name))?;
        clips.push(name);
    }
    let (train, val) = split_indices(count, train_fraction, seed);
    let index = DatasetIndex {
        seed,
        count,
        train_fraction,
        clips,
        train,
        val,
    };
    let bytes = serde_json::to_vec_pretty(&index).map_err(|e| Error::format(root, e.to_string()))?;
    io::write_atomic(&root.join(INDEX_FILE), &bytes)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSpec {
    pub frames: usize,
    pub start_frame: usize,
    /// Source crop `(x, y, w, h)` applied first.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub policy: ResizePolicy,
    /// Side of the square output raster.
    pub target: usize,
    pub fps: f32,
}

impl Default for IngestSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            start_frame: 0,
            crop: None,
            policy: ResizePolicy::FixedAspect,
            target: 256,
            fps: 8.0,
        }
    }
}

/// Resized size and zero padding for a `height x width` source.
pub fn ingest_geometry(height: usize, width: usize, policy: ResizePolicy, target: usize) -> ((usize, usize), Padding) {
    let (rh, rw) = match policy {
        ResizePolicy::FixedAspect => ((target as f64 * 197.0 / 256.0).round() as usize, target),
        ResizePolicy::FitLongSide => fit_long_side(height, width, target),
    };
    ((rh, rw), Padding::to_square(rh, rw, target))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Builds a clip from a directory of frame images (sorted by file name).
pub fn ingest_clip(
    frames_dir: &Path,
    spec: &IngestSpec,
    estimator: &dyn FlowEstimator,
    seg_provider: &dyn SegmentationProvider,
    depth_provider: &dyn DepthProvider,
) -> Result<ClipRecord> {
    if spec.frames < 2 {
        return Err(Error::Usage(format!("clips need at least 2 frames, got {}", spec.frames)));
    }
    let files = image_files(frames_dir)?;
    let available = files.len().saturating_sub(spec.start_frame);
    if available < spec.frames {
        return Err(Error::TooFewFrames {
            requested: spec.frames,
            available,
        });
    }
    let mut frames = Vec::with_capacity(spec.frames);
    let mut geometry = None;
    for p in &files[spec.start_frame..spec.start_frame + spec.frames] {
        let src = raster::decode_rgb(&io::read(p)?)?;
        let (mut h, mut w) = (src.height(), src.width());
        let mut data = src.into_data();
        if let Some(rect) = spec.crop {
            if rect.0 + rect.2 > w || rect.1 + rect.3 > h || rect.2 == 0 || rect.3 == 0 {
                return Err(Error::format(p, format!("crop {rect:?} exceeds the {w}x{h} frame")));
            }
            data = crop(&data, 3, h, w, rect);
            (w, h) = (rect.2, rect.3);
        }
        let ((rh, rw), pad) = ingest_geometry(h, w, spec.policy, spec.target);
        if let Some(g) = geometry {
            if g != (h, w) {
                return Err(Error::format(p, "frames differ in size"));
            }
        }
        geometry = Some((h, w));
        let resized = resize_bilinear(&data, 3, h, w, rh, rw);
        let (padded, oh, ow) = pad_zero(&resized, 3, rh, rw, pad);
        frames.push(Frame::rgb(oh, ow, padded.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?);
    }
    let (sh, sw) = geometry.expect("at least two frames");
    let ((rh, rw), pad) = ingest_geometry(sh, sw, spec.policy, spec.target);
    let video = VideoTensor::from_frames(&frames, spec.fps)?;
    let flow = estimator.estimate(&video)?;
    let frame0 = video.frame(0);
    let seg0 = seg_provider.segment(&frame0)?.aligned(frame0.height(), frame0.width());
    seg0.check()?;
    let depth0 = depth_provider.estimate_depth(&frame0)?;
    let ids0 = seg0.argmax_labels();
    let instances = ids0.iter().copied().max().unwrap_or(0) as usize;
    let meta = ClipMeta {
        schema_version: META_SCHEMA_VERSION,
        source: ClipSource::Ingested {
            path: frames_dir.display().to_string(),
            start_frame: spec.start_frame,
        },
        width: frame0.width(),
        height: frame0.height(),
        frames: spec.frames,
        fps: spec.fps,
        instances,
        resize_policy: Some(spec.policy),
        interpolation: if (rh, rw) == (sh, sw) { "none" } else { "bilinear_half_pixel" }.into(),
        crop: spec.crop,
        pad,
        estimator: estimator.name().to_string(),
        segmentation_provider: seg0.provenance,
        depth_provider: depth0.provenance,
        invalid_flow: None,
    };
    Ok(ClipRecord {
        video,
        flow,
        flow_valid: None,
        depth0,
        seg0,
        ids0,
        meta,
    })
}

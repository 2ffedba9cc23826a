//! Segmentation and depth sources.
//!
//! Three families: exact ground truth from the synthetic renderer, a
//! luminance heuristic that works on any image, and adapters for external
//! models reached over a subprocess or HTTP.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use trajvid_core::image_ops::{resize_bilinear, resize_nearest};
use trajvid_core::scene::{one_hot, RenderedClip};
use trajvid_core::{ColorSpace, Frame};

use crate::error::{Error, Result};
use crate::io::raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PretrainedExternal,
    SyntheticGroundTruth,
    Heuristic,
}

/// `C x H x W` segmentation features.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationFeatures {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub provenance: Provenance,
    /// Channels are instance indicator masks rather than a dense embedding.
    pub one_hot: bool,
    /// Instance id of each channel, when known.
    pub labels: Vec<u32>,
}

impl SegmentationFeatures {
    pub fn from_one_hot(ids: &[u32], instances: usize, height: usize, width: usize, provenance: Provenance) -> Self {
        let (data, labels) = one_hot(ids, instances);
        Self {
            channels: labels.len(),
            height,
            width,
            data,
            provenance,
            one_hot: true,
            labels,
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.data.len() != self.channels * n {
            return Err(Error::ModelShapeMismatch(format!(
                "segmentation holds {} values for {}x{}x{}",
                self.data.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Core(trajvid_core::CoreError::NonFinite));
        }
        if self.one_hot {
            for i in 0..n {
                let mut sum = 0.0;
                for c in 0..self.channels {
                    let v = self.data[c * n + i];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Misaligned(format!("one-hot channel {c} holds {v}")));
                    }
                    sum += v;
                }
                if sum > 1.0 {
                    return Err(Error::Misaligned(format!("pixel {i} belongs to {sum} instances")));
                }
            }
        }
        Ok(())
    }

    /// Resized to `height x width`: nearest for masks, bilinear for embeddings.
    pub fn aligned(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let data = if self.one_hot {
            resize_nearest(&self.data, self.channels, self.height, self.width, height, width)
        } else {
            resize_bilinear(&self.data, self.channels, self.height, self.width, height, width)
        };
        Self {
            height,
            width,
            data,
            ..self.clone()
        }
    }

    /// Exactly `k` channels: zero channels appended or trailing ones dropped.
    pub fn with_channels(&self, k: usize) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0f32; k * n];
        let keep = k.min(self.channels);
        out[..keep * n].copy_from_slice(&self.data[..keep * n]);
        out
    }

    /// Per-pixel argmax channel label (label index when labels are absent).
    pub fn argmax_labels(&self) -> Vec<u32> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                self.labels.get(best).copied().unwrap_or(best as u32)
            })
            .collect()
    }
}

/// Normalized inverse depth, 1 nearest and 0 farthest.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub frame: Frame,
    pub provenance: Provenance,
}

pub trait SegmentationProvider: Send + Sync {
    fn id(&self) -> String;
    fn segment(&self, frame: &Frame) -> Result<SegmentationFeatures>;
}

pub trait DepthProvider: Send + Sync {
    fn id(&self) -> String;
    fn estimate_depth(&self, frame: &Frame) -> Result<DepthMap>;
}

fn require_rgb(frame: &Frame) -> Result<()> {
    if frame.space() != ColorSpace::Rgb || frame.channels() != 3 {
        return Err(Error::Misaligned("providers take rgb frames".into()));
    }
    Ok(())
}

/// Ground truth for frame 0 of a rendered synthetic clip.
#[derive(Debug, Clone)]
pub struct SyntheticGroundTruth {
    ids: Vec<u32>,
    instances: usize,
    depth: Frame,
}

impl SyntheticGroundTruth {
    pub fn from_clip(clip: &RenderedClip) -> Self {
        Self {
            ids: clip.ids[0].clone(),
            instances: clip.instances,
            depth: clip.depth[0].clone(),
        }
    }

    pub fn new(ids: Vec<u32>, instances: usize, depth: Frame) -> Self {
        Self { ids, instances, depth }
    }

    fn check_size(&self, frame: &Frame) -> Result<()> {
        if (frame.height(), frame.width()) != (self.depth.height(), self.depth.width()) {
            return Err(Error::Misaligned(format!(
                "frame is {}x{}, ground truth is {}x{}",
                frame.height(),
                frame.width(),
                self.depth.height(),
                self.depth.width()
            )));
        }
        Ok(())
    }
}

impl SegmentationProvider for SyntheticGroundTruth {
    fn id(&self) -> String {
        "synthetic".into()
    }

    fn segment(&self, frame: &Frame) -> Result<SegmentationFeatures> {
        require_rgb(frame)?;
        self.check_size(frame)?;
        Ok(SegmentationFeatures::from_one_hot(
            &self.ids,
            self.instances,
            frame.height(),
            frame.width(),
            Provenance::SyntheticGroundTruth,
        ))
    }
}

impl DepthProvider for SyntheticGroundTruth {
    fn id(&self) -> String {
        "synthetic".into()
    }

    fn estimate_depth(&self, frame: &Frame) -> Result<DepthMap> {
        require_rgb(frame)?;
        self.check_size(frame)?;
        Ok(DepthMap {
            frame: self.depth.clone(),
            provenance: Provenance::SyntheticGroundTruth,
        })
    }
}

/// Luminance-based stand-in usable on any image.
///
/// Segmentation bins luminance into `bins` equal-width ranges, one channel per
/// bin. Depth is luminance itself (brighter reads as nearer).
#[derive(Debug, Clone, Copy)]
pub struct Heuristic {
    pub bins: usize,
}

impl Default for Heuristic {
    fn default() -> Self {
        Self { bins: 4 }
    }
}

fn luminance(frame: &Frame) -> Vec<f32> {
    let n = frame.height() * frame.width();
    let d = frame.data();
    (0..n)
        .map(|i| (0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).clamp(0.0, 1.0))
        .collect()
}

impl SegmentationProvider for Heuristic {
    fn id(&self) -> String {
        format!("heuristic-luma{}", self.bins)
    }

    fn segment(&self, frame: &Frame) -> Result<SegmentationFeatures> {
        require_rgb(frame)?;
        let bins = self.bins.max(1);
        let ids: Vec<u32> = luminance(frame)
            .into_iter()
            .map(|l| ((l * bins as f32) as usize).min(bins - 1) as u32 + 1)
            .collect();
        Ok(SegmentationFeatures::from_one_hot(
            &ids,
            bins,
            frame.height(),
            frame.width(),
            Provenance::Heuristic,
        ))
    }
}

impl DepthProvider for Heuristic {
    fn id(&self) -> String {
        format!("heuristic-luma{}", self.bins)
    }

    fn estimate_depth(&self, frame: &Frame) -> Result<DepthMap> {
        require_rgb(frame)?;
        Ok(DepthMap {
            frame: Frame::depth(frame.height(), frame.width(), luminance(frame))?,
            provenance: Provenance::Heuristic,
        })
    }
}

/// Where an external model lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Endpoint {
    /// `program args... <segment|depth>`; PNG on stdin, response on stdout.
    Command { program: String, args: Vec<String> },
    /// `POST {url}/segment` or `{url}/depth` with an `image/png` body.
    Http { url: String },
}

/// Response payload of an external provider.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalPayload {
    Tensor {
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    },
    Depth(Frame),
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Float tensor body: three little-endian `u32` (C, H, W) then `C*H*W` `f32`.
pub fn encode_tensor(channels: usize, height: usize, width: usize, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * data.len());
    for d in [channels, height, width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_payload(bytes: &[u8]) -> Result<ExternalPayload> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        return Ok(ExternalPayload::Depth(raster::decode_depth(bytes)?));
    }
    if bytes.len() < 12 {
        return Err(Error::ProviderUnavailable(format!("response of {} bytes has no tensor header", bytes.len())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::ProviderUnavailable("tensor header overflows".into()))?;
    if bytes.len() != 12 + 4 * count {
        return Err(Error::ProviderUnavailable(format!(
            "tensor header {c}x{h}x{w} needs {} bytes, got {}",
            12 + 4 * count,
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(ExternalPayload::Tensor {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

/// Adapter for an external segmentation or depth model.
#[derive(Debug, Clone)]
pub struct External {
    pub endpoint: Endpoint,
    pub timeout: Duration,
}

impl External {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            timeout: Duration::from_secs(60),
        }
    }

    fn request(&self, task: &str, frame: &Frame) -> Result<Vec<u8>> {
        let body = raster::encode_rgb(frame)?;
        match &self.endpoint {
            Endpoint::Command { program, args } => {
                let unavailable = |e: std::io::Error| Error::ProviderUnavailable(format!("{program}: {e}"));
                let mut child = Command::new(program)
                    .args(args)
                    .arg(task)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped())
                    .spawn()
                    .map_err(unavailable)?;
                let mut stdin = child.stdin.take().expect("stdin is piped");
                let writer = std::thread::spawn(move || stdin.write_all(&body));
                let mut out = Vec::new();
                child
                    .stdout
                    .take()
                    .expect("stdout is piped")
                    .read_to_end(&mut out)
                    .map_err(unavailable)?;
                let status = child.wait().map_err(unavailable)?;
                // a child that exits early closes the pipe; its status is the real error
                let _ = writer.join();
                if !status.success() {
                    let mut err = String::new();
                    if let Some(mut s) = child.stderr.take() {
                        let _ = s.read_to_string(&mut err);
                    }
                    return Err(Error::ProviderUnavailable(format!("{program} exited with {status}: {}", err.trim())));
                }
                Ok(out)
            }
            Endpoint::Http { url } => {
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(self.timeout))
                    .build()
                    .into();
                let target = format!("{}/{task}", url.trim_end_matches('/'));
                let mut resp = agent
                    .post(&target)
                    .header("Content-Type", "image/png")
                    .send(&body[..])
                    .map_err(|e| Error::ProviderUnavailable(format!("{target}: {e}")))?;
                resp.body_mut()
                    .with_config()
                    .limit(1 << 30)
                    .read_to_vec()
                    .map_err(|e| Error::ProviderUnavailable(format!("{target}: {e}")))
            }
        }
    }
}

impl SegmentationProvider for External {
    fn id(&self) -> String {
        match &self.endpoint {
            Endpoint::Command { program, .. } => format!("external-cmd:{program}"),
            Endpoint::Http { url } => format!("external-http:{url}"),
        }
    }

    fn segment(&self, frame: &Frame) -> Result<SegmentationFeatures> {
        require_rgb(frame)?;
        match decode_payload(&self.request("segment", frame)?)? {
            ExternalPayload::Tensor {
                channels,
                height,
                width,
                data,
            } => {
                let seg = SegmentationFeatures {
                    channels,
                    height,
                    width,
                    data,
                    provenance: Provenance::PretrainedExternal,
                    one_hot: false,
                    labels: Vec::new(),
                };
                seg.check()?;
                Ok(seg.aligned(frame.height(), frame.width()))
            }
            ExternalPayload::Depth(_) => Err(Error::ProviderUnavailable(
                "segmentation endpoint returned an image, expected a tensor".into(),
            )),
        }
    }
}

/// Min-max normalization; monotone, so depth ordering is preserved.
fn normalize_unit(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if lo >= 0.0 && hi <= 1.0 {
        return values.to_vec();
    }
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

impl DepthProvider for External {
    fn id(&self) -> String {
        SegmentationProvider::id(self)
    }

    fn estimate_depth(&self, frame: &Frame) -> Result<DepthMap> {
        require_rgb(frame)?;
        let (h, w) = (frame.height(), frame.width());
        let depth = match decode_payload(&self.request("depth", frame)?)? {
            ExternalPayload::Depth(d) => d,
            ExternalPayload::Tensor {
                channels,
                height,
                width,
                data,
            } => {
                if channels != 1 {
                    return Err(Error::ProviderUnavailable(format!("depth tensor has {channels} channels")));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::ProviderUnavailable("depth tensor holds non-finite values".into()));
                }
                Frame::depth(height, width, normalize_unit(&data))?
            }
        };
        let frame = if (depth.height(), depth.width()) == (h, w) {
            depth
        } else {
            let data = resize_bilinear(depth.data(), 1, depth.height(), depth.width(), h, w);
            Frame::depth(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?
        };
        Ok(DepthMap {
            frame,
            provenance: Provenance::PretrainedExternal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_payload_round_trip() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.5).collect();
        match decode_payload(&encode_tensor(2, 3, 4, &data)).unwrap() {
            ExternalPayload::Tensor {
                channels,
                height,
                width,
                data: d,
            } => {
                assert_eq!((channels, height, width), (2, 3, 4));
                assert_eq!(d, data);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(decode_payload(&encode_tensor(2, 3, 4, &data)[..20]).is_err());
    }

    #[test]
    fn normalization_keeps_order() {
        let v = [3.0, -1.0, 7.0, 2.0];
        let n = normalize_unit(&v);
        assert_eq!(n, vec![0.5, 0.0, 1.0, 0.375]);
    }

    #[test]
    fn missing_program_is_unavailable() {
        let p = External::new(Endpoint::Command {
            program: "/nonexistent/provider".into(),
            args: vec![],
        });
        let f = Frame::filled(ColorSpace::Rgb, 3, 8, 8, 0.5).unwrap();
        assert!(matches!(p.segment(&f), Err(Error::ProviderUnavailable(_))));
        assert!(matches!(p.estimate_depth(&f), Err(Error::ProviderUnavailable(_))));
    }

    #[test]
    fn heuristic_bins_cover_each_pixel_once() {
        let data: Vec<f32> = (0..3 * 64).map(|i| (i % 64) as f32 / 63.0).collect();
        let f = Frame::rgb(8, 8, data).unwrap();
        let seg = Heuristic::default().segment(&f).unwrap();
        seg.check().unwrap();
        assert_eq!(seg.channels, 4);
    }
}

//! Value types shared by every stage of the pipeline.
//!
//! Each type is constructed through a checked constructor that runs the same
//! rules as [`Validate::validate`]; an accepted object therefore always
//! reports clean. Data is stored row-major, channel-first, as `f32`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math::ceil_div;

/// Tolerance applied to `[0, 1]` range checks.
pub const RANGE_EPS: f32 = 1e-6;
/// Smallest accepted frame side.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NonFinite,
    ValueRange,
    MinimumSize,
    ChannelCount,
    DataLength,
    FrameCount,
    DisplacementExtent,
    PyramidSize,
    ScaleOrder,
    ChannelSchedule,
    FrameRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

/// List of violated invariants; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }

    fn into_result<T>(self, value: T) -> Result<T> {
        if self.is_empty() {
            Ok(value)
        } else {
            Err(CoreError::Invalid(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{:?}: {}", v.kind, v.message)?;
        }
        Ok(())
    }
}

/// Reports violated invariants without mutating the object.
pub trait Validate {
    fn validate(&self) -> ValidationReport;
}

fn check_finite(report: &mut ValidationReport, what: &str, data: &[f32]) {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        report.push(
            ViolationKind::NonFinite,
            format!("{what} holds a non-finite value at index {i}"),
        );
    }
}

fn check_unit_range(report: &mut ValidationReport, what: &str, data: &[f32]) {
    let lo = -RANGE_EPS;
    let hi = 1.0 + RANGE_EPS;
    if let Some(i) = data
        .iter()
        .position(|v| v.is_finite() && (*v < lo || *v > hi))
    {
        report.push(
            ViolationKind::ValueRange,
            format!("{what} value {} at index {i} outside [0, 1]", data[i]),
        );
    }
}

fn check_len(report: &mut ValidationReport, what: &str, got: usize, expected: usize) {
    if got != expected {
        report.push(
            ViolationKind::DataLength,
            format!("{what} has {got} values, shape requires {expected}"),
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Rgb,
    Depth,
    Latent,
}

/// A single image, `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    space: ColorSpace,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(
        space: ColorSpace,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let frame = Self {
            space,
            channels,
            height,
            width,
            data,
        };
        frame.validate().into_result(frame)
    }

    pub fn rgb(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(ColorSpace::Rgb, 3, height, width, data)
    }

    pub fn depth(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(ColorSpace::Depth, 1, height, width, data)
    }

    pub fn filled(space: ColorSpace, channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(space, channels, height, width, vec![value; channels * height * width])
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Returns a copy with every pixel passed through `f`, re-validated.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.space,
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

impl Validate for Frame {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        let expected_channels = match self.space {
            ColorSpace::Rgb => Some(3),
            ColorSpace::Depth => Some(1),
            ColorSpace::Latent => None,
        };
        if let Some(c) = expected_channels {
            if self.channels != c {
                r.push(
                    ViolationKind::ChannelCount,
                    format!("{:?} frame needs {c} channels, has {}", self.space, self.channels),
                );
            }
        } else if self.channels == 0 {
            r.push(ViolationKind::ChannelCount, "latent frame has no channels".into());
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            r.push(
                ViolationKind::MinimumSize,
                format!("frame {}x{} below minimum side {MIN_SIDE}", self.height, self.width),
            );
        }
        check_len(&mut r, "frame", self.data.len(), self.channels * self.height * self.width);
        check_finite(&mut r, "frame", &self.data);
        if self.space != ColorSpace::Latent {
            check_unit_range(&mut r, "frame", &self.data);
        }
        r
    }
}

/// Per-frame dense displacement, `(T-1) x 2 x H x W`, in pixels.
///
/// Channel 0 is horizontal (dx), channel 1 vertical (dy). When `anchored`,
/// flow frame `t` maps frame 0 to frame `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    frames: usize,
    height: usize,
    width: usize,
    anchored: bool,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(frames: usize, height: usize, width: usize, anchored: bool, data: Vec<f32>) -> Result<Self> {
        let flow = Self {
            frames,
            height,
            width,
            anchored,
            data,
        };
        flow.validate().into_result(flow)
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            anchored: true,
            data: vec![0.0; frames * 2 * height * width],
        }
    }

    /// Builds a field frame by frame from `(dx, dy)` planes.
    pub fn from_planes(height: usize, width: usize, planes: &[(Vec<f32>, Vec<f32>)]) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * 2 * height * width);
        for (dx, dy) in planes {
            data.extend_from_slice(dx);
            data.extend_from_slice(dy);
        }
        Self::new(planes.len(), height, width, true, data)
    }

    /// Number of flow frames, `T - 1`.
    pub fn frames(&self) -> usize {
        self.frames
    }
    /// Number of video frames `T` this field conditions.
    pub fn video_frames(&self) -> usize {
        self.frames + 1
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn anchored(&self) -> bool {
        self.anchored
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dx(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[(2 * t) * n..(2 * t + 1) * n]
    }

    pub fn dy(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[(2 * t + 1) * n..(2 * t + 2) * n]
    }

    /// Interleaved `(dx, dy)` pair at pixel `(x, y)` of flow frame `t`.
    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize) -> (f32, f32) {
        let n = self.height * self.width;
        let i = y * self.width + x;
        (self.data[2 * t * n + i], self.data[(2 * t + 1) * n + i])
    }

    /// Copy of a single flow frame as `2 x H x W`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[2 * t * n..2 * (t + 1) * n]
    }

    pub fn max_magnitude(&self) -> f32 {
        let n = self.height * self.width;
        let mut best = 0.0f32;
        for t in 0..self.frames {
            let base = 2 * t * n;
            for i in 0..n {
                let dx = self.data[base + i];
                let dy = self.data[base + n + i];
                best = best.max(crate::math::sqrtf(dx * dx + dy * dy));
            }
        }
        best
    }
}

impl Validate for FlowField {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.frames < 1 {
            r.push(ViolationKind::FrameCount, "flow needs T >= 2 (at least one flow frame)".into());
        }
        if self.height == 0 || self.width == 0 {
            r.push(ViolationKind::MinimumSize, "flow has an empty spatial extent".into());
        }
        let n = self.height * self.width;
        check_len(&mut r, "flow", self.data.len(), self.frames * 2 * n);
        check_finite(&mut r, "flow", &self.data);
        if self.data.len() == self.frames * 2 * n {
            'outer: for t in 0..self.frames {
                for c in 0..2 {
                    let limit = if c == 0 { self.width } else { self.height } as f32;
                    let plane = &self.data[(2 * t + c) * n..(2 * t + c + 1) * n];
                    if let Some(v) = plane.iter().find(|v| v.is_finite() && v.abs() > limit) {
                        r.push(
                            ViolationKind::DisplacementExtent,
                            format!("flow frame {t} displacement {v} exceeds extent {limit}"),
                        );
                        break 'outer;
                    }
                }
            }
        }
        r
    }
}

/// One level of a feature pyramid, `C_r x H_r x W_r`, at stride `2^r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    scale_index: usize,
    input_height: usize,
    input_width: usize,
    data: Vec<f32>,
}

/// Spatial size of pyramid level `scale` for an input of `height x width`.
pub fn level_size(height: usize, width: usize, scale: usize) -> (usize, usize) {
    let stride = 1usize << scale;
    (ceil_div(height, stride), ceil_div(width, stride))
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        scale_index: usize,
        input_height: usize,
        input_width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let map = Self {
            channels,
            height,
            width,
            scale_index,
            input_height,
            input_width,
            data,
        };
        map.validate().into_result(map)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn scale_index(&self) -> usize {
        self.scale_index
    }
    pub fn stride(&self) -> usize {
        1 << self.scale_index
    }
    pub fn input_size(&self) -> (usize, usize) {
        (self.input_height, self.input_width)
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

impl Validate for FeatureMap {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        let (eh, ew) = level_size(self.input_height, self.input_width, self.scale_index);
        if self.height != eh || self.width != ew {
            r.push(
                ViolationKind::PyramidSize,
                format!(
                    "level r={} of {}x{} input must be ceil(H/2^r) x ceil(W/2^r) = {eh}x{ew}, got {}x{}",
                    self.scale_index, self.input_height, self.input_width, self.height, self.width
                ),
            );
        }
        if self.channels == 0 {
            r.push(ViolationKind::ChannelCount, "feature map has no channels".into());
        }
        check_len(&mut r, "feature map", self.data.len(), self.channels * self.height * self.width);
        check_finite(&mut r, "feature map", &self.data);
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidBranch {
    Rgb,
    Depth,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    branch: PyramidBranch,
    base_scale: usize,
    channel_schedule: Vec<usize>,
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(
        branch: PyramidBranch,
        base_scale: usize,
        channel_schedule: Vec<usize>,
        levels: Vec<FeatureMap>,
    ) -> Result<Self> {
        let p = Self {
            branch,
            base_scale,
            channel_schedule,
            levels,
        };
        p.validate().into_result(p)
    }

    pub fn branch(&self) -> PyramidBranch {
        self.branch
    }
    pub fn base_scale(&self) -> usize {
        self.base_scale
    }
    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }
    pub fn scales(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.scale_index).collect()
    }
}

impl Validate for FeaturePyramid {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.levels.len() != self.channel_schedule.len() {
            r.push(
                ViolationKind::ChannelSchedule,
                format!(
                    "{} levels for a {}-entry channel schedule",
                    self.levels.len(),
                    self.channel_schedule.len()
                ),
            );
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.scale_index != self.base_scale + i {
                r.push(
                    ViolationKind::ScaleOrder,
                    format!(
                        "level {i} has scale {} but scales must run consecutively from {}",
                        level.scale_index, self.base_scale
                    ),
                );
            }
            if let Some(&c) = self.channel_schedule.get(i) {
                if c != level.channels {
                    r.push(
                        ViolationKind::ChannelSchedule,
                        format!("level {i} has {} channels, schedule says {c}", level.channels),
                    );
                }
            }
            r.violations.extend(level.validate().violations);
        }
        r
    }
}

/// A clip, `T x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    fps: f32,
    space: ColorSpace,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        fps: f32,
        space: ColorSpace,
        data: Vec<f32>,
    ) -> Result<Self> {
        let v = Self {
            frames,
            channels,
            height,
            width,
            fps,
            space,
            data,
        };
        v.validate().into_result(v)
    }

    /// Stacks RGB frames of identical size into a clip.
    pub fn from_frames(frames: &[Frame], fps: f32) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| CoreError::InvalidArgument("video needs at least one frame".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(frames.len() * c * h * w);
        for f in frames {
            if (f.channels, f.height, f.width) != (c, h, w) || f.space != first.space {
                return Err(CoreError::ShapeMismatch(format!(
                    "frame {}x{}x{} does not match {c}x{h}x{w}",
                    f.channels, f.height, f.width
                )));
            }
            data.extend_from_slice(&f.data);
        }
        Self::new(frames.len(), c, h, w, fps, first.space, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn fps(&self) -> f32 {
        self.fps
    }
    pub fn space(&self) -> ColorSpace {
        self.space
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame_data(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame {
            space: self.space,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.frame_data(t).to_vec(),
        }
    }
}

impl Validate for VideoTensor {
    fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.frames == 0 {
            r.push(ViolationKind::FrameCount, "video has no frames".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            r.push(ViolationKind::FrameRate, format!("fps {} must be positive", self.fps));
        }
        if self.space == ColorSpace::Rgb && self.channels != 3 {
            r.push(
                ViolationKind::ChannelCount,
                format!("rgb video needs 3 channels, has {}", self.channels),
            );
        }
        check_len(
            &mut r,
            "video",
            self.data.len(),
            self.frames * self.channels * self.height * self.width,
        );
        check_finite(&mut r, "video", &self.data);
        if self.space != ColorSpace::Latent {
            check_unit_range(&mut r, "video", &self.data);
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_of<T: core::fmt::Debug>(res: Result<T>) -> ValidationReport {
        match res {
            Err(CoreError::Invalid(r)) => r,
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn mid_range_rgb_frame_is_valid() {
        let f = Frame::filled(ColorSpace::Rgb, 3, 16, 16, 0.5).unwrap();
        assert!(f.validate().is_empty());
    }

    #[test]
    fn nan_flow_names_finite_invariant() {
        let mut data = vec![0.0; 2 * 2 * 8 * 8];
        data[17] = f32::NAN;
        let r = report_of(FlowField::new(2, 8, 8, true, data));
        assert!(r.contains(ViolationKind::NonFinite));
    }

    #[test]
    fn feature_map_height_mismatch_reported() {
        let r = report_of(FeatureMap::new(4, 10, 32, 1, 64, 64, vec![0.0; 4 * 10 * 32]));
        assert!(r.contains(ViolationKind::PyramidSize));
        assert!(r.violations[0].message.contains("32x32"));
    }

    #[test]
    fn feature_map_uses_ceiling_division() {
        assert_eq!(level_size(197, 256, 1), (99, 128));
        assert!(FeatureMap::new(2, 99, 128, 1, 197, 256, vec![0.0; 2 * 99 * 128]).is_ok());
    }

    #[test]
    fn rgb_out_of_range_and_small_frames_rejected() {
        let r = report_of(Frame::filled(ColorSpace::Rgb, 3, 8, 8, 1.5));
        assert!(r.contains(ViolationKind::ValueRange));
        let r = report_of(Frame::filled(ColorSpace::Depth, 1, 4, 8, 0.5));
        assert!(r.contains(ViolationKind::MinimumSize));
        // tolerance band
        assert!(Frame::filled(ColorSpace::Rgb, 3, 8, 8, 1.0 + 5e-7).is_ok());
    }

    #[test]
    fn flow_extent_and_frame_count() {
        let r = report_of(FlowField::new(1, 8, 8, true, {
            let mut d = vec![0.0; 2 * 64];
            d[3] = 9.0;
            d
        }));
        assert!(r.contains(ViolationKind::DisplacementExtent));
        let r = report_of(FlowField::new(0, 8, 8, true, Vec::new()));
        assert!(r.contains(ViolationKind::FrameCount));
    }

    #[test]
    fn pyramid_checks_order_and_schedule() {
        let l1 = FeatureMap::new(2, 16, 16, 1, 32, 32, vec![0.0; 2 * 256]).unwrap();
        let l2 = FeatureMap::new(4, 8, 8, 2, 32, 32, vec![0.0; 4 * 64]).unwrap();
        assert!(FeaturePyramid::new(PyramidBranch::Rgb, 1, vec![2, 4], vec![l1.clone(), l2.clone()]).is_ok());
        let r = report_of(FeaturePyramid::new(PyramidBranch::Rgb, 1, vec![2, 4], vec![l2.clone(), l1.clone()]));
        assert!(r.contains(ViolationKind::ScaleOrder));
        let r = report_of(FeaturePyramid::new(PyramidBranch::Rgb, 1, vec![2, 8], vec![l1, l2]));
        assert!(r.contains(ViolationKind::ChannelSchedule));
    }

    #[test]
    fn value_semantics() {
        let a = Frame::filled(ColorSpace::Depth, 1, 8, 8, 0.25).unwrap();
        let mut b = a.clone();
        assert_eq!(a, b);
        b = b.map(|v| v * 2.0).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.get(0, 3, 3), 0.25);
    }

    #[test]
    fn video_from_frames_round_trips() {
        let f0 = Frame::filled(ColorSpace::Rgb, 3, 8, 8, 0.1).unwrap();
        let f1 = Frame::filled(ColorSpace::Rgb, 3, 8, 8, 0.9).unwrap();
        let v = VideoTensor::from_frames(&[f0.clone(), f1.clone()], 30.0).unwrap();
        assert_eq!(v.frames(), 2);
        assert_eq!(v.frame(1), f1);
        assert!(VideoTensor::new(1, 3, 8, 8, 0.0, ColorSpace::Rgb, vec![0.0; 192]).is_err());
    }
}

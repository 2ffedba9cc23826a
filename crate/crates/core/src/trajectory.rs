//! Click trajectories to sparse and dense first-frame-anchored flow.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math::{exp, roundf, sqrt};
use crate::tensor::FlowField;

/// Densifier weights below this total are treated as no coverage.
pub const WEIGHT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub const fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("num_frames {0} must be at least 2")]
    TooFewFrames(usize),
    #[error("track {track} has no points")]
    EmptyTrack { track: usize },
    #[error("track {track} point {point} ({x}, {y}) lies outside [0, {max_x}] x [0, {max_y}]")]
    OutOfBounds {
        track: usize,
        point: usize,
        x: f32,
        y: f32,
        max_x: f32,
        max_y: f32,
    },
    #[error("track {track} point {point} is not finite")]
    NonFinite { track: usize, point: usize },
    #[error("image size {width}x{height} is empty")]
    EmptyImage { width: usize, height: usize },
}

/// User click paths over an input frame of `width x height` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    width: usize,
    height: usize,
    num_frames: usize,
    tracks: Vec<Vec<Point>>,
}

impl TrajectorySet {
    pub fn new(
        width: usize,
        height: usize,
        num_frames: usize,
        tracks: Vec<Vec<Point>>,
    ) -> core::result::Result<Self, TrajectoryError> {
        let errors = Self::check(width, height, num_frames, &tracks);
        match errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(Self {
                width,
                height,
                num_frames,
                tracks,
            }),
        }
    }

    /// Every violation, in track/point order. Used for field-level reporting.
    pub fn check(width: usize, height: usize, num_frames: usize, tracks: &[Vec<Point>]) -> Vec<TrajectoryError> {
        let mut errors = Vec::new();
        if width == 0 || height == 0 {
            errors.push(TrajectoryError::EmptyImage { width, height });
            return errors;
        }
        if num_frames < 2 {
            errors.push(TrajectoryError::TooFewFrames(num_frames));
        }
        let max_x = (width - 1) as f32;
        let max_y = (height - 1) as f32;
        for (ti, track) in tracks.iter().enumerate() {
            if track.is_empty() {
                errors.push(TrajectoryError::EmptyTrack { track: ti });
            }
            for (pi, p) in track.iter().enumerate() {
                if !(p.x.is_finite() && p.y.is_finite()) {
                    errors.push(TrajectoryError::NonFinite { track: ti, point: pi });
                } else if p.x < 0.0 || p.y < 0.0 || p.x > max_x || p.y > max_y {
                    errors.push(TrajectoryError::OutOfBounds {
                        track: ti,
                        point: pi,
                        x: p.x,
                        y: p.y,
                        max_x,
                        max_y,
                    });
                }
            }
        }
        errors
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }
    pub fn tracks(&self) -> &[Vec<Point>] {
        &self.tracks
    }
}

/// Resamples a polyline to `num_frames` points spaced uniformly by arc length.
///
/// The first sample is the first click and the last sample the last click;
/// a track with zero length repeats its first point.
pub fn resample_track(track: &[Point], num_frames: usize) -> Vec<Point> {
    let Some(&first) = track.first() else {
        return Vec::new();
    };
    if num_frames == 0 {
        return Vec::new();
    }
    let mut cumulative = Vec::with_capacity(track.len());
    let mut total = 0.0f64;
    cumulative.push(0.0);
    for w in track.windows(2) {
        let dx = (w[1].x - w[0].x) as f64;
        let dy = (w[1].y - w[0].y) as f64;
        total += sqrt(dx * dx + dy * dy);
        cumulative.push(total);
    }
    if track.len() == 1 || total == 0.0 || num_frames == 1 {
        return vec![first; num_frames];
    }
    let last = *track.last().unwrap_or(&first);
    let mut out = Vec::with_capacity(num_frames);
    let mut seg = 0usize;
    for i in 0..num_frames {
        if i == 0 {
            out.push(first);
            continue;
        }
        if i == num_frames - 1 {
            out.push(last);
            continue;
        }
        let d = total * i as f64 / (num_frames - 1) as f64;
        while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < d {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let a = track[seg];
        let b = track[seg + 1];
        let t = if len > 0.0 { (d - cumulative[seg]) / len } else { 0.0 };
        out.push(Point::new(
            (a.x as f64 + (b.x - a.x) as f64 * t) as f32,
            (a.y as f64 + (b.y - a.y) as f64 * t) as f32,
        ));
    }
    out
}

/// Sparse control flow and the pixels that carry it, `(T-1) x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFlow {
    flow: FlowField,
    mask: Vec<bool>,
}

impl SparseFlow {
    pub fn new(flow: FlowField, mask: Vec<bool>) -> Result<Self> {
        let n = flow.height() * flow.width();
        if mask.len() != flow.frames() * n {
            return Err(CoreError::ShapeMismatch(format!(
                "mask has {} entries, flow needs {}",
                mask.len(),
                flow.frames() * n
            )));
        }
        for t in 0..flow.frames() {
            let (dx, dy) = (flow.dx(t), flow.dy(t));
            for i in 0..n {
                if !mask[t * n + i] && (dx[i] != 0.0 || dy[i] != 0.0) {
                    return Err(CoreError::InvalidArgument(format!(
                        "sparse flow frame {t} has a value outside the mask at pixel {i}"
                    )));
                }
            }
        }
        Ok(Self { flow, mask })
    }

    pub fn flow(&self) -> &FlowField {
        &self.flow
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn frame_mask(&self, t: usize) -> &[bool] {
        let n = self.flow.height() * self.flow.width();
        &self.mask[t * n..(t + 1) * n]
    }

    /// `(x, y, dx, dy)` for every masked pixel of flow frame `t`.
    pub fn sources(&self, t: usize) -> Vec<(usize, usize, f32, f32)> {
        let w = self.flow.width();
        let (dx, dy) = (self.flow.dx(t), self.flow.dy(t));
        self.frame_mask(t)
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| (i % w, i / w, dx[i], dy[i]))
            .collect()
    }
}

/// Pixel nearest to `p`, clamped into the image.
pub fn nearest_pixel(p: Point, width: usize, height: usize) -> (usize, usize) {
    let x = roundf(p.x).clamp(0.0, (width - 1) as f32) as usize;
    let y = roundf(p.y).clamp(0.0, (height - 1) as f32) as usize;
    (x, y)
}

/// Writes `p_{t+1} - p_0` at the pixel nearest `p_0` for every track and frame.
///
/// Tracks landing on the same pixel are averaged.
pub fn tracks_to_sparse_flow(traj: &TrajectorySet) -> SparseFlow {
    let (w, h) = (traj.width, traj.height);
    let frames = traj.num_frames - 1;
    let n = w * h;
    let mut sum = vec![0.0f64; frames * 2 * n];
    let mut count = vec![0u32; n];
    for track in &traj.tracks {
        let pts = resample_track(track, traj.num_frames);
        let p0 = pts[0];
        let (x, y) = nearest_pixel(p0, w, h);
        let i = y * w + x;
        count[i] += 1;
        for t in 0..frames {
            let p = pts[t + 1];
            sum[2 * t * n + i] += (p.x - p0.x) as f64;
            sum[(2 * t + 1) * n + i] += (p.y - p0.y) as f64;
        }
    }
    let mut data = vec![0.0f32; frames * 2 * n];
    let mut mask = vec![false; frames * n];
    for i in 0..n {
        if count[i] == 0 {
            continue;
        }
        let c = count[i] as f64;
        for t in 0..frames {
            data[2 * t * n + i] = (sum[2 * t * n + i] / c) as f32;
            data[(2 * t + 1) * n + i] = (sum[(2 * t + 1) * n + i] / c) as f32;
            mask[t * n + i] = true;
        }
    }
    // values are bounded by the image extent because every point lies inside it
    let flow = FlowField::new(frames, h, w, true, data).expect("track displacements stay within the image");
    SparseFlow { flow, mask }
}

/// Gaussian scatter parameters, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensifyParams {
    pub sigma: f32,
    pub support_radius: f32,
}

impl DensifyParams {
    /// Reference values at 256 px.
    pub const REFERENCE: Self = Self {
        sigma: 8.0,
        support_radius: 24.0,
    };

    /// Reference values scaled by `max(H, W) / 256`.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        let s = height.max(width) as f32 / 256.0;
        Self {
            sigma: Self::REFERENCE.sigma * s,
            support_radius: Self::REFERENCE.support_radius * s,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CoreError::InvalidArgument(format!("sigma {} must be > 0", self.sigma)));
        }
        if !(self.support_radius >= self.sigma) {
            return Err(CoreError::InvalidArgument(format!(
                "support radius {} must be >= sigma {}",
                self.support_radius, self.sigma
            )));
        }
        Ok(())
    }
}

/// Normalized Gaussian scatter of the sparse values.
///
/// Every pixel within `support_radius` of at least one source receives the
/// weight-normalized average of those sources; all other pixels are zero.
/// The returned weight planes (`(T-1) x H x W`) are the per-pixel weight sums.
pub fn densify_flow_with_weights(sparse: &SparseFlow, params: DensifyParams) -> Result<(FlowField, Vec<f32>)> {
    params.check()?;
    let flow = &sparse.flow;
    let (w, h) = (flow.width(), flow.height());
    let n = w * h;
    let frames = flow.frames();
    let two_sigma2 = 2.0 * (params.sigma as f64) * (params.sigma as f64);
    let r = params.support_radius as f64;
    let r2 = r * r;
    let reach = crate::math::floor(r) as isize;
    let mut data = vec![0.0f32; frames * 2 * n];
    let mut weights = vec![0.0f32; frames * n];
    let mut acc_w = vec![0.0f64; n];
    let mut acc_x = vec![0.0f64; n];
    let mut acc_y = vec![0.0f64; n];
    for t in 0..frames {
        acc_w.fill(0.0);
        acc_x.fill(0.0);
        acc_y.fill(0.0);
        for (sx, sy, vx, vy) in sparse.sources(t) {
            let (sx, sy) = (sx as isize, sy as isize);
            for qy in (sy - reach).max(0)..=(sy + reach).min(h as isize - 1) {
                for qx in (sx - reach).max(0)..=(sx + reach).min(w as isize - 1) {
                    let ddx = (qx - sx) as f64;
                    let ddy = (qy - sy) as f64;
                    let d2 = ddx * ddx + ddy * ddy;
                    if d2 > r2 {
                        continue;
                    }
                    let wt = exp(-d2 / two_sigma2);
                    let i = qy as usize * w + qx as usize;
                    acc_w[i] += wt;
                    acc_x[i] += wt * vx as f64;
                    acc_y[i] += wt * vy as f64;
                }
            }
        }
        for i in 0..n {
            weights[t * n + i] = acc_w[i] as f32;
            if acc_w[i] >= WEIGHT_EPS {
                data[2 * t * n + i] = (acc_x[i] / acc_w[i]) as f32;
                data[(2 * t + 1) * n + i] = (acc_y[i] / acc_w[i]) as f32;
            }
        }
    }
    let dense = FlowField::new(frames, h, w, flow.anchored(), data)?;
    Ok((dense, weights))
}

pub fn densify_flow(sparse: &SparseFlow, params: DensifyParams) -> Result<FlowField> {
    densify_flow_with_weights(sparse, params).map(|(f, _)| f)
}

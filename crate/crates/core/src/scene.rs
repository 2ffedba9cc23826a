//! Synthetic moving-shape scenes with exact ground truth.
//!
//! Shapes translate rigidly; each frame's offset is the rounded product of
//! velocity and frame index, so every rendered frame is an exact integer
//! shift of the shape raster and the emitted flow is exact. Shapes are
//! painted far to near using inverse depth (larger is nearer).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math::{cos, round, sin, sqrt};
use crate::tensor::{ColorSpace, FlowField, Frame, VideoTensor};

/// Smooth color field evaluated in shape-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f32; 3],
    pub amplitude: [f32; 3],
    pub frequency: [f32; 2],
    pub phase: f32,
}

impl Texture {
    pub fn flat(color: [f32; 3]) -> Self {
        Self {
            base: color,
            amplitude: [0.0; 3],
            frequency: [0.0; 2],
            phase: 0.0,
        }
    }

    pub fn color(&self, lx: f64, ly: f64) -> [f32; 3] {
        let s = sin(self.frequency[0] as f64 * lx + self.frequency[1] as f64 * ly + self.phase as f64);
        let s2 = cos(0.5 * self.frequency[1] as f64 * lx - 0.7 * self.frequency[0] as f64 * ly);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let v = self.base[c] as f64 + self.amplitude[c] as f64 * (0.7 * s + 0.3 * s2);
            out[c] = v.clamp(0.0, 1.0) as f32;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    /// Axis-aligned ellipse with radii in pixels.
    Ellipse { rx: f32, ry: f32 },
    /// Segment of half-length `half_len` at `angle` radians, inflated by `radius`.
    Capsule { half_len: f32, radius: f32, angle: f32 },
    /// Star-ish disc `r(theta) = radius (1 + sum a_i sin(f_i theta + p_i))`.
    Blob { radius: f32, lobes: [[f32; 3]; 2] },
}

impl ShapeKind {
    pub fn contains(&self, lx: f64, ly: f64) -> bool {
        match *self {
            ShapeKind::Ellipse { rx, ry } => {
                let (a, b) = (lx / rx as f64, ly / ry as f64);
                a * a + b * b <= 1.0
            }
            ShapeKind::Capsule {
                half_len,
                radius,
                angle,
            } => {
                let (c, s) = (cos(angle as f64), sin(angle as f64));
                let along = (lx * c + ly * s).clamp(-(half_len as f64), half_len as f64);
                let (px, py) = (along * c, along * s);
                let (dx, dy) = (lx - px, ly - py);
                dx * dx + dy * dy <= (radius as f64) * (radius as f64)
            }
            ShapeKind::Blob { radius, lobes } => {
                let theta = libm::atan2(ly, lx);
                let mut r = 1.0;
                for [a, f, p] in lobes {
                    r += a as f64 * sin(f as f64 * theta + p as f64);
                }
                sqrt(lx * lx + ly * ly) <= radius as f64 * r
            }
        }
    }

    /// Half extents `(x, y)` of an axis-aligned bounding box around the origin.
    pub fn half_extent(&self) -> (f64, f64) {
        match *self {
            ShapeKind::Ellipse { rx, ry } => (rx as f64, ry as f64),
            ShapeKind::Capsule {
                half_len,
                radius,
                angle,
            } => {
                let (c, s) = (cos(angle as f64).abs(), sin(angle as f64).abs());
                (half_len as f64 * c + radius as f64, half_len as f64 * s + radius as f64)
            }
            ShapeKind::Blob { radius, lobes } => {
                let m = radius as f64 * (1.0 + lobes.iter().map(|l| (l[0] as f64).abs()).sum::<f64>());
                (m, m)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center at frame 0, in pixels.
    pub center: [f32; 2],
    /// Pixels per frame.
    pub velocity: [f32; 2],
    /// Inverse depth in `(0, 1]`, larger is nearer.
    pub depth: f32,
    pub texture: Texture,
}

impl ShapeSpec {
    /// Integer offset of the shape at frame `t` relative to frame 0.
    pub fn offset(&self, t: usize) -> (i64, i64) {
        integer_offset(self.velocity, t)
    }
}

fn integer_offset(velocity: [f32; 2], t: usize) -> (i64, i64) {
    (
        round(velocity[0] as f64 * t as f64) as i64,
        round(velocity[1] as f64 * t as f64) as i64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: Texture,
    pub background_depth: f32,
    pub background_velocity: [f32; 2],
    pub shapes: Vec<ShapeSpec>,
}

/// Everything the renderer knows about a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedClip {
    pub video: VideoTensor,
    /// Frame 0 to frame `t + 1` displacement of the visible frame-0 surface.
    pub flow: FlowField,
    /// `(T-1) x H x W`: frame-0 pixel still visible at its target in frame `t + 1`.
    pub flow_valid: Vec<bool>,
    /// Per-frame inverse-depth z-buffer.
    pub depth: Vec<Frame>,
    /// Per-frame instance ids, 0 = background, `k + 1` = shape `k`.
    pub ids: Vec<Vec<u32>>,
    pub instances: usize,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(CoreError::InvalidArgument(format!("scene needs T >= 2, got {}", self.frames)));
        }
        if self.width < crate::tensor::MIN_SIDE || self.height < crate::tensor::MIN_SIDE {
            return Err(CoreError::InvalidArgument(format!(
                "canvas {}x{} is too small",
                self.width, self.height
            )));
        }
        let mut depths: Vec<f32> = self.shapes.iter().map(|s| s.depth).collect();
        depths.push(self.background_depth);
        for d in &depths {
            if !(0.0..=1.0).contains(d) {
                return Err(CoreError::InvalidArgument(format!("depth {d} outside [0, 1]")));
            }
        }
        depths.sort_by(|a, b| a.total_cmp(b));
        if depths.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::InvalidArgument("depth planes must be distinct".into()));
        }
        if self.shapes.iter().any(|s| s.depth <= self.background_depth) {
            return Err(CoreError::InvalidArgument("background must be the farthest plane".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !self.inside_at(s, 0) {
                return Err(CoreError::InvalidArgument(format!("shape {i} leaves the canvas at frame 0")));
            }
        }
        Ok(())
    }

    /// Whether the shape's bounding box lies in the canvas at frame `t`.
    pub fn inside_at(&self, s: &ShapeSpec, t: usize) -> bool {
        let (ex, ey) = s.kind.half_extent();
        let (ox, oy) = s.offset(t);
        let cx = s.center[0] as f64 + ox as f64;
        let cy = s.center[1] as f64 + oy as f64;
        cx - ex >= 0.0 && cy - ey >= 0.0 && cx + ex <= (self.width - 1) as f64 && cy + ey <= (self.height - 1) as f64
    }

    /// Shape indices painted far to near.
    fn paint_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.shapes.len()).collect();
        order.sort_by(|&a, &b| self.shapes[a].depth.total_cmp(&self.shapes[b].depth));
        order
    }

    /// Instance-id raster of frame `t`.
    pub fn id_raster(&self, t: usize) -> Vec<u32> {
        let (w, h) = (self.width, self.height);
        let mut ids = vec![0u32; w * h];
        for k in self.paint_order() {
            let s = &self.shapes[k];
            let (ox, oy) = s.offset(t);
            let cx = s.center[0] as f64 + ox as f64;
            let cy = s.center[1] as f64 + oy as f64;
            for y in 0..h {
                for x in 0..w {
                    if s.kind.contains(x as f64 - cx, y as f64 - cy) {
                        ids[y * w + x] = k as u32 + 1;
                    }
                }
            }
        }
        ids
    }

    pub fn render(&self) -> Result<RenderedClip> {
        self.validate()?;
        let (w, h) = (self.width, self.height);
        let n = w * h;
        let mut video = Vec::with_capacity(self.frames * 3 * n);
        let mut depth = Vec::with_capacity(self.frames);
        let mut ids_per_frame = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let ids = self.id_raster(t);
            let mut rgb = vec![0.0f32; 3 * n];
            let mut z = vec![0.0f32; n];
            let (bx, by) = integer_offset(self.background_velocity, t);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (color, d) = match ids[i] {
                        0 => (
                            self.background.color(x as f64 - bx as f64, y as f64 - by as f64),
                            self.background_depth,
                        ),
                        k => {
                            let s = &self.shapes[k as usize - 1];
                            let (ox, oy) = s.offset(t);
                            let lx = x as f64 - s.center[0] as f64 - ox as f64;
                            let ly = y as f64 - s.center[1] as f64 - oy as f64;
                            (s.texture.color(lx, ly), s.depth)
                        }
                    };
                    for c in 0..3 {
                        rgb[c * n + i] = color[c];
                    }
                    z[i] = d;
                }
            }
            video.extend_from_slice(&rgb);
            depth.push(Frame::depth(h, w, z)?);
            ids_per_frame.push(ids);
        }

        let flow_frames = self.frames - 1;
        let mut flow = vec![0.0f32; flow_frames * 2 * n];
        let mut flow_valid = vec![false; flow_frames * n];
        let ids0 = &ids_per_frame[0];
        for t in 0..flow_frames {
            let next = &ids_per_frame[t + 1];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (ox, oy) = match ids0[i] {
                        0 => integer_offset(self.background_velocity, t + 1),
                        k => self.shapes[k as usize - 1].offset(t + 1),
                    };
                    flow[2 * t * n + i] = ox as f32;
                    flow[(2 * t + 1) * n + i] = oy as f32;
                    let (tx, ty) = (x as i64 + ox, y as i64 + oy);
                    if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                        flow_valid[t * n + i] = next[ty as usize * w + tx as usize] == ids0[i];
                    }
                }
            }
        }
        // displacements may exceed the canvas when a shape exits; clamp to the
        // flow extent invariant (such pixels are never valid)
        for t in 0..flow_frames {
            for c in 0..2 {
                let limit = if c == 0 { w } else { h } as f32;
                for v in &mut flow[(2 * t + c) * n..(2 * t + c + 1) * n] {
                    *v = v.clamp(-limit, limit);
                }
            }
        }
        Ok(RenderedClip {
            video: VideoTensor::new(self.frames, 3, h, w, 30.0, ColorSpace::Rgb, video)?,
            flow: FlowField::new(flow_frames, h, w, true, flow)?,
            flow_valid,
            depth,
            ids: ids_per_frame,
            instances: self.shapes.len(),
        })
    }
}

impl RenderedClip {
    /// One-hot segmentation of frame `t`, see [`one_hot`].
    pub fn one_hot(&self, t: usize) -> (Vec<f32>, Vec<u32>) {
        one_hot(&self.ids[t], self.instances)
    }
}

/// One-hot channels from an instance-id raster: instances `1..=K` first,
/// background last.
///
/// The background channel is omitted when no background pixel is visible.
/// Returns `(data, labels)` where `labels[c]` is the instance id of channel `c`.
pub fn one_hot(ids: &[u32], instances: usize) -> (Vec<f32>, Vec<u32>) {
    let n = ids.len();
    let mut labels: Vec<u32> = (1..=instances as u32).collect();
    if ids.contains(&0) {
        labels.push(0);
    }
    let mut data = vec![0.0f32; labels.len() * n];
    for (i, &id) in ids.iter().enumerate() {
        if let Some(c) = labels.iter().position(|&l| l == id) {
            data[c * n + i] = 1.0;
        }
    }
    (data, labels)
}

/// Sampling ranges for random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneDistribution {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub instruments: (usize, usize),
    pub tissue: (usize, usize),
    /// Per-axis velocity range for instruments, pixels per frame.
    pub instrument_velocity: (f32, f32),
    pub tissue_velocity: (f32, f32),
    pub background_velocity: (f32, f32),
    /// Reject scenes where a shape's box leaves the canvas at any frame.
    pub keep_inside: bool,
    /// Reject scenes where shapes overlap at any frame.
    pub occlusion_free: bool,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            frames: 8,
            instruments: (1, 1),
            tissue: (0, 1),
            instrument_velocity: (-2.0, 2.0),
            tissue_velocity: (0.0, 0.0),
            background_velocity: (0.0, 0.0),
            keep_inside: true,
            occlusion_free: false,
        }
    }
}

const MAX_ATTEMPTS: usize = 256;

fn uniform(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

fn count(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    if range.1 > range.0 {
        rng.random_range(range.0..=range.1)
    } else {
        range.0
    }
}

impl SceneDistribution {
    /// Deterministic scene for `seed`; retries internally until constraints hold.
    pub fn sample(&self, seed: u64) -> Result<SyntheticScene> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_ATTEMPTS {
            let scene = self.draw(&mut rng, seed);
            if self.accepts(&scene) {
                return Ok(scene);
            }
        }
        Err(CoreError::InvalidArgument(format!(
            "no scene satisfying the distribution constraints after {MAX_ATTEMPTS} draws (seed {seed})"
        )))
    }

    fn accepts(&self, scene: &SyntheticScene) -> bool {
        if scene.validate().is_err() {
            return false;
        }
        if self.keep_inside && !scene.shapes.iter().all(|s| (0..scene.frames).all(|t| scene.inside_at(s, t))) {
            return false;
        }
        if self.occlusion_free {
            for t in 0..scene.frames {
                let mut covered = vec![0u8; scene.width * scene.height];
                for s in &scene.shapes {
                    let (ox, oy) = s.offset(t);
                    let cx = s.center[0] as f64 + ox as f64;
                    let cy = s.center[1] as f64 + oy as f64;
                    for y in 0..scene.height {
                        for x in 0..scene.width {
                            if s.kind.contains(x as f64 - cx, y as f64 - cy) {
                                covered[y * scene.width + x] += 1;
                            }
                        }
                    }
                }
                if covered.iter().any(|&c| c > 1) {
                    return false;
                }
            }
        }
        true
    }

    fn draw(&self, rng: &mut ChaCha8Rng, seed: u64) -> SyntheticScene {
        let (w, h) = (self.width as f32, self.height as f32);
        let side = w.min(h);
        let background = Texture {
            base: [
                rng.random_range(0.45..0.6),
                rng.random_range(0.12..0.22),
                rng.random_range(0.12..0.22),
            ],
            amplitude: [0.08, 0.05, 0.05],
            frequency: [rng.random_range(0.15..0.5), rng.random_range(0.15..0.5)],
            phase: rng.random_range(0.0..6.28),
        };
        let background_velocity = [
            uniform(rng, self.background_velocity),
            uniform(rng, self.background_velocity),
        ];
        let n_tissue = count(rng, self.tissue);
        let n_instr = count(rng, self.instruments);
        let mut shapes = Vec::with_capacity(n_tissue + n_instr);
        for _ in 0..n_tissue {
            let radius = rng.random_range(0.15..0.25) * side;
            let kind = ShapeKind::Blob {
                radius,
                lobes: [
                    [rng.random_range(0.0..0.15), 3.0, rng.random_range(0.0..6.28)],
                    [rng.random_range(0.0..0.1), 5.0, rng.random_range(0.0..6.28)],
                ],
            };
            let texture = Texture {
                base: [
                    rng.random_range(0.8..0.95),
                    rng.random_range(0.45..0.6),
                    rng.random_range(0.45..0.6),
                ],
                amplitude: [0.06, 0.06, 0.06],
                frequency: [rng.random_range(0.3..0.8), rng.random_range(0.3..0.8)],
                phase: rng.random_range(0.0..6.28),
            };
            let velocity = [uniform(rng, self.tissue_velocity), uniform(rng, self.tissue_velocity)];
            shapes.push((kind, texture, velocity));
        }
        for _ in 0..n_instr {
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Ellipse {
                    rx: rng.random_range(0.12..0.2) * w,
                    ry: rng.random_range(0.08..0.14) * h,
                }
            } else {
                ShapeKind::Capsule {
                    half_len: rng.random_range(0.12..0.2) * side,
                    radius: rng.random_range(0.06..0.09) * side,
                    angle: rng.random_range(0.0..3.14),
                }
            };
            let g = rng.random_range(0.75..0.9);
            let texture = Texture {
                base: [g, g + 0.03, (g + 0.07).min(1.0)],
                amplitude: [0.05, 0.05, 0.05],
                frequency: [rng.random_range(0.5..1.2), rng.random_range(0.5..1.2)],
                phase: rng.random_range(0.0..6.28),
            };
            let velocity = [
                uniform(rng, self.instrument_velocity),
                uniform(rng, self.instrument_velocity),
            ];
            shapes.push((kind, texture, velocity));
        }
        // distinct planes: evenly spaced slots with jitter, instruments nearest
        let k = shapes.len();
        let background_depth = rng.random_range(0.1..0.2);
        let shapes = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (kind, texture, velocity))| {
                let slot = 0.3 + 0.65 * (i as f32 + 0.5) / k.max(1) as f32;
                let jitter = rng.random_range(-0.2..0.2) * 0.65 / k.max(1) as f32;
                let (ex, ey) = kind.half_extent();
                let (ex, ey) = (ex as f32, ey as f32);
                let cx = if w - 1.0 - ex > ex {
                    rng.random_range(ex..(w - 1.0 - ex))
                } else {
                    w / 2.0
                };
                let cy = if h - 1.0 - ey > ey {
                    rng.random_range(ey..(h - 1.0 - ey))
                } else {
                    h / 2.0
                };
                ShapeSpec {
                    kind,
                    center: [cx, cy],
                    velocity,
                    depth: slot + jitter,
                    texture,
                }
            })
            .collect();
        SyntheticScene {
            seed,
            width: self.width,
            height: self.height,
            frames: self.frames,
            background,
            background_depth,
            background_velocity,
            shapes,
        }
    }
}

/// Deterministic train/validation split: indices ordered by a seed hash,
/// the first `round(train_fraction * count)` are training clips.
pub fn split_indices(count: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<(u64, usize)> = (0..count).map(|i| (mix64(seed ^ mix64(i as u64)), i)).collect();
    order.sort();
    let n_train = round(train_fraction.clamp(0.0, 1.0) * count as f64) as usize;
    let mut train: Vec<usize> = order[..n_train].iter().map(|(_, i)| *i).collect();
    let mut val: Vec<usize> = order[n_train..].iter().map(|(_, i)| *i).collect();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-clip seed derived from a dataset seed.
pub fn clip_seed(dataset_seed: u64, index: usize) -> u64 {
    mix64(dataset_seed.wrapping_mul(0x1000_0000_01B3) ^ index as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_shape(velocity: [f32; 2]) -> SyntheticScene {
        SyntheticScene {
            seed: 0,
            width: 24,
            height: 16,
            frames: 4,
            background: Texture::flat([0.5, 0.2, 0.2]),
            background_depth: 0.2,
            background_velocity: [0.0, 0.0],
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Ellipse { rx: 3.0, ry: 2.5 },
                center: [7.0, 8.0],
                velocity,
                depth: 0.8,
                texture: Texture {
                    base: [0.8, 0.8, 0.9],
                    amplitude: [0.1, 0.1, 0.1],
                    frequency: [0.9, 0.4],
                    phase: 0.3,
                },
            }],
        }
    }

    #[test]
    fn rigid_translation_flow() {
        let clip = one_shape([1.0, 0.0]).render().unwrap();
        let n = 24 * 16;
        for t in 0..3 {
            for i in 0..n {
                let (dx, dy) = (clip.flow.dx(t)[i], clip.flow.dy(t)[i]);
                if clip.ids[0][i] == 1 {
                    assert_eq!((dx, dy), (t as f32 + 1.0, 0.0));
                } else {
                    assert_eq!((dx, dy), (0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn static_scene_has_identical_frames() {
        let clip = one_shape([0.0, 0.0]).render().unwrap();
        assert!(clip.flow.data().iter().all(|v| *v == 0.0));
        for t in 1..4 {
            assert_eq!(clip.video.frame_data(t), clip.video.frame_data(0));
        }
        assert!(clip.flow_valid.iter().all(|v| *v));
    }

    #[test]
    fn depth_map_matches_planes() {
        let clip = one_shape([0.0, 0.0]).render().unwrap();
        for (i, &id) in clip.ids[0].iter().enumerate() {
            let expected = if id == 1 { 0.8 } else { 0.2 };
            assert_eq!(clip.depth[0].data()[i], expected);
        }
    }

    #[test]
    fn one_hot_channels() {
        let clip = one_shape([0.0, 0.0]).render().unwrap();
        let (data, labels) = clip.one_hot(0);
        assert_eq!(labels, vec![1, 0]);
        let n = 24 * 16;
        for i in 0..n {
            assert_eq!(data[i] + data[n + i], 1.0);
        }
    }

    #[test]
    fn full_cover_drops_background_channel() {
        let mut clip = one_shape([0.0, 0.0]).render().unwrap();
        clip.ids[0].fill(1);
        let (data, labels) = clip.one_hot(0);
        assert_eq!(labels, vec![1]);
        assert!(data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn validation_rejects_bad_scenes() {
        let mut s = one_shape([0.0, 0.0]);
        s.frames = 1;
        assert!(s.render().is_err());
        let mut s = one_shape([0.0, 0.0]);
        s.shapes[0].depth = 0.2;
        assert!(s.validate().is_err());
        let mut s = one_shape([0.0, 0.0]);
        s.shapes[0].center = [1.0, 1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = SceneDistribution::default();
        assert_eq!(d.sample(7).unwrap(), d.sample(7).unwrap());
        assert_ne!(d.sample(7).unwrap(), d.sample(8).unwrap());
    }

    #[test]
    fn split_counts() {
        let (train, val) = split_indices(10, 0.8, 0);
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}

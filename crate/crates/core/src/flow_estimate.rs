//! Dense optical flow estimation for ingesting real clips.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{FlowField, VideoTensor};

/// Estimates anchored flow from frame 0 to each later frame.
pub trait FlowEstimator {
    fn name(&self) -> &str;
    fn estimate(&self, video: &VideoTensor) -> Result<FlowField>;
}

/// Classic Horn-Schunck with a coarse-to-fine pyramid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HornSchunck {
    pub alpha: f32,
    pub iterations: usize,
    pub levels: usize,
}

impl Default for HornSchunck {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            iterations: 100,
            levels: 3,
        }
    }
}

fn luminance(frame: &[f32], channels: usize, n: usize) -> Vec<f32> {
    if channels < 3 {
        return frame[..n].to_vec();
    }
    (0..n)
        .map(|i| 0.299 * frame[i] + 0.587 * frame[n + i] + 0.114 * frame[2 * n + i])
        .collect()
}

fn at(img: &[f32], h: usize, w: usize, y: isize, x: isize) -> f32 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    img[y * w + x]
}

fn sample_bilinear(img: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = libm::floorf(x);
    let y0 = libm::floorf(y);
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let a = at(img, h, w, y0, x0);
    let b = at(img, h, w, y0, x0 + 1);
    let c = at(img, h, w, y0 + 1, x0);
    let d = at(img, h, w, y0 + 1, x0 + 1);
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}

fn downsample(img: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = (2 * y as isize, 2 * x as isize);
            out[y * ow + x] = 0.25
                * (at(img, h, w, sy, sx) + at(img, h, w, sy, sx + 1) + at(img, h, w, sy + 1, sx) + at(img, h, w, sy + 1, sx + 1));
        }
    }
    (out, oh, ow)
}

fn upsample_flow(u: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (sy, sx) = (h as f32 / oh as f32, w as f32 / ow as f32);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = sample_bilinear(u, h, w, (y as f32 + 0.5) * sy - 0.5, (x as f32 + 0.5) * sx - 0.5);
        }
    }
    out
}

impl HornSchunck {
    /// Refines `(u, v)` so that `b(p + (u, v)) ~ a(p)`.
    fn refine(&self, a: &[f32], b: &[f32], h: usize, w: usize, u: &mut [f32], v: &mut [f32]) {
        let n = h * w;
        // linearise around the current estimate once per level
        let mut warped = vec![0.0; n];
        let mut ix = vec![0.0; n];
        let mut iy = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (px, py) = (x as f32 + u[i], y as f32 + v[i]);
                warped[i] = sample_bilinear(b, h, w, py, px);
                let gx = 0.5 * (sample_bilinear(b, h, w, py, px + 1.0) - sample_bilinear(b, h, w, py, px - 1.0));
                let gy = 0.5 * (sample_bilinear(b, h, w, py + 1.0, px) - sample_bilinear(b, h, w, py - 1.0, px));
                let (ax, ay) = (
                    0.5 * (at(a, h, w, y as isize, x as isize + 1) - at(a, h, w, y as isize, x as isize - 1)),
                    0.5 * (at(a, h, w, y as isize + 1, x as isize) - at(a, h, w, y as isize - 1, x as isize)),
                );
                ix[i] = 0.5 * (gx + ax);
                iy[i] = 0.5 * (gy + ay);
            }
        }
        let (u0, v0) = (u.to_vec(), v.to_vec());
        let a2 = self.alpha * self.alpha;
        for _ in 0..self.iterations {
            let (pu, pv) = (u.to_vec(), v.to_vec());
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let (yy, xx) = (y as isize, x as isize);
                    let avg = |f: &[f32]| {
                        0.25 * (at(f, h, w, yy - 1, xx) + at(f, h, w, yy + 1, xx) + at(f, h, w, yy, xx - 1) + at(f, h, w, yy, xx + 1))
                    };
                    let (ub, vb) = (avg(&pu), avg(&pv));
                    // brightness constancy linearised at (u0, v0)
                    let it = warped[i] - a[i] + ix[i] * (ub - u0[i]) + iy[i] * (vb - v0[i]);
                    let k = it / (a2 + ix[i] * ix[i] + iy[i] * iy[i]);
                    u[i] = ub - ix[i] * k;
                    v[i] = vb - iy[i] * k;
                }
            }
        }
    }

    pub fn estimate_pair(&self, a: &[f32], b: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
        let mut pyramid = vec![(a.to_vec(), b.to_vec(), h, w)];
        for _ in 1..self.levels.max(1) {
            let (pa, pb, ph, pw) = pyramid.last().unwrap();
            if *ph < 16 || *pw < 16 {
                break;
            }
            let (da, nh, nw) = downsample(pa, *ph, *pw);
            let (db, _, _) = downsample(pb, *ph, *pw);
            pyramid.push((da, db, nh, nw));
        }
        let (_, _, ch, cw) = pyramid.last().unwrap();
        let (mut u, mut v, mut ch, mut cw) = (vec![0.0; ch * cw], vec![0.0; ch * cw], *ch, *cw);
        for (pa, pb, ph, pw) in pyramid.iter().rev() {
            if (ch, cw) != (*ph, *pw) {
                let (sx, sy) = (*pw as f32 / cw as f32, *ph as f32 / ch as f32);
                u = upsample_flow(&u, ch, cw, *ph, *pw).into_iter().map(|x| x * sx).collect();
                v = upsample_flow(&v, ch, cw, *ph, *pw).into_iter().map(|x| x * sy).collect();
                (ch, cw) = (*ph, *pw);
            }
            self.refine(pa, pb, ch, cw, &mut u, &mut v);
        }
        (u, v)
    }
}

impl FlowEstimator for HornSchunck {
    fn name(&self) -> &str {
        "horn-schunck"
    }

    fn estimate(&self, video: &VideoTensor) -> Result<FlowField> {
        if video.frames() < 2 {
            return Err(CoreError::InvalidArgument("flow estimation needs at least two frames".into()));
        }
        let (h, w) = (video.height(), video.width());
        let n = h * w;
        let base = luminance(video.frame_data(0), video.channels(), n);
        let mut planes = Vec::with_capacity(video.frames() - 1);
        for t in 1..video.frames() {
            let next = luminance(video.frame_data(t), video.channels(), n);
            let (u, v) = self.estimate_pair(&base, &next, h, w);
            let u = u.into_iter().map(|x| x.clamp(-(w as f32), w as f32)).collect();
            let v = v.into_iter().map(|x| x.clamp(-(h as f32), h as f32)).collect();
            planes.push((u, v));
        }
        FlowField::from_planes(h, w, &planes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{cos, sin};

    fn pattern(h: usize, w: usize, shift: f32) -> Vec<f32> {
        (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64 - shift as f64, (i / w) as f64);
                (0.5 + 0.25 * sin(0.35 * x) * cos(0.3 * y)) as f32
            })
            .collect()
    }

    #[test]
    fn recovers_small_translation() {
        let (h, w) = (32, 32);
        let a = pattern(h, w, 0.0);
        let b = pattern(h, w, 1.0);
        let (u, v) = HornSchunck::default().estimate_pair(&a, &b, h, w);
        let mut su = 0.0;
        let mut sv = 0.0;
        let mut k = 0;
        for y in 8..24 {
            for x in 8..24 {
                su += u[y * w + x];
                sv += v[y * w + x];
                k += 1;
            }
        }
        assert!((su / k as f32 - 1.0).abs() < 0.2, "mean u = {}", su / k as f32);
        assert!((sv / k as f32).abs() < 0.2);
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = pattern(16, 16, 0.0);
        let (u, v) = HornSchunck::default().estimate_pair(&a, &a, 16, 16);
        assert!(u.iter().chain(&v).all(|x| x.abs() < 1e-6));
    }
}

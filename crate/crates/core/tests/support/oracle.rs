//! Naive reference implementations. Each one evaluates its definition
//! directly, in gather form where the production code scatters, so that a
//! shared mistake is unlikely.

#![allow(dead_code)]

fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

/// Forward splat by gathering: every destination pixel sums the tent weights
/// of every displaced source.
pub fn splat(values: &[f32], c: usize, h: usize, w: usize, dx: &[f32], dy: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let n = h * w;
    let mut out = vec![0.0; c * n];
    let mut weight = vec![0.0; n];
    for qy in 0..h {
        for qx in 0..w {
            let q = qy * w + qx;
            let mut acc = vec![0.0; c];
            let mut wsum = 0.0;
            for sy in 0..h {
                for sx in 0..w {
                    let s = sy * w + sx;
                    let tx = sx as f64 + dx[s] as f64;
                    let ty = sy as f64 + dy[s] as f64;
                    let wt = tent(tx - qx as f64) * tent(ty - qy as f64);
                    if wt == 0.0 {
                        continue;
                    }
                    wsum += wt;
                    for ch in 0..c {
                        acc[ch] += wt * values[ch * n + s] as f64;
                    }
                }
            }
            weight[q] = wsum;
            if wsum >= 1e-8 {
                for ch in 0..c {
                    out[ch * n + q] = acc[ch] / wsum;
                }
            }
        }
    }
    (out, weight)
}

/// Half-pixel bilinear sample of one plane at output pixel `(ox, oy)`,
/// written as a tent-weighted sum over every source pixel.
pub fn bilinear_at(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize, oy: usize, ox: usize) -> f64 {
    let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            acc += tent(sx - x as f64) * tent(sy - y as f64) * plane[y * w + x] as f64;
        }
    }
    acc
}

/// Resized flow frame `2 x oh x ow` with displacements rescaled per axis.
pub fn resize_flow_frame(frame: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; 2 * oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let i = oy * ow + ox;
            out[i] = bilinear_at(&frame[..n], h, w, oh, ow, oy, ox) * ow as f64 / w as f64;
            out[oh * ow + i] = bilinear_at(&frame[n..], h, w, oh, ow, oy, ox) * oh as f64 / h as f64;
        }
    }
    out
}

/// Gaussian-weighted average of sources within the support, per pixel.
pub fn densify(sources: &[(usize, usize, f32, f32)], h: usize, w: usize, sigma: f64, radius: f64) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; 2 * n];
    for qy in 0..h {
        for qx in 0..w {
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for &(px, py, vx, vy) in sources {
                let d2 = (qx as f64 - px as f64).powi(2) + (qy as f64 - py as f64).powi(2);
                if d2.sqrt() > radius {
                    continue;
                }
                let wt = (-d2 / (2.0 * sigma * sigma)).exp();
                sw += wt;
                sx += wt * vx as f64;
                sy += wt * vy as f64;
            }
            if sw >= 1e-8 {
                out[qy * w + qx] = sx / sw;
                out[n + qy * w + qx] = sy / sw;
            }
        }
    }
    out
}

/// SSIM by explicit per-window sums with a 2-D Gaussian kernel.
pub fn ssim(a: &[f32], b: &[f32], c: usize, h: usize, w: usize) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            g[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = h * w;
    let mut total = 0.0;
    let mut count = 0;
    for ch in 0..c {
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = ch * n + (y + i) * w + x + j;
                        let (va, vb) = (a[p] as f64, b[p] as f64);
                        let wt = g[i * k + j];
                        ma += wt * va;
                        mb += wt * vb;
                        aa += wt * va * va;
                        bb += wt * vb * vb;
                        ab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Point at arc length `d` along a polyline, by marching segment by segment.
pub fn point_at_arc_length(track: &[(f64, f64)], d: f64) -> (f64, f64) {
    let mut left = d;
    for seg in track.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        if left <= len && len > 0.0 {
            let t = left / len;
            return (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        }
        left -= len;
    }
    *track.last().unwrap()
}

pub fn arc_length(track: &[(f64, f64)]) -> f64 {
    track
        .windows(2)
        .map(|s| ((s[1].0 - s[0].0).powi(2) + (s[1].1 - s[0].1).powi(2)).sqrt())
        .sum()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

//! Flow resizing and forward bilinear splatting.
//!
//! A source pixel `(x, y)` carrying `f(x, y)` lands at `(x + dx, y + dy)` and
//! is scattered to the four surrounding integer pixels with bilinear weights.
//! Accumulated values are divided by the accumulated weight wherever that
//! weight reaches [`SPLAT_EPS`]; everything else is a hole and reads zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::image_ops::resize_bilinear_scaled;
use crate::math::floor;
use crate::tensor::{FeatureMap, FlowField};

pub const SPLAT_EPS: f64 = 1e-8;

/// One bilinear contribution of source pixel `src` to destination `dst`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatTap {
    pub src: u32,
    pub dst: u32,
    pub weight: f32,
}

/// Bilinear resize of every flow frame with displacements re-expressed in
/// target pixels (`dx * W_r / W`, `dy * H_r / H`).
pub fn resize_flow(flow: &FlowField, target: (usize, usize)) -> Result<FlowField> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(CoreError::InvalidArgument(format!("target size {th}x{tw} must be positive")));
    }
    let (h, w) = (flow.height(), flow.width());
    let scale = [tw as f64 / w as f64, th as f64 / h as f64];
    let mut data = Vec::with_capacity(flow.frames() * 2 * th * tw);
    for t in 0..flow.frames() {
        data.extend(resize_bilinear_scaled(flow.frame(t), 2, h, w, th, tw, &scale));
    }
    FlowField::new(flow.frames(), th, tw, flow.anchored(), data)
}

/// Splat taps for one flow frame. Pixels with `source_mask == false` do not splat.
pub fn splat_taps(dx: &[f32], dy: &[f32], height: usize, width: usize, source_mask: Option<&[bool]>) -> Vec<SplatTap> {
    let n = height * width;
    assert!(dx.len() == n && dy.len() == n, "flow planes must match the raster");
    let mut taps = Vec::with_capacity(4 * n);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if let Some(m) = source_mask {
                if !m[i] {
                    continue;
                }
            }
            let tx = x as f64 + dx[i] as f64;
            let ty = y as f64 + dy[i] as f64;
            let x0 = floor(tx);
            let y0 = floor(ty);
            let fx = tx - x0;
            let fy = ty - y0;
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (cx, cy, wt) in corners {
                if wt <= 0.0 || cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
                    continue;
                }
                taps.push(SplatTap {
                    src: i as u32,
                    dst: (cy as usize * width + cx as usize) as u32,
                    weight: wt as f32,
                });
            }
        }
    }
    taps
}

/// Accumulated splat weight per destination pixel.
pub fn tap_validity(taps: &[SplatTap], pixels: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; pixels];
    for tap in taps {
        acc[tap.dst as usize] += tap.weight as f64;
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Forward splat of a `C x H x W` raster. Returns `(warped, validity)`.
pub fn forward_splat(
    values: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    dx: &[f32],
    dy: &[f32],
    source_mask: Option<&[bool]>,
) -> (Vec<f32>, Vec<f32>) {
    let n = height * width;
    assert_eq!(values.len(), channels * n, "raster length does not match shape");
    let taps = splat_taps(dx, dy, height, width, source_mask);
    let mut weight = vec![0.0f64; n];
    let mut acc = vec![0.0f64; channels * n];
    for tap in &taps {
        let (s, d, wt) = (tap.src as usize, tap.dst as usize, tap.weight as f64);
        weight[d] += wt;
        for c in 0..channels {
            acc[c * n + d] += wt * values[c * n + s] as f64;
        }
    }
    let mut out = vec![0.0f32; channels * n];
    for d in 0..n {
        if weight[d] >= SPLAT_EPS {
            for c in 0..channels {
                out[c * n + d] = (acc[c * n + d] / weight[d]) as f32;
            }
        }
    }
    (out, weight.into_iter().map(|v| v as f32).collect())
}

/// Warps one feature map by a `2 x H_r x W_r` flow frame.
pub fn warp(features: &FeatureMap, flow_frame: &[f32]) -> Result<(FeatureMap, Vec<f32>)> {
    let (h, w) = (features.height(), features.width());
    let n = h * w;
    if flow_frame.len() != 2 * n {
        return Err(CoreError::ShapeMismatch(format!(
            "flow frame has {} values, features need 2x{h}x{w}",
            flow_frame.len()
        )));
    }
    let (warped, validity) = forward_splat(
        features.data(),
        features.channels(),
        h,
        w,
        &flow_frame[..n],
        &flow_frame[n..],
        None,
    );
    let (ih, iw) = features.input_size();
    let map = FeatureMap::new(features.channels(), h, w, features.scale_index(), ih, iw, warped)?;
    Ok((map, validity))
}

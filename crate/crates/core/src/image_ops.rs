//! Resampling and padding for channel-first rasters.
//!
//! Bilinear sampling uses half-pixel centers (corner alignment disabled),
//! clamps at the border and applies no antialiasing filter.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::floor;

/// Source taps for one output coordinate along an axis.
#[derive(Debug, Clone, Copy)]
struct AxisTap {
    i0: usize,
    i1: usize,
    t: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<AxisTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            AxisTap { i0, i1, t }
        })
        .collect()
}

#[inline]
fn lerp64(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear resize of a `C x H x W` raster to `C x out_h x out_w`.
pub fn resize_bilinear(data: &[f32], channels: usize, height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    resize_bilinear_scaled(data, channels, height, width, out_h, out_w, &vec![1.0; channels])
}

/// Bilinear resize with a per-channel multiplier applied after sampling.
pub fn resize_bilinear_scaled(
    data: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    channel_scale: &[f64],
) -> Vec<f32> {
    assert_eq!(data.len(), channels * height * width, "raster length does not match shape");
    assert_eq!(channel_scale.len(), channels);
    let xs = axis_taps(width, out_w);
    let ys = axis_taps(height, out_h);
    let mut out = vec![0.0f32; channels * out_h * out_w];
    for c in 0..channels {
        let plane = &data[c * height * width..(c + 1) * height * width];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, ty) in ys.iter().enumerate() {
            let r0 = &plane[ty.i0 * width..(ty.i0 + 1) * width];
            let r1 = &plane[ty.i1 * width..(ty.i1 + 1) * width];
            for (ox, tx) in xs.iter().enumerate() {
                let top = lerp64(r0[tx.i0] as f64, r0[tx.i1] as f64, tx.t);
                let bottom = lerp64(r1[tx.i0] as f64, r1[tx.i1] as f64, tx.t);
                dst[oy * out_w + ox] = (lerp64(top, bottom, ty.t) * channel_scale[c]) as f32;
            }
        }
    }
    out
}

/// Nearest-neighbour resize (half-pixel centers), used for label rasters.
pub fn resize_nearest(data: &[f32], channels: usize, height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(data.len(), channels * height * width, "raster length does not match shape");
    let pick = |o: usize, input: usize, output: usize| -> usize {
        let src = floor((o as f64 + 0.5) * input as f64 / output as f64) as usize;
        src.min(input - 1)
    };
    let mut out = vec![0.0f32; channels * out_h * out_w];
    for c in 0..channels {
        for oy in 0..out_h {
            let sy = pick(oy, height, out_h);
            for ox in 0..out_w {
                let sx = pick(ox, width, out_w);
                out[(c * out_h + oy) * out_w + ox] = data[(c * height + sy) * width + sx];
            }
        }
    }
    out
}

/// Zero bands added around a raster, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Splits `total` evenly, the odd extra pixel going to the bottom/right.
    pub fn split(total: usize) -> (usize, usize) {
        (total / 2, total - total / 2)
    }

    /// Padding that centers `height x width` in a `target x target` square.
    pub fn to_square(height: usize, width: usize, target: usize) -> Self {
        let (top, bottom) = Self::split(target.saturating_sub(height));
        let (left, right) = Self::split(target.saturating_sub(width));
        Self {
            top,
            bottom,
            left,
            right,
        }
    }
}

pub fn pad_zero(data: &[f32], channels: usize, height: usize, width: usize, pad: Padding) -> (Vec<f32>, usize, usize) {
    let oh = height + pad.top + pad.bottom;
    let ow = width + pad.left + pad.right;
    let mut out = vec![0.0f32; channels * oh * ow];
    for c in 0..channels {
        for y in 0..height {
            let src = &data[(c * height + y) * width..(c * height + y + 1) * width];
            let start = (c * oh + y + pad.top) * ow + pad.left;
            out[start..start + width].copy_from_slice(src);
        }
    }
    (out, oh, ow)
}

/// Output size that scales the long side to `long_side`, keeping aspect.
pub fn fit_long_side(height: usize, width: usize, long_side: usize) -> (usize, usize) {
    if width >= height {
        let h = crate::math::round(height as f64 * long_side as f64 / width as f64) as usize;
        (h.max(1), long_side)
    } else {
        let w = crate::math::round(width as f64 * long_side as f64 / height as f64) as usize;
        (long_side, w.max(1))
    }
}

/// Crops `C x H x W` to the rectangle `(x, y, w, h)`.
pub fn crop(data: &[f32], channels: usize, height: usize, width: usize, rect: (usize, usize, usize, usize)) -> Vec<f32> {
    let (x0, y0, cw, ch) = rect;
    assert!(x0 + cw <= width && y0 + ch <= height, "crop rectangle exceeds the raster");
    let mut out = Vec::with_capacity(channels * cw * ch);
    for c in 0..channels {
        for y in y0..y0 + ch {
            let row = (c * height + y) * width;
            out.extend_from_slice(&data[row + x0..row + x0 + cw]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let data: Vec<f32> = (0..2 * 5 * 7).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(resize_bilinear(&data, 2, 5, 7, 5, 7), data);
    }

    #[test]
    fn constant_raster_stays_constant() {
        let data = vec![0.3f32; 3 * 9 * 11];
        let out = resize_bilinear(&data, 3, 9, 11, 4, 6);
        assert!(out.iter().all(|v| *v == 0.3));
    }

    #[test]
    fn fixed_aspect_padding_split() {
        let pad = Padding::to_square(197, 256, 256);
        assert_eq!((pad.top, pad.bottom, pad.left, pad.right), (29, 30, 0, 0));
        let (out, h, w) = pad_zero(&vec![1.0; 197 * 256], 1, 197, 256, pad);
        assert_eq!((h, w), (256, 256));
        assert!(out[..29 * 256].iter().all(|v| *v == 0.0));
        assert!(out[(29 + 197) * 256..].iter().all(|v| *v == 0.0));
        assert_eq!(out.iter().filter(|v| **v == 1.0).count(), 197 * 256);
    }

    #[test]
    fn long_side_fit() {
        assert_eq!(fit_long_side(1024, 1300, 256), (202, 256));
        assert_eq!(fit_long_side(300, 100, 30), (30, 10));
    }

    #[test]
    fn nearest_resize_picks_labels() {
        let data = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(resize_nearest(&data, 1, 2, 2, 4, 4)[..4], [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn crop_extracts_rectangle() {
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(crop(&data, 1, 4, 4, (1, 2, 2, 2)), vec![9.0, 10.0, 13.0, 14.0]);
    }
}

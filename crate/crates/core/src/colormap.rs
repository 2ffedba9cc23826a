//! Fixed 256-entry jet palette and the motion heatmap.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math::round;
use crate::tensor::VideoTensor;

const fn channel(i: i32, k: i32) -> u8 {
    // 255 * clamp(1.5 - |4 i / 255 - k|, 0, 1), rounded half down, integer only
    let d = 4 * i - 255 * k;
    let d = if d < 0 { -d } else { d };
    let v = (765 - 2 * d) / 2;
    if v < 0 {
        0
    } else if v > 255 {
        255
    } else {
        v as u8
    }
}

const fn build() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        lut[i] = [channel(i as i32, 3), channel(i as i32, 2), channel(i as i32, 1)];
        i += 1;
    }
    lut
}

pub static JET: [[u8; 3]; 256] = build();

/// Palette entry for a value in `[0, 1]`; out-of-range values saturate.
pub fn jet(value: f32) -> [u8; 3] {
    let v = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
    JET[round(v as f64 * 255.0) as usize]
}

/// Mean absolute per-pixel difference between the first and last frame, `H x W`.
pub fn motion_magnitude(video: &VideoTensor) -> Result<Vec<f32>> {
    if video.frames() < 2 {
        return Err(CoreError::InvalidArgument("heatmap needs at least two frames".into()));
    }
    let n = video.height() * video.width();
    let c = video.channels();
    let first = video.frame_data(0);
    let last = video.frame_data(video.frames() - 1);
    Ok((0..n)
        .map(|i| {
            let s: f32 = (0..c).map(|ch| (last[ch * n + i] - first[ch * n + i]).abs()).sum();
            s / c as f32
        })
        .collect())
}

/// Interleaved RGB8 heatmap of [`motion_magnitude`].
pub fn heatmap_rgb8(video: &VideoTensor) -> Result<Vec<u8>> {
    Ok(motion_magnitude(video)?.into_iter().flat_map(jet).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::tensor::ColorSpace;

    #[test]
    fn palette_endpoints() {
        assert_eq!(JET[0], [0, 0, 127]);
        assert_eq!(JET[255], [127, 0, 0]);
        assert_eq!(JET[128], [129, 255, 125]);
        assert_eq!(jet(-1.0), JET[0]);
        assert_eq!(jet(2.0), JET[255]);
    }

    #[test]
    fn static_clip_is_cold() {
        let v = VideoTensor::new(3, 3, 8, 8, 30.0, ColorSpace::Rgb, vec![0.4; 3 * 3 * 64]).unwrap();
        let rgb = heatmap_rgb8(&v).unwrap();
        assert_eq!(rgb.len(), 3 * 64);
        assert!(rgb.chunks(3).all(|p| p == JET[0]));
    }
}

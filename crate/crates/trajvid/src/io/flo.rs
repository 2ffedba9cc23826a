//! Middlebury optical flow files.
//!
//! Layout: `f32` magic 202021.25, `i32` width, `i32` height, then
//! `width * height` interleaved `(u, v)` `f32` pairs in row-major order.
//! All fields little-endian.

use std::path::Path;

use trajvid_core::FlowField;

use crate::error::{Error, Result};

pub const MAGIC: f32 = 202021.25;

/// One flow frame as planar `dx`, `dy`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloFrame {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

pub fn encode(width: usize, height: usize, dx: &[f32], dy: &[f32]) -> Vec<u8> {
    assert_eq!(dx.len(), width * height);
    assert_eq!(dy.len(), width * height);
    let mut out = Vec::with_capacity(12 + 8 * width * height);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    for (u, v) in dx.iter().zip(dy) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<FloFrame, String> {
    let word = |i: usize| -> [u8; 4] { bytes[4 * i..4 * i + 4].try_into().unwrap() };
    if bytes.len() < 12 {
        return Err(format!("{} bytes is too short for a flo header", bytes.len()));
    }
    let magic = f32::from_le_bytes(word(0));
    if magic != MAGIC {
        return Err(format!("bad magic {magic}"));
    }
    let width = i32::from_le_bytes(word(1));
    let height = i32::from_le_bytes(word(2));
    if width <= 0 || height <= 0 {
        return Err(format!("bad dimensions {width}x{height}"));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width * height;
    if bytes.len() != 12 + 8 * n {
        return Err(format!("expected {} bytes for {width}x{height}, found {}", 12 + 8 * n, bytes.len()));
    }
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for i in 0..n {
        dx.push(f32::from_le_bytes(word(3 + 2 * i)));
        dy.push(f32::from_le_bytes(word(4 + 2 * i)));
    }
    Ok(FloFrame { width, height, dx, dy })
}

/// Encodes frame `t` of a flow field.
pub fn encode_frame(flow: &FlowField, t: usize) -> Vec<u8> {
    encode(flow.width(), flow.height(), flow.dx(t), flow.dy(t))
}

pub fn read(path: &Path) -> Result<FloFrame> {
    decode(&super::read(path)?).map_err(|m| Error::format(path, m))
}

pub fn write(path: &Path, flow: &FlowField, t: usize) -> Result<()> {
    super::write_atomic(path, &encode_frame(flow, t))
}

/// `flow_0000.flo`, `flow_0001.flo`, ...
pub fn file_name(t: usize) -> String {
    format!("flow_{t:04}.flo")
}

/// Stacks decoded frames back into an anchored flow field.
pub fn to_flow_field(frames: &[FloFrame]) -> Result<FlowField> {
    let first = frames.first().ok_or_else(|| Error::Usage("no flow frames".into()))?;
    let planes: Vec<(Vec<f32>, Vec<f32>)> = frames.iter().map(|f| (f.dx.clone(), f.dy.clone())).collect();
    Ok(FlowField::from_planes(first.height, first.width, &planes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_pinned() {
        let b = encode(2, 1, &[1.0, -2.0], &[0.5, 3.0]);
        // the magic float reads as ASCII "PIEH"
        assert_eq!(&b[..4], b"PIEH");
        assert_eq!(&b[4..8], &2i32.to_le_bytes());
        assert_eq!(&b[8..12], &1i32.to_le_bytes());
        assert_eq!(b.len(), 12 + 16);
        assert_eq!(&b[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&b[16..20], &0.5f32.to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let dx: Vec<f32> = (0..12).map(|i| i as f32 * 0.25).collect();
        let dy: Vec<f32> = (0..12).map(|i| -(i as f32)).collect();
        let f = decode(&encode(4, 3, &dx, &dy)).unwrap();
        assert_eq!((f.width, f.height), (4, 3));
        assert_eq!(f.dx, dx);
        assert_eq!(f.dy, dy);
    }

    #[test]
    fn rejects_truncated() {
        let b = encode(4, 3, &[0.0; 12], &[0.0; 12]);
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(b"nope").is_err());
    }
}

//! PNG encodings used on disk and over HTTP.
//!
//! RGB frames are 8-bit (`round(v * 255)`), depth maps are 16-bit grayscale
//! (`round(v * 65535)`), segmentation maps are palette-indexed instance ids.
//! Encoding settings are fixed so output bytes are reproducible.

use std::io::Cursor;

use trajvid_core::{ColorSpace, Frame};

use crate::error::{Error, Result};

fn encoder_error(e: png::EncodingError) -> Error {
    Error::Image(e.to_string())
}

fn decoder_error(e: png::DecodingError) -> Error {
    Error::Image(e.to_string())
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, palette: Option<&[u8]>, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Balanced);
        if let Some(p) = palette {
            enc.set_palette(p.to_vec());
        }
        let mut writer = enc.write_header().map_err(encoder_error)?;
        writer.write_image_data(data).map_err(encoder_error)?;
        writer.finish().map_err(encoder_error)?;
    }
    Ok(out)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> Result<Decoded> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(decoder_error)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decoder_error)?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data: buf,
    })
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved RGB8 bytes of a planar RGB frame.
pub fn rgb8(frame: &Frame) -> Vec<u8> {
    let n = frame.height() * frame.width();
    let d = frame.data();
    (0..n).flat_map(|i| [to_u8(d[i]), to_u8(d[n + i]), to_u8(d[2 * n + i])]).collect()
}

pub fn encode_rgb8(width: usize, height: usize, interleaved: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, png::ColorType::Rgb, png::BitDepth::Eight, None, interleaved)
}

pub fn encode_rgb(frame: &Frame) -> Result<Vec<u8>> {
    if frame.channels() != 3 {
        return Err(Error::Image(format!("rgb png needs 3 channels, frame has {}", frame.channels())));
    }
    encode_rgb8(frame.width(), frame.height(), &rgb8(frame))
}

/// Decodes any supported image (PNG, JPEG) to an RGB frame in `[0, 1]`.
pub fn decode_rgb(bytes: &[u8]) -> Result<Frame> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let n = w * h;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Frame::rgb(h, w, data)?)
}

pub fn encode_depth16(frame: &Frame) -> Result<Vec<u8>> {
    if frame.space() != ColorSpace::Depth {
        return Err(Error::Image("depth png needs a depth frame".into()));
    }
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    encode_png(frame.width(), frame.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, None, &bytes)
}

/// Reads a single-channel PNG (8 or 16 bit) as depth in `[0, 1]`.
pub fn decode_depth(bytes: &[u8]) -> Result<Frame> {
    let d = decode_png(bytes)?;
    if d.color != png::ColorType::Grayscale {
        return Err(Error::Image(format!("depth png must be grayscale, found {:?}", d.color)));
    }
    let data: Vec<f32> = match d.depth {
        png::BitDepth::Sixteen => d
            .data
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        png::BitDepth::Eight => d.data.iter().map(|&b| b as f32 / 255.0).collect(),
        other => return Err(Error::Image(format!("unsupported depth bit depth {other:?}"))),
    };
    Ok(Frame::depth(d.height, d.width, data)?)
}

/// Fixed palette: index 0 is black, the rest cycle through distinct hues.
pub fn palette() -> Vec<u8> {
    let base: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    (0..256).flat_map(|i| base[i % 8]).collect()
}

pub fn encode_indexed(width: usize, height: usize, ids: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, png::ColorType::Indexed, png::BitDepth::Eight, Some(&palette()), ids)
}

/// Returns `(width, height, indices)`.
pub fn decode_indexed(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let d = decode_png(bytes)?;
    if d.color != png::ColorType::Indexed || d.depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("expected 8-bit indexed png, found {:?}/{:?}", d.color, d.depth)));
    }
    Ok((d.width, d.height, d.data))
}

//! 8-bit PNG for colors and masks, little-endian PFM for depth.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{ColorImage, DepthMap, Mask, Raster};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::load(path, e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::load(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::load(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::load(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::load(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::load(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn write_color_png(img: &ColorImage, path: &Path) -> Result<()> {
    let data: Vec<u8> = img.as_slice().iter().flat_map(|p| p.map(quantize)).collect();
    write_png(path, img.width(), img.height(), png::ColorType::Rgb, &data)
}

/// Reads an 8-bit color PNG into [0, 1] floats.
pub fn read_color_png(path: &Path) -> Result<ColorImage> {
    let (w, h, ct, buf) = read_png(path)?;
    let channels = match ct {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::load(path, format!("unsupported color type {other:?}"))),
    };
    let data = buf
        .chunks_exact(channels)
        .map(|px| {
            let g = |c: usize| px[if channels < 3 { 0 } else { c }] as f64 / 255.0;
            [g(0), g(1), g(2)]
        })
        .collect();
    Raster::from_vec(w, h, data).ok_or_else(|| Error::load(path, "pixel count mismatch"))
}

pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.as_slice().iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path, mask.width(), mask.height(), png::ColorType::Grayscale, &data)
}

/// Reads a mask PNG; any nonzero first channel is inside.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let (w, h, ct, buf) = read_png(path)?;
    let channels = match ct {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::load(path, format!("unsupported color type {other:?}"))),
    };
    let data = buf.chunks_exact(channels).map(|px| px[0] > 127).collect();
    Raster::from_vec(w, h, data).ok_or_else(|| Error::load(path, "pixel count mismatch"))
}

/// Single-channel PFM, little-endian, rows stored bottom to top.
pub fn write_pfm(depth: &DepthMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let (w, h) = (depth.width(), depth.height());
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for v in (0..h).rev() {
        for u in 0..w {
            bytes.extend_from_slice(&(depth[(u, v)] as f32).to_le_bytes());
        }
    }
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn next_token<'a>(header: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < header.len() && header[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < header.len() && !header[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&header[start..*pos]).ok().filter(|s| !s.is_empty())
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::load(path, format!("malformed PFM: {m}"));
    let mut pos = 0;
    if next_token(&bytes, &mut pos) != Some("Pf") {
        return Err(bad("expected single-channel `Pf` header"));
    }
    let mut num = |what: &str| -> Result<f64> {
        next_token(&bytes, &mut pos)
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| bad(what))
    };
    let (w, h, scale) = (num("width")?, num("height")?, num("scale")?);
    if w < 1.0 || h < 1.0 || w.fract() != 0.0 || h.fract() != 0.0 || scale == 0.0 {
        return Err(bad("bad dimensions or scale"));
    }
    let (w, h) = (w as usize, h as usize);
    pos += 1;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 4 * w * h {
        return Err(bad("payload size does not match dimensions"));
    }
    let little = scale < 0.0;
    let mut out = Raster::new(w, h, 0.0);
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (u, row) = (k % w, k / w);
        out[(u, h - 1 - row)] = v as f64;
    }
    Ok(out)
}

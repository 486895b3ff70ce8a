//! File formats: PFM (portable float map) for HDR data and 8-bit PNG for
//! LDR images.
//!
//! PFM files are written little-endian (scale -1.0) with scanlines ordered
//! bottom-to-top per the format convention, so round trips are bit-exact.
//! PNG writes clamp to [0,1]; `Linear` images are sRGB-encoded on the way
//! out and decoded on the way back in, `Data`/`Srgb` images pass through.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};

pub fn srgb_encode(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(v: f32) -> f32 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Write a 1- or 3-channel image as PFM.
pub fn write_pfm(path: &Path, image: &Image) -> Result<()> {
    let channels = image.channels();
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!("pfm supports 1 or 3 channels, got {channels}")));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = if channels == 3 { "PF" } else { "Pf" };
    write!(w, "{header}\n{} {}\n-1.0\n", image.width(), image.height())
        .map_err(|e| Error::io(path, e))?;
    let (hh, ww) = (image.height(), image.width());
    let mut buf = Vec::with_capacity(ww * channels * 4);
    for y in (0..hh).rev() {
        buf.clear();
        for x in 0..ww {
            for c in 0..channels {
                buf.extend_from_slice(&image.get(c, y, x).to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a PFM file. The resulting image is tagged `Linear` for 3-channel
/// files and `Data` for grayscale.
pub fn read_pfm(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_token(&mut r, path)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(path, format!("bad PFM magic {other:?}"))),
    };
    let width: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path, "bad width"))?;
    let height: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path, "bad height"))?;
    let scale: f32 = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(path, "bad scale"))?;
    let little_endian = scale < 0.0;
    let mut raw = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let mut img = Image::new(channels, height, width, if channels == 3 {
        ColorSpace::Linear
    } else {
        ColorSpace::Data
    });
    let mut idx = 0;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let b = [raw[idx], raw[idx + 1], raw[idx + 2], raw[idx + 3]];
                idx += 4;
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                img.set(c, y, x, v);
            }
        }
    }
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite PFM data"));
    }
    Ok(img)
}

fn read_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte).map_err(|e| Error::io(path, e))? {
            0 => {
                if tok.is_empty() {
                    return Err(Error::format(path, "unexpected EOF in header"));
                }
                return Ok(tok);
            }
            _ => {
                let ch = byte[0] as char;
                if ch.is_ascii_whitespace() {
                    if !tok.is_empty() {
                        return Ok(tok);
                    }
                } else {
                    tok.push(ch);
                }
            }
        }
    }
}

/// Write an 8-bit PNG. Values are clamped to [0,1]; `Linear` images are
/// sRGB-encoded first. 1 channel writes grayscale, 3 writes RGB.
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let channels = image.channels();
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        other => {
            return Err(Error::InvalidArgument(format!("png supports 1/3/4 channels, got {other}")))
        }
    };
    let encode = image.color_space() == ColorSpace::Linear;
    let mut bytes = Vec::with_capacity(image.pixel_count() * channels);
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..channels {
                let v = image.get(c, y, x);
                let v = if encode { srgb_encode(v) } else { v.clamp(0.0, 1.0) };
                bytes.push((v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// Read an 8-bit PNG into the requested color space. Passing `Linear`
/// applies sRGB decoding to the stored bytes.
pub fn read_png(path: &Path, color_space: ColorSpace) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png buffer size")];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("unsupported png color {other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit png supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut img = Image::new(channels, h, w, color_space);
    let decode = color_space == ColorSpace::Linear;
    let mut idx = 0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let v = buf[idx] as f32 / 255.0;
                idx += 1;
                img.set(c, y, x, if decode { srgb_decode(v) } else { v });
            }
        }
    }
    Ok(img)
}

//! 8-bit PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Compression, Decoder, Encoder, Filter};

use crate::colorspace::ImagePlane;
use crate::error::{Error, Result};
use crate::mask::RegionMask;
use crate::tensor::Tensor;

fn image_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Fixed encoder settings keep output byte-identical across runs.
fn write_png(path: &Path, width: usize, height: usize, color: ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    enc.set_compression(Compression::Balanced);
    enc.set_filter(Filter::Sub);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// `(color type, width, height, bytes)` of an 8-bit RGB or grayscale PNG.
fn read_png(path: &Path) -> Result<(ColorType, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Decoder::new(BufReader::new(file)).read_info().map_err(|e| image_err(path, e))?;
    let (color, depth) = reader.output_color_type();
    if depth != BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {depth:?}, expected 8")));
    }
    if !matches!(color, ColorType::Rgb | ColorType::Grayscale) {
        return Err(image_err(path, format!("unsupported color type {color:?}, expected RGB or grayscale")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((color, info.width as usize, info.height as usize, buf))
}

pub fn save_rgb(path: &Path, image: &ImagePlane) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let px = image.pixels().data();
    let hw = h * w;
    let mut bytes = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            bytes.push(to_byte(px[c * hw + p]));
        }
    }
    write_png(path, w, h, ColorType::Rgb, &bytes)
}

/// RGB image with values `k/255`. Grayscale files are replicated to three
/// channels.
pub fn load_rgb(path: &Path) -> Result<ImagePlane> {
    let (color, w, h, bytes) = read_png(path)?;
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            let b = match color {
                ColorType::Rgb => bytes[3 * p + c],
                _ => bytes[p],
            };
            data[c * hw + p] = b as f64 / 255.0;
        }
    }
    ImagePlane::rgb(Tensor::new([3, h, w], data)?)
}

pub fn save_gray(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::shape("save_gray", "bytes", format!("{} bytes for {width}x{height}", bytes.len())));
    }
    write_png(path, width, height, ColorType::Grayscale, bytes)
}

/// `(width, height, bytes)` of a grayscale PNG.
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (color, w, h, bytes) = read_png(path)?;
    if color != ColorType::Grayscale {
        return Err(image_err(path, "expected a grayscale PNG"));
    }
    Ok((w, h, bytes))
}

/// Values scaled to `0..=255`.
pub fn save_mask(path: &Path, mask: &RegionMask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| to_byte(v)).collect();
    save_gray(path, mask.width(), mask.height(), &bytes)
}

pub fn load_mask(path: &Path) -> Result<RegionMask> {
    let (w, h, bytes) = load_gray(path)?;
    RegionMask::new(h, w, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

//! PNG input/output and bilinear resampling.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor};

/// Loads an 8-bit grayscale or RGB PNG, mapping each sample `v` to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("bit depth {:?} (only 8-bit supported)", info.bit_depth),
        });
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("color type {other:?} (only grayscale or RGB supported)"),
            })
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(h * w * channels);
    for row in buf[..frame.buffer_size()].chunks(stride).take(h) {
        data.extend(row[..w * channels].iter().map(|&v| v as f32 / 255.0));
    }
    Image::new(h, w, channels, data)
}

/// Quantizes a `[0, 1]` value to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.into(),
            reason: other.to_string(),
        },
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let color = if img.channels() == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), img.width(), img.height(), color, &bytes)
}

/// Writes a boolean mask as a 0/255 grayscale PNG.
pub fn save_mask_png(mask: &[bool], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::Shape(format!(
            "mask has {} pixels, expected {height}x{width}",
            mask.len()
        )));
    }
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, &bytes)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} must be at least 1x1"
        )));
    }
    let (h, w, c) = img.shape();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y, x| img.get(y, x, ch) as f64;
                // a + f * (b - a) keeps constant regions exact
                let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
                let bottom = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
                let v = top + fy * (bottom - top);
                data.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    Image::from_tensor(Tensor::from_vec(&[out_h, out_w, c], data)?)
}

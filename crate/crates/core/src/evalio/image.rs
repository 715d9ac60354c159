//! Image reading (binary PGM/PPM, PNG) and writing (PPM, PNG).
//!
//! Images are `[3, H, W]` tensors in `[0, 1]`; grayscale inputs are
//! replicated to three channels and alpha channels are dropped.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use acv_ndops::Tensor;

use crate::error::{AcvError, Result};

fn bad(format: &'static str, detail: impl Into<String>) -> AcvError {
    AcvError::format(format, detail)
}

/// Reads a PGM (`P5`), PPM (`P6`) or PNG file, detected from its magic bytes.
pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    decode_image(&std::fs::read(path)?)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f64>> {
    match bytes {
        [b'P', b'5' | b'6', ..] => decode_pnm(bytes),
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        _ => Err(bad("image", "unsupported format (expected binary PGM/PPM or PNG)")),
    }
}

/// Builds `[3, H, W]` from interleaved samples with `channels` per pixel,
/// reading the first `min(channels, 3)` channels.
fn planar(samples: &[f64], channels: usize, h: usize, w: usize) -> Result<Tensor<f64>> {
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let src = if channels < 3 { 0 } else { c };
            out[c * plane + i] = samples[i * channels + src];
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], out)?)
}

fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("PNM", "malformed header"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 || pos >= bytes.len() {
        return Err(bad("PNM", format!("invalid header {w}x{h} maxval {maxval}")));
    }
    pos += 1;
    let wide = maxval > 255;
    let n = w * h * channels;
    let need = n * if wide { 2 } else { 1 };
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(bad("PNM", format!("payload has {} bytes, need {need}", payload.len())));
    }
    let samples: Vec<f64> = if wide {
        payload[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / maxval as f64).collect()
    } else {
        payload[..need].iter().map(|&b| b as f64 / maxval as f64).collect()
    };
    planar(&samples, channels, h, w)
}

fn decode_png(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| bad("PNG", e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad("PNG", e.to_string()))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect(),
        other => return Err(bad("PNG", format!("unsupported bit depth {other:?}"))),
    };
    planar(&samples, channels, h, w)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PPM.
pub fn encode_ppm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(bad("PPM", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(image.data()[c * h * w + i]));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// 8-bit RGB PNG from interleaved bytes.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(bad("PNG", format!("{} bytes for {width}x{height} RGB", rgb.len())));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| bad("PNG", e.to_string()))?;
    writer.write_image_data(rgb).map_err(|e| bad("PNG", e.to_string()))?;
    writer.finish().map_err(|e| bad("PNG", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pgm_pixel() {
        let img = decode_image(b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_and_comments() {
        let img = decode_image(b"P5\n# c\n2 1\n65535\n\x00\x00\xff\xff").unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn ppm_round_trip_at_8_bit() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| ((i[0] * 50 + i[1] * 20 + i[2] * 7) as f64) / 255.0);
        let back = decode_image(&encode_ppm(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn rejects_unknown() {
        assert!(decode_image(b"GIF89a").is_err());
        assert!(decode_image(b"P6\n2 2\n255\n\x00").is_err());
    }
}

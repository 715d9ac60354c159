//! Portable float map.
//!
//! Header: `Pf` (one channel) or `PF` (three channels), a line with width and
//! height, and a line with the scale, whose sign gives the byte order
//! (negative = little-endian). Rows are stored bottom to top, 32-bit floats.
//! Writes are single-channel little-endian with scale `-1`.

use std::path::Path;

use acv_ndops::Tensor;

use crate::error::{AcvError, Result};

fn bad(detail: impl Into<String>) -> AcvError {
    AcvError::format("PFM", detail)
}

/// Encodes an `[H, W]` map.
pub fn encode(map: &Tensor<f32>) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(bad(format!("expected an [H, W] map, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("Pf\n{w} {h}\n-1\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for &v in &map.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits off one whitespace-terminated header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos || *pos >= bytes.len() {
        return Err(bad("truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| bad("non-ASCII header"))
}

/// Decodes to `[H, W]` (`Pf`) or `[3, H, W]` (`PF`), top row first.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos)? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(bad(format!("unknown magic {other:?}"))),
    };
    let w: usize = token(bytes, &mut pos)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(bytes, &mut pos)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(bytes, &mut pos)?.parse().map_err(|_| bad("bad scale"))?;
    if w == 0 || h == 0 {
        return Err(bad("zero extent"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad(format!("scale {scale} must be nonzero")));
    }
    pos += 1; // the single whitespace byte ending the header
    let payload = &bytes[pos..];
    let n = w * h * channels;
    if payload.len() < n * 4 {
        return Err(bad(format!("payload has {} bytes, need {}", payload.len(), n * 4)));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; n];
    for (i, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        // file order: row (bottom first), column, channel
        let (row, rest) = (i / (w * channels), i % (w * channels));
        let (x, c) = (rest / channels, rest % channels);
        let y = h - 1 - row;
        data[(c * h + y) * w + x] = v;
    }
    let shape: Vec<usize> = if channels == 1 { vec![h, w] } else { vec![3, h, w] };
    Ok(Tensor::from_vec(&shape, data)?)
}

pub fn write(path: &Path, map: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(map)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_big_endian() {
        let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
        // bottom row then top row
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let m = decode(&bytes).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = Tensor::from_fn(&[3, 5], |i| (i[0] as f32 * 1.37 - i[1] as f32).exp() * 1e-3);
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn malformed() {
        assert!(decode(b"P5\n2 2\n-1\n").is_err());
        assert!(decode(b"Pf\n2 2\n-1\n\0\0\0\0").is_err());
        assert!(decode(b"Pf\n2").is_err());
        assert!(decode(b"Pf\n1 1\n0\n\0\0\0\0").is_err());
    }
}

//! Binary PGM (P5) and PPM (P6) codec, 8- and 16-bit samples.

use std::path::Path;

use crate::error::{CladError, Result};
use crate::numerics::Tensor;

/// Decoded image as `[C, H, W]` samples scaled to [0, 1].
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let fail = |reason: &str| CladError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("non-ascii header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(fail(&format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| fail(&format!("bad header number {s:?}")));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if width == 0 || height == 0 {
        return Err(fail("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fail("maxval out of range"));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let n = width * height * channels;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() < n * bytes_per {
        return Err(fail("truncated raster"));
    }
    let scale = 1.0 / maxval as f32;
    let mut data = vec![0.0f32; n];
    // interleaved RGB becomes planar channels
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let i = (y * width + x) * channels + c;
                let raw = if bytes_per == 1 {
                    raster[i] as usize
                } else {
                    u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
                };
                if raw > maxval {
                    return Err(fail("sample exceeds maxval"));
                }
                data[(c * height + y) * width + x] = raw as f32 * scale;
            }
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

/// Quantizes a [0, 1] value to 8 bits, rounding half up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Encodes `[1, H, W]` as P5 or `[3, H, W]` as P6, maxval 255.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(CladError::dim("encode_pnm", "rank", 3, image.shape().len()));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        other => return Err(CladError::dim("encode_pnm", "channels", "1 or 3", other)),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(d[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

/// Encodes an `[H, W]` map in [0, 1] as P5.
pub fn encode_gray(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w] = map.shape() else {
        return Err(CladError::dim("encode_pgm", "rank", 2, map.shape().len()));
    };
    encode(&map.clone().reshape(&[1, h, w])?)
}

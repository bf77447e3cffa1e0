//! Binary PGM (`P5`) and PPM (`P6`) decoding plus inference preprocessing.

use crate::error::{FormatError, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Largest accepted width or height.
pub const MAX_SIDE: usize = 1 << 14;

fn bad(msg: impl Into<String>) -> FormatError {
    FormatError::Image(msg.into())
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' && bytes[pos] != b'\r' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, FormatError> {
    *pos = skip_space_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad(format!("missing {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("{what} out of range")))
}

fn parse_header(bytes: &[u8]) -> Result<Header, FormatError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a binary PNM file"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        m => return Err(bad(format!("unsupported PNM magic P{}", m as char))),
    };
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")? as usize;
    let height = header_number(bytes, &mut pos, "height")? as usize;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(bad(format!("image size {width}x{height} outside 1..={MAX_SIDE}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} outside 1..=65535")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after header"));
    }
    Ok(Header { channels, width, height, maxval, data_start: pos + 1 })
}

/// Decodes to a `(1, channels, h, w)` tensor with values in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    Ok(decode_inner(bytes)?)
}

fn decode_inner(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    let h = parse_header(bytes)?;
    let bps = if h.maxval > 255 { 2 } else { 1 };
    let samples = h.channels * h.width * h.height;
    let needed = samples * bps;
    let available = bytes.len() - h.data_start;
    if available < needed {
        return Err(FormatError::Truncated { offset: h.data_start, needed, available });
    }
    let raw = &bytes[h.data_start..h.data_start + needed];
    let scale = 1.0 / h.maxval as f32;
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 { raw[i] as u32 } else { u16::from_be_bytes([raw[2 * i], raw[2 * i + 1]]) as u32 };
        (v.min(h.maxval)) as f32 * scale
    };
    let plane = h.width * h.height;
    let mut data = vec![0f32; samples];
    for p in 0..plane {
        for c in 0..h.channels {
            data[c * plane + p] = sample(p * h.channels + c);
        }
    }
    Ok(Tensor::new(&[1, h.channels, h.height, h.width], data).expect("rank 4"))
}

/// Encodes a `(1, 3, h, w)` or `(1, 1, h, w)` tensor in `[0, 1]` as 8-bit PNM.
pub fn encode_pnm(img: &Tensor<f32>) -> Vec<u8> {
    let [_, c, h, w] = img.nchw();
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push((img.data()[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Grayscale to RGB, bilinear resize to `size × size`, then `(v − 0.5) / 0.5`.
pub fn preprocess(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = img.nchw();
    let rgb = if c == 1 {
        let plane = h * w;
        let mut data = Vec::with_capacity(3 * plane * n);
        for b in 0..n {
            for _ in 0..3 {
                data.extend_from_slice(&img.data()[b * plane..(b + 1) * plane]);
            }
        }
        Tensor::new(&[n, 3, h, w], data)?
    } else {
        img.clone()
    };
    let resized = ops::bilinear_resize(&rgb, size, size)?;
    Ok(resized.map(|v| (v - 0.5) / 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_with_comment() {
        let mut f = b"P5\n# comment\n2 1\n255\n".to_vec();
        f.extend_from_slice(&[0, 255]);
        let t = decode_pnm(&f).unwrap();
        assert_eq!(t.dims(), &[1, 1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rgb_planes_and_sixteen_bit() {
        let mut f = b"P6 1 1 65535\n".to_vec();
        f.extend_from_slice(&[0xff, 0xff, 0, 0, 0x80, 0x00]);
        let t = decode_pnm(&f).unwrap();
        assert_eq!(t.dims(), &[1, 3, 1, 1]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_pnm(b"P3 1 1 255\n0 0 0").is_err());
        assert!(decode_pnm(b"P5 4 4 255\n\x00").is_err());
        assert!(decode_pnm(b"P5 0 4 255\n").is_err());
        assert!(decode_pnm(b"P6 99999999999 1 255\n").is_err());
    }

    #[test]
    fn encode_round_trip() {
        let img = Tensor::from_fn(&[1, 3, 2, 3], |i| i as f32 / 17.0);
        let back = decode_pnm(&encode_pnm(&img)).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }
}

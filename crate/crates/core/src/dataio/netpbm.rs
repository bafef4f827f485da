//! Binary PPM (`P6`) images and PGM (`P5`) masks, maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::shape("encode_ppm", format!("needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = header("P6", w, h);
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(img.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = header("P5", mask.width(), mask.height());
    out.extend(mask.data().iter().map(|&v| v * 255));
    out
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "netpbm",
        detail: detail.into(),
    }
}

/// Parses the header and returns `(width, height, payload)`.
fn parse<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(malformed(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments to end of line
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("missing header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| malformed("header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing whitespace after maxval"));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(malformed(format!("empty image {w}x{h}")));
    }
    if maxval != 255 {
        return Err(malformed(format!("maxval {maxval} unsupported, expected 255")));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, payload) = parse(bytes, b"P6")?;
    let n = w * h;
    if payload.len() < 3 * n {
        return Err(malformed(format!("truncated payload: {} of {} bytes", payload.len(), 3 * n)));
    }
    let mut data = vec![0.0; 3 * n];
    for (i, px) in payload[..3 * n].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 255.0;
        }
    }
    Image::new(3, h, w, data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let (w, h, payload) = parse(bytes, b"P5")?;
    if payload.len() < w * h {
        return Err(malformed(format!("truncated payload: {} of {} bytes", payload.len(), w * h)));
    }
    Mask::new(h, w, payload[..w * h].iter().map(|&v| (v >= 128) as u8).collect())
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io_error(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io_error(path, e))?)
}

pub fn write_pgm(mask: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)).map_err(|e| Error::io_error(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io_error(path, e))?)
}

/// Writes a grey-level plane scaled from `[lo, hi]` to `[0, 255]`.
pub fn encode_gray(values: &[f64], width: usize, height: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::shape("encode_gray", format!("{} values for {width}x{height}", values.len())));
    }
    let span = hi - lo;
    let mut out = header("P5", width, height);
    out.extend(values.iter().map(|&v| if span > 0.0 { quantize((v - lo) / span) } else { 0 }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_bytes() {
        // pixel (y, x) -> rgb
        let vals = [[0.0, 1.0, 0.2], [0.4, 0.6, 0.8], [1.0, 0.0, 0.0], [0.5, 0.5, 0.5]];
        let mut data = vec![0.0; 12];
        for (i, px) in vals.iter().enumerate() {
            for c in 0..3 {
                data[c * 4 + i] = px[c];
            }
        }
        let img = Image::new(3, 2, 2, data).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let mut expected = b"P6\n2 2\n255\n".to_vec();
        expected.extend([0, 255, 51, 102, 153, 204, 255, 0, 0, 128, 128, 128]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn zero_mask_payload() {
        let bytes = encode_pgm(&Mask::zeros(3, 5));
        let (_, _, payload) = parse(&bytes, b"P5").unwrap();
        assert_eq!(payload, &[0u8; 15]);
    }

    #[test]
    fn comments_and_whitespace() {
        let bytes = b"P5 # made by hand\n# another\n 2\t1\n255\n\x00\xff";
        let m = decode_pgm(bytes).unwrap();
        assert_eq!(m.data(), &[0, 1]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n1\n").is_err());
        assert!(decode_pgm(b"P5\n0 1\n255\n").is_err());
    }

    #[test]
    fn mask_threshold() {
        let m = decode_pgm(b"P5\n3 1\n255\n\x7f\x80\xff").unwrap();
        assert_eq!(m.data(), &[0, 1, 1]);
    }
}

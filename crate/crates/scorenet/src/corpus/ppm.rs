//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Only maxval 255 is supported. Parse failures report the byte offset of
//! the offending input so truncated or hand-edited files are easy to
//! diagnose.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

struct ByteParser<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteParser<'a> {
    fn new(data: &'a [u8]) -> Self {
        ByteParser { data, pos: 0 }
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::format(self.pos, msg))
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.data.len() < magic.len() || &self.data[..magic.len()] != magic {
            return self.fail(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            ));
        }
        self.pos = magic.len();
        Ok(())
    }

    fn skip_separators(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.data.get(self.pos) {
                Some(b' ' | b'\t' | b'\r' | b'\n') => self.pos += 1,
                Some(b'#') => {
                    while !matches!(self.data.get(self.pos), None | Some(b'\n')) {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return self.fail("expected whitespace");
        }
        Ok(())
    }

    fn parse_uint(&mut self) -> Result<usize> {
        let start = self.pos;
        let mut value = 0usize;
        while let Some(&b) = self.data.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .filter(|&v| v <= 1_000_000_000)
                .ok_or_else(|| Error::format(start, "dimension too large"))?;
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected a decimal integer");
        }
        Ok(value)
    }

    /// Header fields end with exactly one whitespace byte before the
    /// binary payload.
    fn expect_single_separator(&mut self) -> Result<()> {
        match self.data.get(self.pos) {
            Some(b' ' | b'\t' | b'\r' | b'\n') => {
                self.pos += 1;
                Ok(())
            }
            _ => self.fail("expected a single whitespace byte before payload"),
        }
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let have = self.data.len() - self.pos;
        if have < len {
            return Err(Error::format(
                self.data.len(),
                format!("truncated payload: need {len} bytes, have {have}"),
            ));
        }
        let out = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

fn parse_header(parser: &mut ByteParser, magic: &[u8]) -> Result<(usize, usize)> {
    parser.expect_magic(magic)?;
    parser.skip_separators()?;
    let width = parser.parse_uint()?;
    parser.skip_separators()?;
    let height = parser.parse_uint()?;
    parser.skip_separators()?;
    let maxval_pos = parser.pos;
    let maxval = parser.parse_uint()?;
    if maxval != 255 {
        return Err(Error::format(maxval_pos, format!("unsupported maxval {maxval}")));
    }
    parser.expect_single_separator()?;
    if width == 0 || height == 0 {
        return Err(Error::format(0, format!("degenerate dimensions {width}x{height}")));
    }
    Ok((width, height))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3xHxW tensor of [0,1] floats as a binary PPM.
pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("ppm needs 3 channels, got {c}")));
    }
    let data = image.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push(quantize(data[ch * h * w + y * w + x]));
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PPM into a 3xHxW tensor of [0,1] floats.
pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let raw = fs::read(path)?;
    let mut parser = ByteParser::new(&raw);
    let (w, h) = parse_header(&mut parser, b"P6")?;
    let payload = parser.payload(3 * w * h)?;
    let mut out = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out[ch * h * w + y * w + x] = payload[(y * w + x) * 3 + ch] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Writes a row-major grayscale byte image as a binary PGM.
pub fn save_pgm(path: &Path, pixels: &[u8], h: usize, w: usize) -> Result<()> {
    if pixels.len() != h * w {
        return Err(Error::shape(format!(
            "pgm payload length {} does not match {h}x{w}",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PGM, returning row-major bytes plus dimensions.
pub fn load_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let raw = fs::read(path)?;
    let mut parser = ByteParser::new(&raw);
    let (w, h) = parse_header(&mut parser, b"P5")?;
    let payload = parser.payload(w * h)?;
    Ok((payload.to_vec(), h, w))
}

/// Reads a PGM mask written by the corpus generator, mapping bytes above
/// 127 to 1 and the rest to 0.
pub fn load_mask_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let (bytes, h, w) = load_pgm(path)?;
    Ok((bytes.iter().map(|&b| (b > 127) as u8).collect(), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_pixel_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.ppm");
        fs::write(&path, b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        let img = load_ppm(&path).unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn save_then_load_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grad.ppm");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| i as f32 / (3.0 * 4.0 * 5.0)).collect();
        let img = Tensor::new(&[3, 4, 5], data.clone()).unwrap();
        save_ppm(&path, &img).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        for (a, b) in back.data().iter().zip(&data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn reference_bytes_decode_to_the_expected_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.ppm");
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[
            255, 0, 0, 0, 255, 0, //
            0, 0, 255, 128, 128, 128,
        ]);
        fs::write(&path, bytes).unwrap();
        let img = load_ppm(&path).unwrap();
        let g = 128.0 / 255.0;
        assert_eq!(
            img.data(),
            &[
                1.0, 0.0, 0.0, g, // red channel
                0.0, 1.0, 0.0, g, // green channel
                0.0, 0.0, 1.0, g, // blue channel
            ]
        );
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P5\n1 1\n255\n\xff").unwrap();
        match load_ppm(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_end_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ppm");
        let bytes = b"P6\n2 2\n255\n\xff\xff".to_vec();
        let len = bytes.len();
        fs::write(&path, bytes).unwrap();
        match load_ppm(&path) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, len);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_maxval_is_rejected_at_its_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("max.ppm");
        fs::write(&path, b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap();
        match load_ppm(&path) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 7);
                assert!(msg.contains("65535"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pgm_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let pixels: Vec<u8> = (0..20).map(|i| (i * 13) as u8).collect();
        save_pgm(&path, &pixels, 4, 5).unwrap();
        let (back, h, w) = load_pgm(&path).unwrap();
        assert_eq!((h, w), (4, 5));
        assert_eq!(back, pixels);
    }

    #[test]
    fn mask_loading_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        save_pgm(&path, &[0, 255, 10, 200], 2, 2).unwrap();
        let (mask, _, _) = load_mask_pgm(&path).unwrap();
        assert_eq!(mask, vec![0, 1, 0, 1]);
    }
}

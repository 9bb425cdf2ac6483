//! Binary Netpbm reading and writing: P6 (8-bit RGB) images and P5 grayscale
//! label maps (8-bit, or 16-bit big-endian when ids exceed 255).
//!
//! Parsing is strict and never panics on malformed input; every error names
//! the byte offset it was detected at.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("{path}: {kind} at byte {offset}")]
    Parse { path: String, kind: String, offset: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_err(path: &str, kind: impl Into<String>, offset: usize) -> NetpbmError {
    NetpbmError::Parse { path: path.into(), kind: kind.into(), offset }
}

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Integer label map; values fit u16 (16-bit maps use big-endian payloads).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) -> Result<(), NetpbmError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize, NetpbmError> {
        self.skip_whitespace_and_comments()?;
        let start = self.pos;
        let mut value: usize = 0;
        let mut digits = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| parse_err(self.path, format!("{what} overflows"), start))?;
            digits += 1;
            self.pos += 1;
        }
        if digits == 0 {
            return Err(parse_err(self.path, format!("expected {what}"), self.pos));
        }
        Ok(value)
    }

    fn expect_single_whitespace(&mut self) -> Result<(), NetpbmError> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(parse_err(self.path, "expected whitespace before payload", self.pos)),
        }
    }
}

const MAX_DIM: usize = 1 << 16;

fn read_header<'a>(
    cur: &mut Cursor<'a>,
    magic: &[u8; 2],
) -> Result<(usize, usize, usize), NetpbmError> {
    if cur.bytes.len() < 2 {
        return Err(parse_err(cur.path, "truncated magic", 0));
    }
    if &cur.bytes[..2] != magic {
        return Err(parse_err(
            cur.path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            0,
        ));
    }
    cur.pos = 2;
    let width = cur.read_number("width")?;
    let height = cur.read_number("height")?;
    let maxval = cur.read_number("maxval")?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(parse_err(cur.path, format!("unreasonable dimensions {width}x{height}"), 2));
    }
    cur.expect_single_whitespace()?;
    Ok((width, height, maxval))
}

/// Parse a binary P6 file (8-bit RGB).
pub fn parse_ppm(bytes: &[u8], path: &str) -> Result<RgbImage, NetpbmError> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let (width, height, maxval) = read_header(&mut cur, b"P6")?;
    if maxval != 255 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}"), cur.pos));
    }
    let need = width * height * 3;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(parse_err(
            path,
            format!("truncated payload: need {need} bytes, have {}", payload.len()),
            cur.pos,
        ));
    }
    Ok(RgbImage { width, height, pixels: payload[..need].to_vec() })
}

/// Parse a binary P5 file; maxval 255 reads one byte per label, larger
/// maxvals (≤ 65535) read big-endian u16.
pub fn parse_pgm(bytes: &[u8], path: &str) -> Result<LabelMap, NetpbmError> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let (width, height, maxval) = read_header(&mut cur, b"P5")?;
    let n = width * height;
    let payload = &bytes[cur.pos..];
    let labels = if maxval == 255 {
        if payload.len() < n {
            return Err(parse_err(
                path,
                format!("truncated payload: need {n} bytes, have {}", payload.len()),
                cur.pos,
            ));
        }
        payload[..n].iter().map(|&b| b as u16).collect()
    } else if maxval <= 65535 {
        if payload.len() < 2 * n {
            return Err(parse_err(
                path,
                format!("truncated payload: need {} bytes, have {}", 2 * n, payload.len()),
                cur.pos,
            ));
        }
        (0..n).map(|i| u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]])).collect()
    } else {
        return Err(parse_err(path, format!("unsupported maxval {maxval}"), cur.pos));
    };
    Ok(LabelMap { width, height, labels })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Encodes 8-bit when every label fits a byte, 16-bit big-endian otherwise.
pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let wide = map.labels.iter().any(|&v| v > 255);
    let maxval = if wide { 65535 } else { 255 };
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, maxval).into_bytes();
    if wide {
        for &v in &map.labels {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(map.labels.iter().map(|&v| v as u8));
    }
    out
}

pub fn write_ppm(path: &std::path::Path, img: &RgbImage) -> Result<(), NetpbmError> {
    std::fs::write(path, encode_ppm(img))
        .map_err(|source| NetpbmError::Io { path: path.display().to_string(), source })
}

pub fn write_pgm(path: &std::path::Path, map: &LabelMap) -> Result<(), NetpbmError> {
    std::fs::write(path, encode_pgm(map))
        .map_err(|source| NetpbmError::Io { path: path.display().to_string(), source })
}

pub fn read_ppm(path: &std::path::Path) -> Result<RgbImage, NetpbmError> {
    let bytes = std::fs::read(path)
        .map_err(|source| NetpbmError::Io { path: path.display().to_string(), source })?;
    parse_ppm(&bytes, &path.display().to_string())
}

pub fn read_pgm(path: &std::path::Path) -> Result<LabelMap, NetpbmError> {
    let bytes = std::fs::read(path)
        .map_err(|source| NetpbmError::Io { path: path.display().to_string(), source })?;
    parse_pgm(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_white_pixel_ppm() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let img = parse_ppm(bytes, "t").unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.pixels, vec![255, 255, 255]);
    }

    #[test]
    fn pgm_value_seven() {
        let bytes = b"P5\n2 1\n255\n\x07\x03";
        let map = parse_pgm(bytes, "t").unwrap();
        assert_eq!(map.labels, vec![7, 3]);
    }

    #[test]
    fn pgm_sixteen_bit_roundtrip() {
        let map = LabelMap { width: 2, height: 1, labels: vec![300, 7] };
        let bytes = encode_pgm(&map);
        let back = parse_pgm(&bytes, "t").unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn comments_and_whitespace_tolerated() {
        let bytes = b"P6 # a comment\n# another\n 2\t1 \n255\nabcdef";
        let img = parse_ppm(bytes, "t").unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, b"abcdef".to_vec());
    }

    #[test]
    fn errors_name_byte_offsets() {
        let err = parse_ppm(b"P5\n1 1\n255\nx", "t").unwrap_err();
        assert!(matches!(err, NetpbmError::Parse { offset: 0, .. }), "{err}");

        let err = parse_ppm(b"P6\n2 2\n255\nxx", "t").unwrap_err();
        match err {
            NetpbmError::Parse { kind, offset, .. } => {
                assert!(kind.contains("truncated"));
                assert_eq!(offset, 11);
            }
            other => panic!("unexpected {other}"),
        }

        let err = parse_ppm(b"P6\n1 1\n65535\nxx", "t").unwrap_err();
        match err {
            NetpbmError::Parse { kind, .. } => assert!(kind.contains("unsupported maxval")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn fuzzed_headers_error_without_crashing() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(900);
        let good = encode_ppm(&RgbImage { width: 3, height: 2, pixels: vec![9; 18] });
        for _ in 0..300 {
            let mut bytes = good.clone();
            match rng.random_range(0..3) {
                0 => {
                    // mutate one header byte
                    let i = rng.random_range(0..10usize);
                    bytes[i] = rng.random_range(0..=255u8);
                }
                1 => {
                    // truncate anywhere
                    let len = rng.random_range(0..bytes.len());
                    bytes.truncate(len);
                }
                _ => {
                    // splice garbage into the header
                    let i = rng.random_range(0..8usize);
                    bytes.insert(i, rng.random_range(0..=255u8));
                }
            }
            // must return Ok or Err, never panic; mutated output may still
            // parse when the mutation lands in the payload
            let _ = parse_ppm(&bytes, "fuzz");
        }
    }
}

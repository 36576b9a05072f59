//! Binary (`P5`) PGM images, 8- or 16-bit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn encode_pgm(img: &PgmImage) -> Result<Vec<u8>> {
    if img.maxval == 0 {
        return Err(Error::Pgm("maxval must be positive".into()));
    }
    if img.samples.len() != img.width * img.height {
        return Err(Error::Pgm(format!(
            "{}x{} image given {} samples",
            img.width,
            img.height,
            img.samples.len()
        )));
    }
    if let Some(s) = img.samples.iter().find(|&&s| s > img.maxval) {
        return Err(Error::Pgm(format!("sample {s} exceeds maxval {}", img.maxval)));
    }
    let wide = img.maxval > 255;
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.reserve(img.samples.len() * if wide { 2 } else { 1 });
    for &s in &img.samples {
        if wide {
            out.extend_from_slice(&s.to_be_bytes());
        } else {
            out.push(s as u8);
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Pgm(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Pgm(format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<PgmImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Pgm("bad magic (expected P5)".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Pgm(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::Pgm("header not terminated by whitespace".into())),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Pgm("image too large".into()))?;
    let depth = if maxval > 255 { 2 } else { 1 };
    let payload = &bytes[h.pos..];
    if payload.len() < n * depth {
        return Err(Error::Pgm(format!(
            "truncated payload: {} of {} bytes",
            payload.len(),
            n * depth
        )));
    }
    let samples: Vec<u16> = if depth == 2 {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        payload[..n].iter().map(|&b| b as u16).collect()
    };
    if let Some(s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(Error::Pgm(format!("sample {s} exceeds maxval {maxval}")));
    }
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

/// 16-bit PGM of values in `[0, 1]`; each sample is `round(v * 65535)`.
pub fn encode_pgm16(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    let samples = values
        .iter()
        .map(|&v| {
            if (0.0..=1.0).contains(&v) {
                Ok((v * 65535.0).round() as u16)
            } else {
                Err(Error::Pgm(format!("value {v} outside [0, 1]")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    encode_pgm(&PgmImage {
        width,
        height,
        maxval: 65535,
        samples,
    })
}

/// Inverse of [`encode_pgm16`]: `(width, height, values)`.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let img = decode_pgm(bytes)?;
    if img.maxval != 65535 {
        return Err(Error::Pgm(format!("expected maxval 65535, found {}", img.maxval)));
    }
    let values = img
        .samples
        .iter()
        .map(|&s| s as f64 / 65535.0)
        .collect();
    Ok((img.width, img.height, values))
}

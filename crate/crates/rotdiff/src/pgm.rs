//! Binary PGM (P5) images, 8 and 16 bits per sample.
//!
//! 8-bit files hold grey values in `[0, 255]`. 16-bit files carry an affine
//! encoding `stored = round((value + offset) * steps)` announced in a header
//! comment (`# rotdiff-encoding offset=<f64> steps=<f64>`); files without the
//! comment are read with `offset = 0` and `steps = 65535 / 255`, so a plain
//! 16-bit PGM spans the same grey range as an 8-bit one.

use std::fs;
use std::io::Write;
use std::path::Path;

use rotdiff_core::ImageGrid;

use crate::error::{CliError, CliResult};

const ENCODING_TAG: &str = "rotdiff-encoding";

/// Affine mapping between real grey values and 16-bit samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoding16 {
    pub offset: f64,
    pub steps: f64,
}

impl Encoding16 {
    /// `[0, 255]` spread over the full 16-bit range.
    pub const GREY: Self = Self {
        offset: 0.0,
        steps: 65535.0 / 255.0,
    };

    /// `[-768, 1280)` in steps of `1/32`, for unclipped noisy images.
    pub const EXTENDED: Self = Self {
        offset: 768.0,
        steps: 32.0,
    };

    pub fn encode(&self, v: f64) -> u16 {
        ((v + self.offset) * self.steps).round().clamp(0.0, 65535.0) as u16
    }

    pub fn decode(&self, s: u16) -> f64 {
        s as f64 / self.steps - self.offset
    }

    fn is_grey(&self) -> bool {
        *self == Self::GREY
    }
}

/// Sample depth of a file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Depth {
    Eight,
    Sixteen(Encoding16),
}

/// Values are clamped to `[0, 255]` and rounded half away from zero.
pub fn to_u8(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

pub fn encode(img: &ImageGrid, depth: Depth) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.len() * 2 + 64);
    let maxval = match depth {
        Depth::Eight => 255,
        Depth::Sixteen(_) => 65535,
    };
    writeln!(out, "P5").unwrap();
    if let Depth::Sixteen(enc) = depth {
        if !enc.is_grey() {
            writeln!(out, "# {ENCODING_TAG} offset={} steps={}", enc.offset, enc.steps).unwrap();
        }
    }
    write!(out, "{} {}\n{}\n", img.width(), img.height(), maxval).unwrap();
    match depth {
        Depth::Eight => out.extend(img.values().iter().map(|&v| to_u8(v))),
        Depth::Sixteen(enc) => {
            for &v in img.values() {
                out.extend_from_slice(&enc.encode(v).to_be_bytes());
            }
        }
    }
    out
}

pub fn write(path: &Path, img: &ImageGrid, depth: Depth) -> CliResult<()> {
    fs::write(path, encode(img, depth)).map_err(|e| CliError::io(path, e))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    encoding: Option<Encoding16>,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) -> Result<(), String> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    let end = self.bytes[self.pos..]
                        .iter()
                        .position(|&b| b == b'\n')
                        .map(|i| self.pos + i)
                        .unwrap_or(self.bytes.len());
                    let line = String::from_utf8_lossy(&self.bytes[self.pos + 1..end]).trim().to_string();
                    if let Some(rest) = line.strip_prefix(ENCODING_TAG) {
                        self.encoding = Some(parse_encoding(rest)?);
                    }
                    self.pos = end;
                }
                _ => return Ok(()),
            }
        }
    }

    fn number(&mut self) -> Result<usize, String> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected a number at byte {start}"))
    }
}

fn parse_encoding(rest: &str) -> Result<Encoding16, String> {
    let mut offset = None;
    let mut steps = None;
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| format!("bad encoding field `{field}`"))?;
        let v: f64 = v.parse().map_err(|_| format!("bad encoding value `{v}`"))?;
        match k {
            "offset" => offset = Some(v),
            "steps" => steps = Some(v),
            _ => return Err(format!("unknown encoding field `{k}`")),
        }
    }
    match (offset, steps) {
        (Some(offset), Some(steps)) if steps > 0.0 => Ok(Encoding16 { offset, steps }),
        _ => Err("encoding needs offset and a positive steps value".into()),
    }
}

/// Parses a P5 file, returning the image and its depth.
pub fn decode(bytes: &[u8]) -> Result<(ImageGrid, Depth), String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let mut h = Header {
        bytes,
        pos: 2,
        encoding: None,
    };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    // exactly one whitespace byte separates the header from the samples
    if !h.bytes.get(h.pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing whitespace after maxval".into());
    }
    h.pos += 1;
    let data = &bytes[h.pos..];
    let n = width * height;
    let (values, depth) = match maxval {
        1..=255 => {
            if data.len() < n {
                return Err(format!("expected {n} samples, found {}", data.len()));
            }
            let scale = 255.0 / maxval as f64;
            (data[..n].iter().map(|&b| b as f64 * scale).collect::<Vec<_>>(), Depth::Eight)
        }
        256..=65535 => {
            if data.len() < 2 * n {
                return Err(format!("expected {} bytes of samples, found {}", 2 * n, data.len()));
            }
            let enc = h.encoding.unwrap_or(Encoding16 {
                offset: 0.0,
                steps: maxval as f64 / 255.0,
            });
            let values = data[..2 * n]
                .chunks_exact(2)
                .map(|c| enc.decode(u16::from_be_bytes([c[0], c[1]])))
                .collect();
            (values, Depth::Sixteen(enc))
        }
        _ => return Err(format!("unsupported maxval {maxval}")),
    };
    let img = ImageGrid::new(width, height, values).map_err(|e| e.to_string())?;
    Ok((img, depth))
}

pub fn read(path: &Path) -> CliResult<(ImageGrid, Depth)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|msg| CliError::Format {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageGrid {
        ImageGrid::new(3, 3, vec![-4.0, 0.5, 1.49, 254.5, 300.0, 2.5, 0.0, 7.0, 128.2]).unwrap()
    }

    #[test]
    fn eight_bit_clamps_and_rounds_half_away() {
        let (img, depth) = decode(&encode(&sample(), Depth::Eight)).unwrap();
        assert_eq!(depth, Depth::Eight);
        assert_eq!(img.values(), &[0.0, 1.0, 1.0, 255.0, 255.0, 3.0, 0.0, 7.0, 128.0]);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&ImageGrid::constant(4, 3, 9.0).unwrap(), Depth::Eight);
        assert_eq!(&bytes[..11], b"P5\n4 3\n255\n");
        assert_eq!(bytes.len(), 11 + 12);
    }

    #[test]
    fn extended_sixteen_bit_keeps_out_of_range_values() {
        let (img, depth) = decode(&encode(&sample(), Depth::Sixteen(Encoding16::EXTENDED))).unwrap();
        assert_eq!(depth, Depth::Sixteen(Encoding16::EXTENDED));
        for (a, b) in img.values().iter().zip(sample().values()) {
            assert!((a - b).abs() <= 0.5 / 32.0);
        }
        assert_eq!(img.get(0, 0), -4.0);
        assert_eq!(img.get(1, 1), 300.0);
    }

    #[test]
    fn values_on_the_storage_grid_round_trip_exactly() {
        let img = ImageGrid::from_fn(5, 4, |x, y| (x as f64 * 37.0 - y as f64 * 91.0) / 32.0).unwrap();
        let (back, _) = decode(&encode(&img, Depth::Sixteen(Encoding16::EXTENDED))).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn plain_sixteen_bit_spans_the_grey_range() {
        let img = ImageGrid::from_fn(3, 3, |x, _| [0.0, 255.0, 300.0][x]).unwrap();
        let bytes = encode(&img, Depth::Sixteen(Encoding16::GREY));
        assert!(!String::from_utf8_lossy(&bytes).contains(ENCODING_TAG));
        let (back, _) = decode(&bytes).unwrap();
        assert_eq!(back.row(2), &[0.0, 255.0, 255.0]);
    }

    #[test]
    fn comments_and_foreign_headers_are_accepted() {
        let mut bytes = b"P5\n# made elsewhere\n3 3\n# another\n15\n".to_vec();
        bytes.extend_from_slice(&[0, 15, 5, 0, 15, 5, 0, 15, 5]);
        let (img, _) = decode(&bytes).unwrap();
        assert_eq!(img.row(1), &[0.0, 255.0, 85.0]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(decode(b"P2\n3 3\n255\n").is_err());
        assert!(decode(b"P5\n3 3\n255\n\x00\x01").is_err());
        assert!(decode(b"P5\n3 3\n0\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00\x00\x00\x00").is_err());
    }
}

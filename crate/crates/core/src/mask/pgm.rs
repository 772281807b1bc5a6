//! Binary PGM (`P5`) reading and writing.

use std::fs;
use std::path::Path;

use super::BinaryMask;
use crate::error::{Error, Result};

/// Grayscale image with 8-bit samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Pixel values scaled by 255 and rounded, clamped to `[0, 255]`.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Validation(format!("{} values for {width}×{height}", values.len())));
        }
        let pixels = values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse {
                    offset: pos,
                    message: "truncated PGM header".into(),
                });
            }
            fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        if fields[0].1 != "P5" {
            return Err(Error::Parse {
                offset: 0,
                message: format!("expected P5 magic, found {:?}", fields[0].1),
            });
        }
        let num = |(off, s): &(usize, String)| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                offset: *off,
                message: format!("invalid PGM header number {s:?}"),
            })
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Parse {
                offset: fields[3].0,
                message: format!("only maxval 255 is supported, found {maxval}"),
            });
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let n = width * height;
        if bytes.len() < pos + n {
            return Err(Error::Parse {
                offset: bytes.len(),
                message: format!("PGM raster needs {n} bytes"),
            });
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + n].to_vec(),
        })
    }
}

pub fn mask_to_pgm(m: &BinaryMask) -> Vec<u8> {
    GrayImage {
        width: m.width(),
        height: m.height(),
        pixels: m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
    .encode()
}

/// Foreground is any non-zero sample.
pub fn mask_from_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let img = GrayImage::decode(bytes)?;
    BinaryMask::from_bits(img.width, img.height, img.pixels.iter().map(|&p| p > 0).collect())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    mask_from_pgm(&bytes)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    fs::write(path, mask_to_pgm(m)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let m = BinaryMask::rect(5, 3, 1, 1, 4, 2);
        assert_eq!(mask_from_pgm(&mask_to_pgm(&m)).unwrap(), m);
        let mut with_comment = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        with_comment.extend_from_slice(&[0, 255]);
        assert_eq!(mask_from_pgm(&with_comment).unwrap().bits(), &[false, true]);
    }

    #[test]
    fn rejects_ascii_pgm() {
        assert!(matches!(mask_from_pgm(b"P2\n1 1\n255\n0"), Err(Error::Parse { .. })));
    }
}

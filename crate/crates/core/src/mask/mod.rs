//! Binary masks, morphology and on-disk mask formats.

pub mod morph;
pub mod pgm;
pub mod rle;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rle::Rle;

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Validation(format!(
                "{} bits for a {width}×{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    /// `f(x, y)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self { width, height, bits }
    }

    /// Foreground where `values > threshold`; `values` is row-major `height×width`.
    pub fn threshold(width: usize, height: usize, values: &[f64], threshold: f64) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Validation(format!(
                "{} values for a {width}×{height} mask",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits: values.iter().map(|&v| v > threshold).collect(),
        })
    }

    /// Axis-aligned filled rectangle `[x1, x2) × [y1, y2)`, clipped to the raster.
    pub fn rect(width: usize, height: usize, x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self::from_fn(width, height, |x, y| x >= x1 && x < x2 && y >= y1 && y < y2)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn area_ratio(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.area() as f64 / self.bits.len() as f64
        }
    }

    /// Values as `0.0` / `1.0`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::dim(
                op,
                format!("{}×{} vs {}×{}", self.width, self.height, other.width, other.height),
            ))
        }
    }

    fn zip_with(&self, other: &BinaryMask, op: &'static str, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_dims(other, op)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, "mask union", |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, "mask intersection", |a, b| a && b)
    }

    /// Pixels of `self` not in `other`.
    pub fn difference(&self, other: &BinaryMask) -> Result<Self> {
        self.zip_with(other, "mask difference", |a, b| a && !b)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// `(|A∩B|, |A∪B|)`.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(u64, u64)> {
        self.check_dims(other, "mask overlap")?;
        let (mut i, mut u) = (0u64, 0u64);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            i += u64::from(a && b);
            u += u64::from(a || b);
        }
        Ok((i, u))
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        let (i, u) = self.overlap_counts(other)?;
        Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.check_dims(other, "mask subset")?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    /// Tight pixel box `[x_min, y_min, x_max + 1, y_max + 1]`, or `None` when empty.
    pub fn bbox(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &v)| v) {
            let (x, y) = (i % self.width, i / self.width);
            b = Some(match b {
                None => [x, y, x + 1, y + 1],
                Some([x1, y1, x2, y2]) => [x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1)],
            });
        }
        b
    }
}

/// Do two half-open pixel boxes share at least one pixel?
pub fn boxes_intersect(a: [usize; 4], b: [usize; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// A mask given inline as RLE or as a path to a PGM (or RLE `.json`) file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskRef {
    Path(String),
    Rle(Rle),
}

impl MaskRef {
    /// Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<BinaryMask> {
        match self {
            MaskRef::Rle(r) => rle::decode(r),
            MaskRef::Path(p) => {
                let path = base.join(p);
                if path.extension().is_some_and(|e| e == "json") {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    rle::decode(&serde_json::from_str(&text)?)
                } else {
                    pgm::read_mask(&path)
                }
            }
        }
    }
}

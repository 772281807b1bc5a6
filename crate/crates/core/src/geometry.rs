//! Normalized boxes, their Fourier encodings and the soft box gate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph;
use crate::tensor::Tensor;

/// Smallest extent an enlarged box may collapse to after clamping.
pub const MIN_BOX_EXTENT: f64 = 1e-4;
pub const DEFAULT_ENLARGE_RATIO: f64 = 0.15;
pub const DEFAULT_GATE_ALPHA: f64 = 20.0;

/// Axis-aligned box in normalized image coordinates, `0 <= x1 < x2 <= 1`
/// and likewise for `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && x2 <= 1.0
            && y2 <= 1.0
            && x1 < x2
            && y1 < y2;
        if !ok {
            return Err(Error::Validation(format!(
                "degenerate or out-of-range box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Normalizes a pixel-space box against an image of `width × height`,
    /// clamping to the image.
    pub fn from_pixels(px: [f64; 4], width: usize, height: usize) -> Result<Self> {
        let (w, h) = (width as f64, height as f64);
        Self::new(
            (px[0] / w).clamp(0.0, 1.0),
            (px[1] / h).clamp(0.0, 1.0),
            (px[2] / w).clamp(0.0, 1.0),
            (px[3] / h).clamp(0.0, 1.0),
        )
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        rect_iou(self.to_array(), other.to_array())
    }

    /// Tight box containing every input box.
    pub fn hull(boxes: &[BBox]) -> Result<BBox> {
        let first = boxes
            .first()
            .ok_or_else(|| Error::Validation("at least one box is required".into()))?;
        let mut h = *first;
        for b in &boxes[1..] {
            h.x1 = h.x1.min(b.x1);
            h.y1 = h.y1.min(b.y1);
            h.x2 = h.x2.max(b.x2);
            h.y2 = h.y2.max(b.y2);
        }
        Ok(h)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection-over-union of two `[x1, y1, x2, y2]` rectangles in any unit.
/// Empty union yields 0.
pub fn rect_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub num_frequencies: usize,
}

impl Default for FourierConfig {
    fn default() -> Self {
        Self { num_frequencies: 8 }
    }
}

/// `[sin(2^k·π·v) for k in 0..F] ++ [cos(2^k·π·v) for k in 0..F]`.
pub fn fourier_encode(v: f64, cfg: FourierConfig) -> Vec<f64> {
    let freqs = (0..cfg.num_frequencies).map(|k| (1u64 << k) as f64 * PI * v);
    let mut out: Vec<f64> = freqs.clone().map(f64::sin).collect();
    out.extend(freqs.map(f64::cos));
    out
}

/// Scalar fed to the Fourier encoder for a box extent: `0.2·ln(extent) + 0.5`.
pub fn log_extent(extent: f64) -> f64 {
    0.2 * extent.ln() + 0.5
}

/// `γ(x1) ⊕ γ(y1) ⊕ γ(0.2·ln w + 0.5) ⊕ γ(0.2·ln h + 0.5)`, length `8F`.
pub fn encode_box(b: &BBox, cfg: FourierConfig) -> Result<Vec<f64>> {
    if cfg.num_frequencies == 0 {
        return Err(Error::Config("Fourier encoding needs at least one frequency".into()));
    }
    let (w, h) = (b.width(), b.height());
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::Validation(format!("degenerate box extent {w}×{h}")));
    }
    let mut out = fourier_encode(b.x1, cfg);
    out.extend(fourier_encode(b.y1, cfg));
    out.extend(fourier_encode(log_extent(w), cfg));
    out.extend(fourier_encode(log_extent(h), cfg));
    Ok(out)
}

/// Grows the box by `ratio` of its width and height about its center, then
/// clamps it to the unit square.
pub fn enlarge_box(b: &BBox, ratio: f64) -> BBox {
    let ratio = ratio.max(0.0);
    let dx = b.width() * ratio / 2.0;
    let dy = b.height() * ratio / 2.0;
    let (x1, x2) = clamp_span(b.x1 - dx, b.x2 + dx);
    let (y1, y2) = clamp_span(b.y1 - dy, b.y2 + dy);
    BBox { x1, y1, x2, y2 }
}

fn clamp_span(lo: f64, hi: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
    if hi - lo < MIN_BOX_EXTENT {
        let c = ((lo + hi) / 2.0).clamp(MIN_BOX_EXTENT / 2.0, 1.0 - MIN_BOX_EXTENT / 2.0);
        lo = c - MIN_BOX_EXTENT / 2.0;
        hi = c + MIN_BOX_EXTENT / 2.0;
    }
    (lo, hi)
}

/// Soft gate rasterized on an `H×W` grid of pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GateField {
    pub values: Tensor,
    pub alpha: f64,
    pub enlargement_ratio: f64,
}

impl GateField {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values.data()[row * self.width() + col]
    }
}

/// `M(x,y) = σ(α(x−x1))·σ(α(x2−x))·σ(α(y−y1))·σ(α(y2−y))` for an already
/// enlarged box.
pub fn soft_box_gate(b: &BBox, height: usize, width: usize, alpha: f64) -> Result<GateField> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::Config(format!("gate sharpness must be positive, got {alpha}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Validation("gate raster must be non-empty".into()));
    }
    let r = graph::gate_field(b.x1, b.y1, b.x2, b.y2, height, width, alpha);
    Ok(GateField {
        values: Tensor::from_kernel("soft_box_gate", vec![height, width], r.values)?,
        alpha,
        enlargement_ratio: 0.0,
    })
}

/// Enlarges every box by `ratio`, rasterizes its gate and merges them.
pub fn boxes_gate(boxes: &[BBox], height: usize, width: usize, alpha: f64, ratio: f64) -> Result<GateField> {
    let gates = boxes
        .iter()
        .map(|b| {
            soft_box_gate(&enlarge_box(b, ratio), height, width, alpha).map(|mut g| {
                g.enlargement_ratio = ratio;
                g
            })
        })
        .collect::<Result<Vec<_>>>()?;
    merge_gates(&gates)
}

/// Pointwise maximum of gates sharing one raster.
pub fn merge_gates(gates: &[GateField]) -> Result<GateField> {
    let first = gates
        .first()
        .ok_or_else(|| Error::Validation("cannot merge an empty set of gates".into()))?;
    let mut data = first.values.data().to_vec();
    for g in &gates[1..] {
        if g.values.shape() != first.values.shape() {
            return Err(Error::dim("merge_gates", "gates must share a raster"));
        }
        for (d, v) in data.iter_mut().zip(g.values.data()) {
            *d = d.max(*v);
        }
    }
    Ok(GateField {
        values: Tensor::from_kernel("merge_gates", first.values.shape().to_vec(), data)?,
        alpha: first.alpha,
        enlargement_ratio: first.enlargement_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn fourier_at_zero_and_one() {
        let cfg = FourierConfig { num_frequencies: 4 };
        let z = fourier_encode(0.0, cfg);
        assert_eq!(&z[..4], &[0.0; 4]);
        assert_eq!(&z[4..], &[1.0; 4]);
        let one = fourier_encode(1.0, cfg);
        assert!(one[0].abs() < 1e-15);
        assert!((one[4] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn encode_box_lengths_and_log_block() {
        for f in [4, 8, 16] {
            let cfg = FourierConfig { num_frequencies: f };
            assert_eq!(encode_box(&bx(0.1, 0.1, 0.5, 0.6), cfg).unwrap().len(), 8 * f);
        }
        let cfg = FourierConfig { num_frequencies: 3 };
        let e = encode_box(&bx(0.0, 0.2, 1.0, 0.7), cfg).unwrap();
        assert_eq!(&e[12..18], fourier_encode(0.5, cfg).as_slice());
        let w = (-2.5f64).exp();
        assert!(log_extent(w).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(0.5, 0.1, 0.5, 0.4).is_err());
        assert!(BBox::new(0.1, 0.1, 1.2, 0.4).is_err());
        assert!(BBox::new(-0.1, 0.1, 0.2, 0.4).is_err());
    }

    #[test]
    fn enlarge_worked_cases() {
        let e = enlarge_box(&bx(0.2, 0.2, 0.8, 0.8), 0.15);
        for (v, want) in e.to_array().iter().zip([0.155, 0.155, 0.845, 0.845]) {
            assert!((v - want).abs() < 1e-12);
        }
        let b = bx(0.3, 0.1, 0.45, 0.9);
        assert_eq!(enlarge_box(&b, 0.0), b);
        assert_eq!(enlarge_box(&bx(0.0, 0.0, 1.0, 1.0), 0.15).to_array(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn tiny_box_keeps_minimum_extent() {
        let b = bx(0.99999, 0.5, 1.0, 0.500001);
        let e = enlarge_box(&b, 0.15);
        assert!(e.width() >= MIN_BOX_EXTENT * 0.999 && e.height() >= MIN_BOX_EXTENT * 0.999);
        assert!(e.x2() <= 1.0);
    }

    #[test]
    fn merge_rejects_empty_and_is_identity_on_one() {
        assert!(merge_gates(&[]).is_err());
        let g = soft_box_gate(&bx(0.1, 0.2, 0.6, 0.7), 8, 8, 20.0).unwrap();
        assert_eq!(merge_gates(&[g.clone()]).unwrap(), g);
    }

    #[test]
    fn rect_iou_half_overlap() {
        assert_eq!(rect_iou([0.0, 0.0, 1.0, 1.0], [0.5, 0.0, 1.0, 1.0]), 0.5);
        assert_eq!(rect_iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::rect_iou;
use crate::mask::morph::{close, components, dilate, fill_holes, open, remove_small_components};
use crate::mask::{boxes_intersect, BinaryMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Smallest kept fragment, as a fraction of the image area.
    pub min_fragment_ratio: f64,
    pub iof_threshold: f64,
    pub recovery_dilation_px: usize,
    /// Components below this fraction of the largest one are dropped.
    pub cc_keep_ratio: f64,
    /// Radius of the square structuring element (1 → 3×3).
    pub morph_radius: usize,
    pub area_drop_fallback_ratio: f64,
    pub dedup_box_iou: f64,
    pub dedup_mask_iou: f64,
    pub saliency_min_area_ratio: f64,
    pub verify_iou_threshold: f64,
    /// When set, candidates whose label is absent are rejected up front.
    pub label_allowlist: Option<Vec<String>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            min_fragment_ratio: 5e-4,
            iof_threshold: 0.7,
            recovery_dilation_px: 3,
            cc_keep_ratio: 0.05,
            morph_radius: 1,
            area_drop_fallback_ratio: 0.5,
            dedup_box_iou: 0.9,
            dedup_mask_iou: 0.85,
            saliency_min_area_ratio: 0.002,
            verify_iou_threshold: 0.8,
            label_allowlist: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("min_fragment_ratio", self.min_fragment_ratio),
            ("iof_threshold", self.iof_threshold),
            ("cc_keep_ratio", self.cc_keep_ratio),
            ("area_drop_fallback_ratio", self.area_drop_fallback_ratio),
            ("dedup_box_iou", self.dedup_box_iou),
            ("dedup_mask_iou", self.dedup_mask_iou),
            ("saliency_min_area_ratio", self.saliency_min_area_ratio),
            ("verify_iou_threshold", self.verify_iou_threshold),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// `|coarse ∩ fragment| / |fragment|`, zero for an empty fragment.
pub fn iof(coarse: &BinaryMask, fragment: &BinaryMask) -> Result<f64> {
    let inter = coarse.intersection(fragment)?.area();
    let area = fragment.area();
    Ok(if area == 0 { 0.0 } else { inter as f64 / area as f64 })
}

/// Indices of fragments large enough and whose box meets the coarse mask's box.
pub fn prefilter_fragments(fragments: &[BinaryMask], coarse: &BinaryMask, cfg: &FusionConfig) -> Result<Vec<usize>> {
    let min_area = cfg.min_fragment_ratio * coarse.len() as f64;
    let coarse_box = coarse.bbox();
    let mut kept = Vec::new();
    for (i, f) in fragments.iter().enumerate() {
        if !f.same_dims(coarse) {
            return Err(Error::dim(
                "prefilter_fragments",
                format!("fragment {i} is {}×{}, coarse is {}×{}", f.width(), f.height(), coarse.width(), coarse.height()),
            ));
        }
        if (f.area() as f64) < min_area {
            continue;
        }
        match (f.bbox(), coarse_box) {
            (Some(fb), Some(cb)) if boxes_intersect(fb, cb) => kept.push(i),
            _ => {}
        }
    }
    Ok(kept)
}

/// Union of fragments with IoF ≥ τ, plus every component of the uncovered
/// coarse region that lies within the recovery radius of that union.
pub fn build_entity_mask(coarse: &BinaryMask, fragments: &[BinaryMask], cfg: &FusionConfig) -> Result<BinaryMask> {
    let mut merged = BinaryMask::empty(coarse.width(), coarse.height());
    for f in fragments {
        if iof(coarse, f)? >= cfg.iof_threshold {
            merged = merged.union(f)?;
        }
    }
    if merged.is_empty() {
        return Ok(merged);
    }
    let reach = dilate(&merged, cfg.recovery_dilation_px);
    let uncovered = coarse.difference(&merged)?;
    for comp in components(&uncovered) {
        if comp.iter().any(|&i| reach.bits()[i]) {
            for i in comp {
                merged.set(i % coarse.width(), i / coarse.width(), true);
            }
        }
    }
    Ok(merged)
}

fn clean_once(m: &BinaryMask, cfg: &FusionConfig) -> BinaryMask {
    let filled = fill_holes(m);
    let cleaned = close(&open(&filled, cfg.morph_radius), cfg.morph_radius);
    remove_small_components(&cleaned, cfg.cc_keep_ratio)
}

const POSTPROCESS_MAX_ROUNDS: usize = 32;

/// Hole filling, opening, closing and the small-component filter, repeated
/// until the mask stops changing. Returns the mask and whether the input was
/// empty (in which case it is returned unchanged).
pub fn postprocess_mask(mask: &BinaryMask, cfg: &FusionConfig) -> (BinaryMask, bool) {
    if mask.is_empty() {
        log::warn!("postprocess received an empty mask");
        return (mask.clone(), true);
    }
    let mut cur = clean_once(mask, cfg);
    for _ in 1..POSTPROCESS_MAX_ROUNDS {
        let next = clean_once(&cur, cfg);
        if next == cur {
            break;
        }
        cur = next;
    }
    (cur, false)
}

/// Coarse mask when the refined one lost too much area.
pub fn apply_fallback(coarse: &BinaryMask, refined: &BinaryMask, cfg: &FusionConfig) -> (BinaryMask, bool) {
    if (refined.area() as f64) < cfg.area_drop_fallback_ratio * coarse.area() as f64 {
        (coarse.clone(), true)
    } else {
        (refined.clone(), false)
    }
}

/// What deduplication needs to know about one candidate.
#[derive(Debug, Clone, Copy)]
pub struct DedupItem<'a> {
    pub mask: &'a BinaryMask,
    /// Pixel box `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
}

/// Survivor flags, in input order. Candidates are visited by descending mask
/// area with ties in input order.
pub fn dedup_candidates(items: &[DedupItem<'_>], cfg: &FusionConfig) -> Result<Vec<bool>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(items[i].mask.area()));
    let mut survivors: Vec<usize> = Vec::new();
    let mut keep = vec![false; items.len()];
    for i in order {
        let mut dup = false;
        for &s in &survivors {
            if rect_iou(items[i].bbox, items[s].bbox) > cfg.dedup_box_iou
                || items[i].mask.iou(items[s].mask)? > cfg.dedup_mask_iou
            {
                dup = true;
                break;
            }
        }
        if !dup {
            survivors.push(i);
            keep[i] = true;
        }
    }
    Ok(keep)
}

/// Keep when the mask covers at least the configured fraction of the image.
pub fn saliency_filter(mask: &BinaryMask, cfg: &FusionConfig) -> bool {
    mask.area_ratio() >= cfg.saliency_min_area_ratio
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iof_is_fragment_normalized() {
        let coarse = BinaryMask::rect(8, 8, 0, 0, 3, 8);
        let frag = BinaryMask::rect(8, 8, 2, 0, 4, 2);
        assert_eq!(iof(&coarse, &frag).unwrap(), 0.5);
        assert_eq!(iof(&coarse, &BinaryMask::empty(8, 8)).unwrap(), 0.0);
    }

    #[test]
    fn fallback_threshold() {
        let cfg = FusionConfig::default();
        let coarse = BinaryMask::rect(10, 10, 0, 0, 10, 10);
        let refined = BinaryMask::rect(10, 10, 0, 0, 7, 7);
        assert_eq!(apply_fallback(&coarse, &refined, &cfg), (coarse.clone(), true));
        let refined = BinaryMask::rect(10, 10, 0, 0, 10, 5);
        assert_eq!(apply_fallback(&coarse, &refined, &cfg), (refined.clone(), false));
    }

    #[test]
    fn saliency_bound_is_inclusive() {
        let cfg = FusionConfig::default();
        let m = BinaryMask::rect(1000, 1, 0, 0, 2, 1);
        assert!(saliency_filter(&m, &cfg));
        assert!(!saliency_filter(&BinaryMask::rect(1000, 1, 0, 0, 1, 1), &cfg));
    }
}

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{box_prec_at_half, MetricAccumulator};
use super::ood::{tag_ood, BenchTagConfig, SampleStats};
use super::parse::CoordMode;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskRef};

pub const REPORT_SCHEMA: &str = "ORSR1";

/// One line of a prediction or ground-truth manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    #[serde(default)]
    pub masks: Vec<MaskRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_frequency: Option<f64>,
}

impl EvalSample {
    pub fn load_masks(&self, base: &Path) -> Result<Vec<BinaryMask>> {
        let [h, w] = self.image_size;
        self.masks
            .iter()
            .map(|r| {
                let m = r.load(base)?;
                if m.width() != w || m.height() != h {
                    return Err(Error::dim(
                        "eval sample",
                        format!("{}: mask is {}×{}, image is {w}×{h}", self.id, m.width(), m.height()),
                    ));
                }
                Ok(m)
            })
            .collect()
    }
}

/// Parses JSON lines, skipping blank ones. Ids must be unique.
pub fn parse_jsonl(text: &str) -> Result<Vec<EvalSample>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let sample: EvalSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            offset: start + e.column().saturating_sub(1),
            message: e.to_string(),
        })?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Schema {
                field: "id".into(),
                message: format!("duplicate id {:?}", sample.id),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<EvalSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Hungarian matching of individual instances instead of scoring mask unions.
    pub multi: bool,
    /// Convention of predicted boxes.
    pub coord_mode: CoordMode,
    pub tags: BenchTagConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub samples: usize,
    pub miou: f64,
    pub ciou: f64,
    #[serde(rename = "p@0.5")]
    pub p50: f64,
    #[serde(rename = "p@0.7")]
    pub p70: f64,
    #[serde(rename = "p@0.9")]
    pub p90: f64,
}

impl From<&MetricAccumulator> for MetricSummary {
    fn from(acc: &MetricAccumulator) -> Self {
        Self {
            samples: acc.samples(),
            miou: acc.miou(),
            ciou: acc.ciou(),
            p50: acc.precision_at(0.5),
            p70: acc.precision_at(0.7),
            p90: acc.precision_at(0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrecision {
    pub hits: usize,
    pub total: usize,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unmatched {
    pub pred: u64,
    pub gt: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub mode: String,
    /// Ground-truth samples evaluated.
    pub gt_samples: usize,
    #[serde(flatten)]
    pub metrics: MetricSummary,
    /// Scored prediction/ground-truth pairs.
    pub matched: usize,
    pub unmatched: Unmatched,
    pub missing_predictions: usize,
    pub extra_predictions: usize,
    #[serde(rename = "prec@0.5", skip_serializing_if = "Option::is_none")]
    pub box_precision: Option<BoxPrecision>,
    pub per_tag: BTreeMap<String, MetricSummary>,
}

fn union_all(masks: &[BinaryMask], w: usize, h: usize) -> Result<BinaryMask> {
    masks.iter().try_fold(BinaryMask::empty(w, h), |acc, m| acc.union(m))
}

/// Scores predictions against ground truth, pairing samples by id.
pub fn evaluate(
    preds: &[EvalSample],
    gts: &[EvalSample],
    pred_base: &Path,
    gt_base: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.tags.validate()?;
    let by_id: HashMap<&str, &EvalSample> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let gt_ids: HashSet<&str> = gts.iter().map(|g| g.id.as_str()).collect();
    let mut total = MetricAccumulator::new();
    let mut per_tag: BTreeMap<String, MetricAccumulator> = BTreeMap::new();
    let mut missing = 0;
    let (mut box_hits, mut box_total) = (0, 0);

    for gt in gts {
        let [h, w] = gt.image_size;
        let gt_masks = gt.load_masks(gt_base)?;
        let pred = by_id.get(gt.id.as_str()).copied();
        let pred_masks = match pred {
            Some(p) => {
                if p.image_size != gt.image_size {
                    return Err(Error::dim(
                        "eval sample",
                        format!("{}: image_size {:?} vs {:?}", gt.id, p.image_size, gt.image_size),
                    ));
                }
                p.load_masks(pred_base)?
            }
            None => {
                missing += 1;
                Vec::new()
            }
        };

        let mut acc = MetricAccumulator::new();
        let pairs = if opts.multi {
            acc.accumulate_multi(&pred_masks, &gt_masks)?
        } else {
            acc.accumulate_single(&union_all(&pred_masks, w, h)?, &union_all(&gt_masks, w, h)?)?;
            vec![(0, 0)]
        };

        if let (Some(pb), Some(gb)) = (pred.and_then(|p| p.boxes.as_ref()), gt.boxes.as_ref()) {
            for &(p, g) in &pairs {
                if let (Some(&pb), Some(&gb)) = (pb.get(p), gb.get(g)) {
                    box_total += 1;
                    if box_prec_at_half(opts.coord_mode.to_pixels(pb, w, h), gb) {
                        box_hits += 1;
                    }
                }
            }
        }

        let gt_union = union_all(&gt_masks, w, h)?;
        let stats = SampleStats {
            area_ratio: gt_union.area_ratio(),
            label_frequency: gt.label_frequency,
        };
        let mut tags: Vec<String> = tag_ood(stats, &opts.tags).into_iter().map(str::to_owned).collect();
        for t in gt.tags.iter().flatten() {
            if !tags.contains(t) {
                tags.push(t.clone());
            }
        }
        for t in tags {
            per_tag.entry(t).or_default().merge(&acc);
        }
        total.merge(&acc);
    }

    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        mode: if opts.multi { "multi" } else { "single" }.into(),
        gt_samples: gts.len(),
        metrics: MetricSummary::from(&total),
        matched: total.samples(),
        unmatched: Unmatched {
            pred: total.unmatched_pred,
            gt: total.unmatched_gt,
        },
        missing_predictions: missing,
        extra_predictions: preds.iter().filter(|p| !gt_ids.contains(p.id.as_str())).count(),
        box_precision: (box_total > 0).then(|| BoxPrecision {
            hits: box_hits,
            total: box_total,
            precision: box_hits as f64 / box_total as f64,
        }),
        per_tag: per_tag.iter().map(|(k, v)| (k.clone(), MetricSummary::from(v))).collect(),
    })
}

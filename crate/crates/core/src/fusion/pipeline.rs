use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::ops::{
    apply_fallback, build_entity_mask, dedup_candidates, postprocess_mask, prefilter_fragments, saliency_filter,
    DedupItem, FusionConfig,
};
use super::verify::{cognitive_verify, Grounder, VerifyOutcome, VerifySample};
use crate::error::{Error, Result};
use crate::mask::rle::{self, Rle};
use crate::mask::{BinaryMask, MaskRef};

/// One candidate entity as listed in an input manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image: String,
    pub label: String,
    pub coarse_mask: MaskRef,
    #[serde(default)]
    pub fragments: Vec<MaskRef>,
    /// Grounded pixel box `[x1, y1, x2, y2]`.
    #[serde(rename = "box")]
    pub box_px: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let records: Vec<ManifestRecord> = serde_json::from_str(text)?;
    for (i, r) in records.iter().enumerate() {
        if r.box_px.iter().any(|v| !v.is_finite()) || r.box_px[2] < r.box_px[0] || r.box_px[3] < r.box_px[1] {
            return Err(Error::Schema {
                field: format!("[{i}].box"),
                message: format!("{:?} is not an ordered finite box", r.box_px),
            });
        }
    }
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Raw,
    Merged,
    Refined,
    Fallback,
    Verified,
    Rejected,
    Duplicate,
    Unverified,
    Error,
}

impl CandidateStatus {
    pub const ALL: [CandidateStatus; 9] = [
        Self::Raw,
        Self::Merged,
        Self::Refined,
        Self::Fallback,
        Self::Verified,
        Self::Rejected,
        Self::Duplicate,
        Self::Unverified,
        Self::Error,
    ];

    fn rank(self) -> u8 {
        match self {
            Self::Raw => 0,
            Self::Merged => 1,
            Self::Refined => 2,
            Self::Fallback => 3,
            Self::Verified => 4,
            _ => 5,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 5
    }

    /// Candidates in these states make it into the curated manifest.
    pub fn is_kept(self) -> bool {
        matches!(self, Self::Refined | Self::Fallback | Self::Verified)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Merged => "merged",
            Self::Refined => "refined",
            Self::Fallback => "fallback",
            Self::Verified => "verified",
            Self::Rejected => "rejected",
            Self::Duplicate => "duplicate",
            Self::Unverified => "unverified",
            Self::Error => "error",
        }
    }
}

/// A candidate moving through the pipeline.
#[derive(Debug, Clone)]
pub struct CandidateEntity {
    pub label: String,
    pub box_px: [f64; 4],
    pub coarse_mask: BinaryMask,
    pub merged_mask: Option<BinaryMask>,
    pub mask: Option<BinaryMask>,
    pub used_fallback: bool,
    status: CandidateStatus,
}

impl CandidateEntity {
    pub fn new(label: String, box_px: [f64; 4], coarse_mask: BinaryMask) -> Self {
        Self {
            label,
            box_px,
            coarse_mask,
            merged_mask: None,
            mask: None,
            used_fallback: false,
            status: CandidateStatus::Raw,
        }
    }

    pub fn status(&self) -> CandidateStatus {
        self.status
    }

    /// Moves to `next`, which must lie strictly later in the pipeline order.
    pub fn advance(&mut self, next: CandidateStatus) -> Result<()> {
        if self.status.is_terminal() || next.rank() <= self.status.rank() {
            return Err(Error::Validation(format!(
                "status cannot move from {} to {}",
                self.status.as_str(),
                next.as_str()
            )));
        }
        self.status = next;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Label,
    Saliency,
    Verify,
}

/// Per-candidate result, one per input record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RejectReason>,
    pub used_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// A surviving candidate. Input masks are embedded as RLE so the record can be
/// fed back into the pipeline from any directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedRecord {
    #[serde(flatten)]
    pub record: ManifestRecord,
    pub mask: Rle,
    pub status: CandidateStatus,
    pub used_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_iou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub fragments_in: usize,
    pub fragments_kept: usize,
    pub label_rejected: usize,
    pub empty_merge: usize,
    pub fallback_used: usize,
    pub duplicates: usize,
    pub saliency_rejected: usize,
    pub verify_rejected: usize,
    pub unverified: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub input: usize,
    pub output: usize,
    pub stages: StageCounts,
    /// Final status of every input candidate.
    pub status: IndexMap<String, usize>,
}

impl AuditReport {
    fn new(input: usize) -> Self {
        Self {
            input,
            output: 0,
            stages: StageCounts::default(),
            status: CandidateStatus::ALL.iter().map(|s| (s.as_str().to_owned(), 0)).collect(),
        }
    }

    pub fn status_total(&self) -> usize {
        self.status.values().sum()
    }

    pub fn count(&self, s: CandidateStatus) -> usize {
        self.status.get(s.as_str()).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub curated: Vec<CuratedRecord>,
    pub outcomes: Vec<CandidateOutcome>,
    pub audit: AuditReport,
}

impl PipelineOutput {
    /// Writes `curated.json`, `outcomes.json` and `audit.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("curated.json", serde_json::to_string_pretty(&self.curated)?),
            ("outcomes.json", serde_json::to_string_pretty(&self.outcomes)?),
            ("audit.json", serde_json::to_string_pretty(&self.audit)?),
        ];
        let mut written = Vec::new();
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

struct Loaded {
    entity: CandidateEntity,
    fragments: Vec<BinaryMask>,
}

fn load_candidate(r: &ManifestRecord, base: &Path) -> Result<Loaded> {
    let coarse = r.coarse_mask.load(base)?;
    let fragments = r
        .fragments
        .iter()
        .map(|f| f.load(base))
        .collect::<Result<Vec<_>>>()?;
    Ok(Loaded {
        entity: CandidateEntity::new(r.label.clone(), r.box_px, coarse),
        fragments,
    })
}

fn refine(c: &mut Loaded, cfg: &FusionConfig, stages: &mut StageCounts) -> Result<()> {
    let kept = prefilter_fragments(&c.fragments, &c.entity.coarse_mask, cfg)?;
    stages.fragments_in += c.fragments.len();
    stages.fragments_kept += kept.len();
    let kept: Vec<BinaryMask> = kept.into_iter().map(|i| c.fragments[i].clone()).collect();
    let merged = build_entity_mask(&c.entity.coarse_mask, &kept, cfg)?;
    c.entity.advance(CandidateStatus::Merged)?;
    let (refined, was_empty) = postprocess_mask(&merged, cfg);
    if was_empty {
        stages.empty_merge += 1;
    }
    c.entity.merged_mask = Some(merged);
    c.entity.advance(CandidateStatus::Refined)?;
    let (mask, used) = apply_fallback(&c.entity.coarse_mask, &refined, cfg);
    if used {
        stages.fallback_used += 1;
        c.entity.used_fallback = true;
        c.entity.advance(CandidateStatus::Fallback)?;
    }
    c.entity.mask = Some(mask);
    Ok(())
}

/// Runs prefilter, merge, postprocess, fallback, dedup, saliency and, when a
/// grounder is supplied, verification over every record. Per-record failures
/// are reported in the outcomes; only an invalid config is an error.
pub fn run_pipeline(
    records: &[ManifestRecord],
    base_dir: &Path,
    cfg: &FusionConfig,
    grounder: Option<&dyn Grounder>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut audit = AuditReport::new(records.len());
    let mut outcomes: Vec<CandidateOutcome> = records
        .iter()
        .enumerate()
        .map(|(index, r)| CandidateOutcome {
            index,
            id: r.id.clone(),
            status: CandidateStatus::Raw,
            reason: None,
            used_fallback: false,
            verify_iou: None,
            message: None,
        })
        .collect();
    let mut live: Vec<Option<Loaded>> = Vec::with_capacity(records.len());

    for (i, r) in records.iter().enumerate() {
        let out = &mut outcomes[i];
        if let Some(allow) = &cfg.label_allowlist {
            if !allow.iter().any(|l| l == &r.label) {
                out.status = CandidateStatus::Rejected;
                out.reason = Some(RejectReason::Label);
                audit.stages.label_rejected += 1;
                live.push(None);
                continue;
            }
        }
        let result = load_candidate(r, base_dir).and_then(|mut c| refine(&mut c, cfg, &mut audit.stages).map(|_| c));
        match result {
            Ok(c) => {
                out.status = c.entity.status();
                out.used_fallback = c.entity.used_fallback;
                live.push(Some(c));
            }
            Err(e) => {
                log::warn!("candidate {i} ({}): {e}", r.image);
                out.status = CandidateStatus::Error;
                out.message = Some(e.to_string());
                audit.stages.errors += 1;
                live.push(None);
            }
        }
    }

    let mut groups: IndexMap<(&str, &str), Vec<usize>> = IndexMap::new();
    for (i, r) in records.iter().enumerate() {
        if live[i].is_some() {
            groups.entry((r.image.as_str(), r.label.as_str())).or_default().push(i);
        }
    }
    for members in groups.values() {
        let items: Vec<DedupItem<'_>> = members
            .iter()
            .map(|&i| {
                let c = live[i].as_ref().expect("grouped candidates are live");
                DedupItem {
                    mask: c.entity.mask.as_ref().expect("refined candidates carry a mask"),
                    bbox: c.entity.box_px,
                }
            })
            .collect();
        let keep = dedup_candidates(&items, cfg)?;
        for (&i, k) in members.iter().zip(keep) {
            if !k {
                outcomes[i].status = CandidateStatus::Duplicate;
                audit.stages.duplicates += 1;
                live[i] = None;
            }
        }
    }

    for (i, slot) in live.iter_mut().enumerate() {
        let Some(c) = slot else { continue };
        let mask = c.entity.mask.as_ref().expect("refined candidates carry a mask");
        if !saliency_filter(mask, cfg) {
            outcomes[i].status = CandidateStatus::Rejected;
            outcomes[i].reason = Some(RejectReason::Saliency);
            audit.stages.saliency_rejected += 1;
            *slot = None;
            continue;
        }
        let Some(grounder) = grounder else { continue };
        let r = &records[i];
        let outcome = match &r.expression {
            None => VerifyOutcome::Unverified {
                reason: "record has no referring expression".into(),
            },
            Some(expr) => cognitive_verify(
                &VerifySample {
                    image: &r.image,
                    expression: expr,
                    gt_box: r.box_px,
                    width: mask.width(),
                    height: mask.height(),
                },
                grounder,
                cfg.verify_iou_threshold,
            ),
        };
        let out = &mut outcomes[i];
        match outcome {
            VerifyOutcome::Kept { iou } => {
                c.entity.advance(CandidateStatus::Verified)?;
                out.status = CandidateStatus::Verified;
                out.verify_iou = Some(iou);
            }
            VerifyOutcome::Dropped { iou } => {
                out.status = CandidateStatus::Rejected;
                out.reason = Some(RejectReason::Verify);
                out.verify_iou = Some(iou);
                audit.stages.verify_rejected += 1;
                *slot = None;
            }
            VerifyOutcome::Unverified { reason } => {
                out.status = CandidateStatus::Unverified;
                out.message = Some(reason);
                audit.stages.unverified += 1;
                *slot = None;
            }
        }
    }

    let mut curated = Vec::new();
    for (i, slot) in live.into_iter().enumerate() {
        let Some(c) = slot else { continue };
        let mut record = records[i].clone();
        record.coarse_mask = MaskRef::Rle(rle::encode(&c.entity.coarse_mask));
        record.fragments = c.fragments.iter().map(|f| MaskRef::Rle(rle::encode(f))).collect();
        curated.push(CuratedRecord {
            record,
            mask: rle::encode(c.entity.mask.as_ref().expect("refined candidates carry a mask")),
            status: outcomes[i].status,
            used_fallback: c.entity.used_fallback,
            verify_iou: outcomes[i].verify_iou,
        });
    }
    for o in &outcomes {
        *audit.status.get_mut(o.status.as_str()).expect("all statuses present") += 1;
    }
    audit.output = curated.len();
    Ok(PipelineOutput {
        curated,
        outcomes,
        audit,
    })
}

/// Input records recovered from a curated manifest.
pub fn curated_as_manifest(curated: &[CuratedRecord]) -> Vec<ManifestRecord> {
    curated.iter().map(|c| c.record.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_moves_forward_only() {
        let mut c = CandidateEntity::new("dog".into(), [0.0; 4], BinaryMask::empty(2, 2));
        c.advance(CandidateStatus::Merged).unwrap();
        assert!(c.advance(CandidateStatus::Raw).is_err());
        c.advance(CandidateStatus::Duplicate).unwrap();
        assert!(c.advance(CandidateStatus::Verified).is_err());
    }

    #[test]
    fn empty_manifest_gives_zero_counts() {
        let out = run_pipeline(&[], Path::new("."), &FusionConfig::default(), None).unwrap();
        assert!(out.curated.is_empty());
        assert_eq!(out.audit.status_total(), 0);
        assert_eq!(out.audit.stages, StageCounts::default());
    }
}

//! Coarse-to-fine entity mask construction and the curation gates applied to
//! each candidate before it enters a training manifest.

mod ops;
mod pipeline;
mod verify;

pub use crate::mask::MaskRef;
pub use ops::{
    apply_fallback, build_entity_mask, dedup_candidates, iof, postprocess_mask, prefilter_fragments,
    saliency_filter, DedupItem, FusionConfig,
};
pub use pipeline::{
    curated_as_manifest, load_manifest, parse_manifest, run_pipeline, AuditReport, CandidateEntity,
    CandidateOutcome, CandidateStatus, CuratedRecord, ManifestRecord, PipelineOutput, RejectReason,
    StageCounts,
};
pub use verify::{
    cognitive_verify, Grounder, GroundingRequest, GroundingResponse, StubGrounder, VerifyOutcome, VerifySample,
};

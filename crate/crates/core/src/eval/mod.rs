//! Segmentation metrics, instance matching, model-output parsing and the
//! evaluation report.

mod hungarian;
mod metrics;
mod ood;
mod parse;
mod report;

pub use hungarian::{hungarian_match, Assignment};
pub use metrics::{box_prec_at_half, mask_iou, MetricAccumulator, PRECISION_THRESHOLDS};
pub use ood::{tag_ood, BenchTagConfig, SampleStats, TAG_AREA_LARGE, TAG_AREA_SMALL, TAG_CATEGORY_RARE};
pub use parse::{parse_model_output, render, CoordMode, PredictionRecord, MASK_PLACEHOLDER};
pub use report::{
    evaluate, load_jsonl, parse_jsonl, BoxPrecision, EvalOptions, EvalReport, EvalSample, MetricSummary, Unmatched,
    REPORT_SCHEMA,
};

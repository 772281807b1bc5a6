use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::rect_iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRequest {
    pub image: String,
    pub expression: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResponse {
    /// Pixel box `[x1, y1, x2, y2]`.
    #[serde(rename = "box")]
    pub box_px: [f64; 4],
    #[serde(default)]
    pub latency_ms: f64,
}

/// Visual grounding model that localizes a referring expression.
pub trait Grounder {
    fn ground(&self, request: &GroundingRequest) -> Result<GroundingResponse>;
}

#[derive(Debug, Clone, Deserialize)]
struct CannedEntry {
    image: String,
    expression: String,
    #[serde(rename = "box")]
    box_px: Option<[f64; 4]>,
    #[serde(default)]
    latency_ms: f64,
    /// Simulated failure message returned instead of a box.
    error: Option<String>,
}

/// Grounder that replays canned responses from a fixtures file.
#[derive(Debug, Clone, Default)]
pub struct StubGrounder {
    responses: HashMap<(String, String), std::result::Result<GroundingResponse, String>>,
    /// Responses slower than this count as timeouts.
    pub timeout_ms: Option<f64>,
}

impl StubGrounder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, image: &str, expression: &str, box_px: [f64; 4]) -> Self {
        self.responses.insert(
            (image.to_owned(), expression.to_owned()),
            Ok(GroundingResponse { box_px, latency_ms: 0.0 }),
        );
        self
    }

    pub fn with_failure(mut self, image: &str, expression: &str, message: &str) -> Self {
        self.responses
            .insert((image.to_owned(), expression.to_owned()), Err(message.to_owned()));
        self
    }

    /// Parses a JSON array of `{image, expression, box | error, latency_ms?}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<CannedEntry> = serde_json::from_str(text)?;
        let mut out = Self::new();
        for e in entries {
            let value = match (e.box_px, e.error) {
                (_, Some(msg)) => Err(msg),
                (Some(box_px), None) => Ok(GroundingResponse {
                    box_px,
                    latency_ms: e.latency_ms,
                }),
                (None, None) => {
                    return Err(Error::Schema {
                        field: "box".into(),
                        message: format!("entry for {:?} has neither box nor error", e.expression),
                    })
                }
            };
            out.responses.insert((e.image, e.expression), value);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl Grounder for StubGrounder {
    fn ground(&self, request: &GroundingRequest) -> Result<GroundingResponse> {
        let key = (request.image.clone(), request.expression.clone());
        match self.responses.get(&key) {
            None => Err(Error::Grounder(format!(
                "no canned response for {:?} on {}",
                request.expression, request.image
            ))),
            Some(Err(msg)) => Err(Error::Grounder(msg.clone())),
            Some(Ok(r)) => match self.timeout_ms {
                Some(limit) if r.latency_ms > limit => Err(Error::Grounder(format!(
                    "timed out after {} ms (limit {limit} ms)",
                    r.latency_ms
                ))),
                _ => Ok(r.clone()),
            },
        }
    }
}

/// One sample handed to the verifier.
#[derive(Debug, Clone)]
pub struct VerifySample<'a> {
    pub image: &'a str,
    pub expression: &'a str,
    /// Ground-truth pixel box.
    pub gt_box: [f64; 4],
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum VerifyOutcome {
    Kept { iou: f64 },
    Dropped { iou: f64 },
    Unverified { reason: String },
}

fn clamp_box(b: [f64; 4], width: usize, height: usize) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)]
}

/// Grounds the expression and keeps the sample iff the predicted box, clamped
/// to the image, overlaps the ground truth with IoU ≥ `threshold`.
pub fn cognitive_verify(sample: &VerifySample<'_>, grounder: &dyn Grounder, threshold: f64) -> VerifyOutcome {
    let request = GroundingRequest {
        image: sample.image.to_owned(),
        expression: sample.expression.to_owned(),
    };
    let response = match grounder.ground(&request) {
        Ok(r) => r,
        Err(e) => return VerifyOutcome::Unverified { reason: e.to_string() },
    };
    if response.box_px.iter().any(|v| !v.is_finite()) {
        return VerifyOutcome::Unverified {
            reason: "grounder returned a non-finite box".into(),
        };
    }
    let pred = clamp_box(response.box_px, sample.width, sample.height);
    let gt = clamp_box(sample.gt_box, sample.width, sample.height);
    let iou = rect_iou(pred, gt);
    if iou >= threshold {
        VerifyOutcome::Kept { iou }
    } else {
        VerifyOutcome::Dropped { iou }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(gt: [f64; 4]) -> VerifySample<'static> {
        VerifySample {
            image: "a.pgm",
            expression: "the dog",
            gt_box: gt,
            width: 1,
            height: 1,
        }
    }

    #[test]
    fn overhanging_prediction_is_clamped() {
        let g = StubGrounder::new().with_response("a.pgm", "the dog", [0.5, 0.0, 1.5, 1.0]);
        assert_eq!(
            cognitive_verify(&sample([0.0, 0.0, 1.0, 1.0]), &g, 0.8),
            VerifyOutcome::Dropped { iou: 0.5 }
        );
    }

    #[test]
    fn missing_response_is_unverified() {
        let g = StubGrounder::new();
        assert!(matches!(
            cognitive_verify(&sample([0.0, 0.0, 1.0, 1.0]), &g, 0.8),
            VerifyOutcome::Unverified { .. }
        ));
    }

    #[test]
    fn slow_response_times_out() {
        let mut g = StubGrounder::from_json(
            r#"[{"image":"a.pgm","expression":"the dog","box":[0,0,1,1],"latency_ms":900}]"#,
        )
        .unwrap();
        assert!(matches!(
            cognitive_verify(&sample([0.0, 0.0, 1.0, 1.0]), &g, 0.8),
            VerifyOutcome::Kept { .. }
        ));
        g.timeout_ms = Some(500.0);
        assert!(matches!(
            cognitive_verify(&sample([0.0, 0.0, 1.0, 1.0]), &g, 0.8),
            VerifyOutcome::Unverified { .. }
        ));
    }
}

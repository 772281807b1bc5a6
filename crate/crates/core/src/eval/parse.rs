//! Structured instance lists emitted by the language model.

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MASK_PLACEHOLDER: &str = "<mask_start><mask_token><mask_end>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    /// `[x1, y1, x2, y2]` with `x1 < x2` and `y1 < y2`.
    pub bbox_2d: [i64; 4],
    pub label: String,
}

/// How `bbox_2d` values map onto pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoordMode {
    #[default]
    Pixel,
    /// Values on a `0..grid` lattice spanning the image.
    Grid(u32),
}

impl CoordMode {
    /// Pixel box for an image of `width × height`.
    pub fn to_pixels(self, b: [f64; 4], width: usize, height: usize) -> [f64; 4] {
        match self {
            CoordMode::Pixel => b,
            CoordMode::Grid(g) => {
                let (sx, sy) = (width as f64 / g as f64, height as f64 / g as f64);
                [b[0] * sx, b[1] * sy, b[2] * sx, b[3] * sy]
            }
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

/// Start of the JSON array: after a ```json fence when present, otherwise the
/// first `[` in the text.
fn array_start(text: &str) -> Option<usize> {
    if let Some(fence) = text.find("```json") {
        let after = fence + "```json".len();
        return text[after..].find('[').map(|i| after + i);
    }
    text.find('[')
}

fn schema(field: String, message: impl Into<String>) -> Error {
    Error::Schema {
        field,
        message: message.into(),
    }
}

fn record_from_value(i: usize, v: &Value) -> Result<PredictionRecord> {
    let obj: &Map<String, Value> = v
        .as_object()
        .ok_or_else(|| schema(format!("[{i}]"), "expected an object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "bbox_2d" | "label" | "mask") {
            return Err(schema(format!("[{i}].{key}"), "unexpected field"));
        }
    }
    let field = |name: &str| {
        obj.get(name)
            .ok_or_else(|| schema(format!("[{i}].{name}"), "missing"))
    };
    let coords = field("bbox_2d")?
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| schema(format!("[{i}].bbox_2d"), "expected four integers"))?;
    let mut bbox_2d = [0i64; 4];
    for (k, c) in coords.iter().enumerate() {
        bbox_2d[k] = c
            .as_i64()
            .ok_or_else(|| schema(format!("[{i}].bbox_2d"), format!("element {k} is not an integer")))?;
    }
    if bbox_2d[0] >= bbox_2d[2] || bbox_2d[1] >= bbox_2d[3] {
        return Err(schema(format!("[{i}].bbox_2d"), format!("{bbox_2d:?} is not an ordered box")));
    }
    let label = field("label")?
        .as_str()
        .ok_or_else(|| schema(format!("[{i}].label"), "expected a string"))?
        .to_owned();
    match field("mask")?.as_str() {
        Some(MASK_PLACEHOLDER) => {}
        Some(other) => {
            return Err(schema(
                format!("[{i}].mask"),
                format!("expected {MASK_PLACEHOLDER:?}, found {other:?}"),
            ))
        }
        None => return Err(schema(format!("[{i}].mask"), "expected a string")),
    }
    Ok(PredictionRecord { bbox_2d, label })
}

/// Extracts and validates the first JSON array in `text`. Anything after the
/// array (closing fences, role or end-of-text tokens) is ignored.
pub fn parse_model_output(text: &str) -> Result<Vec<PredictionRecord>> {
    let start = array_start(text).ok_or_else(|| Error::Parse {
        offset: text.len(),
        message: "no JSON array found".into(),
    })?;
    let body = &text[start..];
    let mut stream = serde_json::Deserializer::from_str(body).into_iter::<Value>();
    let value = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => {
            return Err(Error::Parse {
                offset: start + byte_offset(body, e.line(), e.column()),
                message: e.to_string(),
            })
        }
        None => {
            return Err(Error::Parse {
                offset: start,
                message: "empty input".into(),
            })
        }
    };
    let items = value.as_array().ok_or_else(|| schema("$".into(), "expected an array"))?;
    items.iter().enumerate().map(|(i, v)| record_from_value(i, v)).collect()
}

/// Fenced JSON block that [`parse_model_output`] reads back unchanged.
pub fn render(records: &[PredictionRecord]) -> String {
    let items: Vec<Value> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "bbox_2d": r.bbox_2d,
                "label": r.label,
                "mask": MASK_PLACEHOLDER,
            })
        })
        .collect();
    let body = serde_json::to_string_pretty(&Value::Array(items)).expect("plain JSON values serialize");
    format!("```json\n{body}\n```")
}

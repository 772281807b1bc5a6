//! Uncompressed COCO-style run-length encoding.
//!
//! Runs are taken over the mask in column-major order and alternate between
//! background and foreground, starting with background; a mask whose first
//! pixel is foreground therefore begins with a zero-length run.

use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

pub fn encode(m: &BinaryMask) -> Rle {
    let (w, h) = (m.width(), m.height());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = m.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle { size: [h, w], counts }
}

pub fn decode(rle: &Rle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let total: u64 = rle
        .counts
        .iter()
        .try_fold(0u64, |acc, &c| acc.checked_add(c))
        .ok_or_else(|| Error::CorruptRle("run lengths overflow".into()))?;
    let expected = (h as u64) * (w as u64);
    if total != expected {
        return Err(Error::CorruptRle(format!(
            "runs sum to {total} but a {h}×{w} mask has {expected} pixels"
        )));
    }
    let mut m = BinaryMask::empty(w, h);
    let mut idx = 0usize;
    for (k, &c) in rle.counts.iter().enumerate() {
        let fg = k % 2 == 1;
        for _ in 0..c {
            if fg {
                m.set(idx / h, idx % h, true);
            }
            idx += 1;
        }
    }
    Ok(m)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchTagConfig {
    pub area_small: f64,
    pub area_large: f64,
    pub category_freq: f64,
}

impl Default for BenchTagConfig {
    fn default() -> Self {
        Self {
            area_small: 0.002,
            area_large: 0.7,
            category_freq: 1e-4,
        }
    }
}

impl BenchTagConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.area_small && self.area_small < self.area_large && self.area_large < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < area_small < area_large < 1, got {} and {}",
                self.area_small, self.area_large
            )));
        }
        if !(self.category_freq > 0.0 && self.category_freq < 1.0) {
            return Err(Error::Config(format!("category_freq {} outside (0, 1)", self.category_freq)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleStats {
    /// Ground-truth mask area over image area.
    pub area_ratio: f64,
    /// Relative frequency of the sample's category, when known.
    pub label_frequency: Option<f64>,
}

pub const TAG_AREA_SMALL: &str = "area_small";
pub const TAG_AREA_LARGE: &str = "area_large";
pub const TAG_CATEGORY_RARE: &str = "category_rare";

/// Distribution-shift tags derivable from mask area and label frequency.
pub fn tag_ood(stats: SampleStats, cfg: &BenchTagConfig) -> Vec<&'static str> {
    let mut tags = Vec::new();
    if stats.area_ratio < cfg.area_small {
        tags.push(TAG_AREA_SMALL);
    }
    if stats.area_ratio > cfg.area_large {
        tags.push(TAG_AREA_LARGE);
    }
    if stats.label_frequency.is_some_and(|f| f < cfg.category_freq) {
        tags.push(TAG_CATEGORY_RARE);
    }
    tags
}

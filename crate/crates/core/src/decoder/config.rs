use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FourierConfig;

/// Shape and hyper-parameters of the box-guided mask decoder.
///
/// All visual feature levels arrive at the memory grid `Hm×Wm`. The pixel
/// grid is `r₁·r₂` times finer and the stem consumes the image at eight
/// times the pixel grid (three stride-2 convolutions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channels of each visual feature level; the last entry is the top level.
    pub vit_channels: Vec<usize>,
    /// Width of a multimodal visual embedding token.
    pub mm_dim: usize,
    /// Width of the segmentation token.
    pub seg_dim: usize,
    pub hidden_dim: usize,
    pub fourier_frequencies: usize,
    pub box_mlp_hidden: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    /// Group count of every GroupNorm.
    pub norm_groups: usize,
    pub injector_scale_init: f64,
    pub gate_alpha: f64,
    pub enlarge_ratio: f64,
    /// Stabilizer of the mask-weighted pooling denominator.
    pub eps: f64,
    pub norm_eps: f64,
    pub memory_grid: [usize; 2],
    pub upsample_factors: [usize; 2],
    pub upsample_channels: [usize; 2],
    pub stem_widths: [usize; 3],
    pub pixel_dim: usize,
    pub kernel_mlp_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::default_profile()
    }
}

impl DecoderConfig {
    /// Full-size profile, sized to a trainable budget of roughly 17M scalars.
    pub fn default_profile() -> Self {
        Self {
            vit_channels: vec![1024, 1024, 1024],
            mm_dim: 2560,
            seg_dim: 2560,
            hidden_dim: 256,
            fourier_frequencies: 8,
            box_mlp_hidden: 1024,
            decoder_layers: 4,
            attention_heads: 8,
            ffn_dim: 4096,
            norm_groups: 32,
            injector_scale_init: 1e-3,
            gate_alpha: 20.0,
            enlarge_ratio: 0.15,
            eps: 1e-6,
            norm_eps: 1e-5,
            memory_grid: [16, 16],
            upsample_factors: [2, 2],
            upsample_channels: [256, 256],
            stem_widths: [64, 128, 256],
            pixel_dim: 256,
            kernel_mlp_hidden: 1024,
        }
    }

    /// Small profile for tests and toy training.
    pub fn tiny() -> Self {
        Self {
            vit_channels: vec![16, 16, 32],
            mm_dim: 32,
            seg_dim: 32,
            hidden_dim: 64,
            fourier_frequencies: 8,
            box_mlp_hidden: 64,
            decoder_layers: 2,
            attention_heads: 4,
            ffn_dim: 128,
            norm_groups: 8,
            injector_scale_init: 1e-3,
            gate_alpha: 20.0,
            enlarge_ratio: 0.15,
            eps: 1e-6,
            norm_eps: 1e-5,
            memory_grid: [8, 8],
            upsample_factors: [2, 2],
            upsample_channels: [32, 16],
            stem_widths: [8, 16, 16],
            pixel_dim: 24,
            kernel_mlp_hidden: 64,
        }
    }

    /// Very small profile for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            vit_channels: vec![3, 4],
            mm_dim: 5,
            seg_dim: 6,
            hidden_dim: 8,
            fourier_frequencies: 2,
            box_mlp_hidden: 6,
            decoder_layers: 1,
            attention_heads: 2,
            ffn_dim: 8,
            norm_groups: 2,
            injector_scale_init: 1e-3,
            gate_alpha: 20.0,
            enlarge_ratio: 0.15,
            eps: 1e-6,
            norm_eps: 1e-5,
            memory_grid: [2, 2],
            upsample_factors: [2, 2],
            upsample_channels: [4, 4],
            stem_widths: [2, 3, 4],
            pixel_dim: 4,
            kernel_mlp_hidden: 6,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.vit_channels.len()
    }

    pub fn fourier(&self) -> FourierConfig {
        FourierConfig {
            num_frequencies: self.fourier_frequencies,
        }
    }

    pub fn box_encoding_len(&self) -> usize {
        8 * self.fourier_frequencies
    }

    pub fn memory_tokens(&self) -> usize {
        self.memory_grid[0] * self.memory_grid[1]
    }

    pub fn pixel_grid(&self) -> [usize; 2] {
        let r = self.upsample_factors[0] * self.upsample_factors[1];
        [self.memory_grid[0] * r, self.memory_grid[1] * r]
    }

    /// Image resolution consumed by the stem.
    pub fn image_size(&self) -> [usize; 2] {
        let [h, w] = self.pixel_grid();
        [h * 8, w * 8]
    }

    /// Channels after the first pixel shuffle.
    pub fn shuffled_channels(&self) -> [usize; 2] {
        let [r1, r2] = self.upsample_factors;
        [self.hidden_dim / (r1 * r1), self.upsample_channels[0] / (r2 * r2)]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vit_channels.is_empty() {
            return fail("at least one visual feature level is required".into());
        }
        let counts = [
            self.mm_dim,
            self.seg_dim,
            self.hidden_dim,
            self.fourier_frequencies,
            self.box_mlp_hidden,
            self.attention_heads,
            self.ffn_dim,
            self.norm_groups,
            self.pixel_dim,
            self.kernel_mlp_hidden,
        ];
        if counts.iter().chain(&self.vit_channels).any(|&c| c == 0)
            || self.memory_grid.contains(&0)
            || self.upsample_factors.contains(&0)
            || self.upsample_channels.contains(&0)
            || self.stem_widths.contains(&0)
        {
            return fail("all counts must be >= 1".into());
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return fail(format!(
                "hidden_dim {} not divisible by {} attention heads",
                self.hidden_dim, self.attention_heads
            ));
        }
        if self.hidden_dim % self.norm_groups != 0 {
            return fail(format!("hidden_dim {} not divisible by {} norm groups", self.hidden_dim, self.norm_groups));
        }
        let [r1, r2] = self.upsample_factors;
        if self.hidden_dim % (r1 * r1) != 0 {
            return fail(format!("hidden_dim {} not divisible by r₁²={}", self.hidden_dim, r1 * r1));
        }
        if self.upsample_channels[0] % (r2 * r2) != 0 {
            return fail(format!(
                "first upsample width {} not divisible by r₂²={}",
                self.upsample_channels[0],
                r2 * r2
            ));
        }
        if !(self.gate_alpha > 0.0 && self.eps > 0.0 && self.norm_eps > 0.0 && self.enlarge_ratio >= 0.0) {
            return fail("gate_alpha, eps and norm_eps must be positive; enlarge_ratio non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for cfg in [DecoderConfig::default_profile(), DecoderConfig::tiny(), DecoderConfig::micro()] {
            cfg.validate().unwrap();
            let [hp, wp] = cfg.pixel_grid();
            let r = cfg.upsample_factors[0] * cfg.upsample_factors[1];
            assert_eq!((hp, wp), (r * cfg.memory_grid[0], r * cfg.memory_grid[1]));
        }
        assert_eq!(DecoderConfig::default_profile().pixel_grid(), [64, 64]);
        assert_eq!(DecoderConfig::tiny().image_size(), [256, 256]);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = DecoderConfig::tiny();
        cfg.attention_heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

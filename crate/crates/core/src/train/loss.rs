use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_bce: 2.0,
            lambda_dice: 0.5,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_bce) || !ok(self.lambda_dice) || !ok(self.dice_smooth) {
            return Err(Error::Config("loss weights and smoothing must be finite and non-negative".into()));
        }
        if self.lambda_bce == 0.0 && self.lambda_dice == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// `λ_bce·BCE + λ_dice·(1 − Dice)` of `sigmoid(logits)` against `target`.
///
/// `logits` must hold `target.height() × target.width()` values.
pub fn bce_dice_loss(g: &mut Graph<'_>, logits: Var, target: &BinaryMask, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if g.value(logits).numel() != target.len() {
        return Err(Error::dim(
            "bce_dice_loss",
            format!(
                "{} logits for a {}×{} target",
                g.value(logits).numel(),
                target.width(),
                target.height()
            ),
        ));
    }
    let t = target.to_f64();
    let t_sum: f64 = t.iter().sum();
    let bce = g.bce_logits_mean(logits, &t)?;
    let bce = g.scale(bce, cfg.lambda_bce)?;

    let shape = g.value(logits).shape().to_vec();
    let p = g.sigmoid(logits)?;
    let tv = g.constant(Tensor::new(shape, t)?);
    let inter = g.mul(p, tv)?;
    let inter = g.sum(inter)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_const(num, cfg.dice_smooth)?;
    let den = g.sum(p)?;
    let den = g.add_const(den, t_sum + cfg.dice_smooth)?;
    let frac = g.div(num, den)?;
    let dice = g.scale(frac, -cfg.lambda_dice)?;
    let dice = g.add_const(dice, cfg.lambda_dice)?;
    g.add(bce, dice)
}

/// Plain evaluation of [`bce_dice_loss`].
pub fn bce_dice_value(logits: &[f64], target: &BinaryMask, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![logits.len()], logits.to_vec())?);
    let l = bce_dice_loss(&mut g, x, target, cfg)?;
    Ok(g.value(l).item())
}

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::loss::{bce_dice_loss, LossConfig};
use super::optim::Adam;
use super::synth::{SynthConfig, SyntheticGenerator, SyntheticSample};
use crate::decoder::{forward_graph, Checkpoint, DecoderConfig, DecoderParams, DecoderState, DecoderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub lambda_iou: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
    pub eval_samples: usize,
    pub eval_every: u64,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

impl TrainConfig {
    /// Toy run on the tiny profile.
    pub fn toy() -> Self {
        Self {
            decoder: DecoderConfig::tiny(),
            loss: LossConfig::default(),
            lambda_iou: 1.0,
            lr: 1e-3,
            batch_size: 4,
            steps: 2000,
            init_seed: 7,
            data_seed: 1,
            eval_seed: 1_000_003,
            eval_samples: 200,
            eval_every: 500,
            synth: None,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        self.synth.clone().unwrap_or_else(|| SynthConfig::for_decoder(&self.decoder))
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.lambda_iou >= 0.0) {
            return Err(Error::Config("lr and lambda_iou must be finite and non-negative".into()));
        }
        if self.data_seed == self.eval_seed {
            return Err(Error::Config("held-out stream must use a different seed".into()));
        }
        Ok(())
    }
}

/// Loss handles of one sample.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub decoder: DecoderVars,
    /// Pass-1 logits at target resolution.
    pub mask1: Var,
    pub loss: Var,
    /// IoU of the binarized pass-2 mask, used as the IoU-head target.
    pub pass2_iou: f64,
}

/// IoU between `logits > 0` and `target`.
pub fn logits_iou(logits: &[f64], target: &BinaryMask) -> Result<f64> {
    let pred = BinaryMask::threshold(target.width(), target.height(), logits, 0.0)?;
    pred.iou(target)
}

/// `L(M̂¹) + L(M̂²) + λ_iou·(ŝ − IoU(M̂² > 0, target))²` with both masks at target resolution.
pub fn sample_objective<'a>(
    g: &mut Graph<'a>,
    params: &crate::decoder::BoundParams,
    cfg: &TrainConfig,
    sample: &'a SyntheticSample,
) -> Result<ObjectiveVars> {
    let t = &sample.target_mask;
    let (h, w) = (t.height(), t.width());
    let v = forward_graph(g, params, &cfg.decoder, &sample.inputs, [h, w])?;
    let [hp, wp] = cfg.decoder.pixel_grid();
    let m1 = g.reshape(v.logits1, &[1, hp, wp])?;
    let m1 = g.bilinear_resize(m1, h, w)?;
    let mask1 = g.reshape(m1, &[h, w])?;

    let l1 = bce_dice_loss(g, mask1, t, &cfg.loss)?;
    let l2 = bce_dice_loss(g, v.mask, t, &cfg.loss)?;
    let pass2_iou = logits_iou(g.value(v.mask).data(), t)?;
    let d = g.add_const(v.iou, -pass2_iou)?;
    let d2 = g.mul(d, d)?;
    let li = g.scale(d2, cfg.lambda_iou)?;
    let loss = g.add(l1, l2)?;
    let loss = g.add(loss, li)?;
    let loss = g.reshape(loss, &[1])?;
    Ok(ObjectiveVars {
        decoder: v,
        mask1,
        loss,
        pass2_iou,
    })
}

fn diverged(step: u64, detail: String, params: &DecoderParams) -> Error {
    let mut worst: Vec<(f64, &str)> = params.iter().map(|(n, t)| (t.max_abs(), n)).collect();
    worst.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top: Vec<String> = worst.iter().take(3).map(|(v, n)| format!("{n}={v:.3e}")).collect();
    Error::Diverged {
        step,
        diagnostic: format!("{detail}; largest parameters: {}", top.join(", ")),
    }
}

fn state_extrema(state: &DecoderState) -> String {
    state
        .extrema()
        .iter()
        .map(|(n, lo, hi)| format!("{n}∈[{lo:.3e},{hi:.3e}]"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One optimizer update on the mean objective of `batch`; returns that mean.
pub fn train_step(
    params: &mut DecoderParams,
    batch: &[SyntheticSample],
    adam: &mut Adam,
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Validation("training batch must not be empty".into()));
    }
    let mut total: IndexMap<String, Vec<f64>> = IndexMap::new();
    let mut loss_sum = 0.0;
    for sample in batch {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let obj = match sample_objective(&mut g, &bound, cfg, sample) {
            Ok(o) => o,
            Err(e @ Error::NonFinite { .. }) => return Err(diverged(step, e.to_string(), params)),
            Err(e) => return Err(e),
        };
        let lv = g.value(obj.loss).item();
        if !lv.is_finite() {
            let state = DecoderState::from_graph(&g, &obj.decoder);
            return Err(diverged(step, format!("loss {lv}; {}", state_extrema(&state)), params));
        }
        loss_sum += lv;
        let grads = match g.backward(obj.loss) {
            Ok(gr) => gr,
            Err(e @ Error::NonFinite { .. }) => return Err(diverged(step, e.to_string(), params)),
            Err(e) => return Err(e),
        };
        for (name, var) in bound.iter() {
            if let Some(gt) = grads.get(var) {
                match total.get_mut(name) {
                    Some(acc) => kernels::axpy(acc, 1.0, gt.data()),
                    None => {
                        total.insert(name.to_string(), gt.data().to_vec());
                    }
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in total.values_mut() {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    adam.step(params, &total)
        .map_err(|e| diverged(step, e.to_string(), params))?;
    Ok(loss_sum * inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub miou_pass1: f64,
    pub miou_pass2: f64,
    pub iou_head_mae: f64,
}

/// Mean objective and mask quality over held-out samples `0..count` of `seed`.
pub fn evaluate(
    params: &DecoderParams,
    cfg: &TrainConfig,
    gen: &SyntheticGenerator,
    seed: u64,
    count: usize,
    step: u64,
) -> Result<MetricsRecord> {
    if count == 0 {
        return Err(Error::Validation("evaluation needs at least one sample".into()));
    }
    let (mut loss, mut m1, mut m2, mut mae) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..count as u64 {
        let sample = gen.sample(seed, i)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let obj = sample_objective(&mut g, &bound, cfg, &sample)?;
        loss += g.value(obj.loss).item();
        m1 += logits_iou(g.value(obj.mask1).data(), &sample.target_mask)?;
        m2 += obj.pass2_iou;
        mae += (g.value(obj.decoder.iou).item() - obj.pass2_iou).abs();
    }
    let n = count as f64;
    Ok(MetricsRecord {
        step,
        loss: loss / n,
        miou_pass1: m1 / n,
        miou_pass2: m2 / n,
        iou_head_mae: mae / n,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    pub last_step: u64,
    /// Training loss of the final step run, if any step ran.
    pub last_loss: Option<f64>,
    pub last_eval: Option<MetricsRecord>,
}

/// Batch `step` (1-based) of the training stream.
pub fn training_batch(gen: &SyntheticGenerator, cfg: &TrainConfig, step: u64) -> Result<Vec<SyntheticSample>> {
    let b = cfg.batch_size as u64;
    ((step - 1) * b..step * b).map(|i| gen.sample(cfg.data_seed, i)).collect()
}

fn save(cfg: &TrainConfig, path: &Path, step: u64, params: &DecoderParams, adam: &Adam) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.decoder.clone(), step, params.clone());
    ck.meta = serde_json::json!({ "train": cfg, "adam_steps": adam.steps_taken() });
    ck.extra = adam.export(params)?;
    ck.save(path)
}

fn append_record(path: &Path, rec: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains until `cfg.steps`, evaluating and checkpointing every
/// `cfg.eval_every` steps and at the end. With `resume`, continues from an
/// existing checkpoint at `paths.checkpoint` and appends to the log.
pub fn train_loop(cfg: &TrainConfig, paths: &TrainPaths, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let gen = SyntheticGenerator::new(cfg.synth_config())?;
    let (mut params, mut adam, start) = if resume && paths.checkpoint.exists() {
        let ck = Checkpoint::load(&paths.checkpoint)?;
        if ck.config != cfg.decoder {
            return Err(Error::Checkpoint("checkpoint was trained with a different decoder config".into()));
        }
        let adam = Adam::import(cfg.lr, ck.step, &ck.extra);
        log::info!("resuming from step {}", ck.step);
        (ck.params, adam, ck.step)
    } else {
        if paths.metrics_log.exists() {
            fs::remove_file(&paths.metrics_log).map_err(|e| Error::io(&paths.metrics_log, e))?;
        }
        (DecoderParams::init(&cfg.decoder, cfg.init_seed)?, Adam::new(cfg.lr), 0)
    };

    let mut last_loss = None;
    let mut last_eval = None;
    for step in start + 1..=cfg.steps {
        let batch = training_batch(&gen, cfg, step)?;
        let loss = train_step(&mut params, &batch, &mut adam, cfg, step)?;
        last_loss = Some(loss);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let rec = evaluate(&params, cfg, &gen, cfg.eval_seed, cfg.eval_samples, step)?;
            log::info!(
                "step {step}: train loss {loss:.4}, held-out mIoU pass1 {:.4} pass2 {:.4}, iou mae {:.4}",
                rec.miou_pass1,
                rec.miou_pass2,
                rec.iou_head_mae
            );
            append_record(&paths.metrics_log, &rec)?;
            save(cfg, &paths.checkpoint, step, &params, &adam)?;
            last_eval = Some(rec);
        }
    }
    Ok(TrainOutcome {
        params,
        last_step: cfg.steps.max(start),
        last_loss,
        last_eval,
    })
}

/// Reads a JSON-lines metrics log.
pub fn read_metrics_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let rec = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                offset,
                message: format!("metrics record: {e}"),
            })?;
            out.push(rec);
        }
        offset += line.len();
    }
    Ok(out)
}

//! Segmentation objective, synthetic data and the toy training loop.

mod harness;
mod loss;
mod optim;
mod synth;

pub use harness::{
    evaluate, logits_iou, read_metrics_log, sample_objective, train_loop, train_step, training_batch, MetricsRecord,
    ObjectiveVars, TrainConfig, TrainOutcome, TrainPaths,
};
pub use loss::{bce_dice_loss, bce_dice_value, LossConfig};
pub use optim::Adam;
pub use synth::{generate_samples, Shape, SynthConfig, SyntheticGenerator, SyntheticSample, PALETTE};

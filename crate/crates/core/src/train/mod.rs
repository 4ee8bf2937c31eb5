//! Optimisation, evaluation, checkpoints and ablation runs.

mod ablation;
mod batch;
mod checkpoint;
mod evaluate;
mod optim;
mod trainer;

pub use ablation::{
    run_ablation, summarize_runs, train_and_evaluate, AblationConfig, AblationReport, AblationRun, VariantSummary,
    ORDERING_TOLERANCE,
};
pub use batch::{make_batch, record_loss, sample_targets, Batch, LossConfig, LossVars};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use evaluate::{
    evaluate, evaluate_with_losses, predict_volume, predicted_masks, prediction_losses, reference_masks, score_masks,
    summarize, tile_starts, EvalConfig, EvalReport, SampleMetrics, VolumeLosses, VolumePrediction,
};
pub use optim::{adam_step, poly_lr, AdamConfig, AdamState};
pub use trainer::{
    log_to_csv, train, write_log_csv, LogRow, MetricSnapshot, RunOptions, TrainConfig, Trainer, CHECKPOINT_FILE,
    LOG_FILE, LOG_HEADER,
};

#[cfg(test)]
mod tests;

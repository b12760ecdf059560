//! Three-stage training: per-stage configs, AdamW with cosine decay, the
//! joint-loss step and checkpoint handoff between stages.

mod config;
mod optim;
mod run;
mod state;

pub use config::{InitFrom, StageConfig};
pub use optim::{cosine_lr, AdamHyper, AdamMoments};
pub use run::{
    adamw_step, check_corpora, draw_batch, loss_and_grads, run_pipeline, run_stage, PipelineOutcome, StageOutcome,
    StepBatch, TextBatch,
};
pub use state::{checkpoint_load, checkpoint_save, Checkpoint, TrainState, LOGIT_SCALE_NAME};

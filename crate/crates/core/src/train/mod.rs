//! Training loops for both stages and the two baselines.

mod config;
mod loops;
mod model;
mod schedule;

pub use self::config::{parse_loss_flags, Mode, TrainConfig};
pub use self::loops::{
    build_bank, embed_images, evaluate_encoders, frozen_features, literal_descriptions, load_images,
    run_baseline, run_stage1, run_stage2, stage1_batch_loss, stage2_batch_loss, Descriptions, RunOutputs,
    StepLog, TrainData, TrainReport,
};
pub use self::model::{CheckpointMeta, Classifier, Model, Temperature, INIT_LOGIT_SCALE, MAX_LOGIT_SCALE};
pub use self::schedule::{lr_stage1, lr_stage2, Stage2Schedule};

//! Optimization and evaluation: the dual-branch pre-training loop,
//! optimizers and schedules, bit-exact checkpoints, and the downstream
//! protocols (linear probe, fine-tune, few-shot, segmentation head).

mod checkpoint;
mod eval;
mod optim;
mod trainer;

pub use checkpoint::{load_params, Checkpoint, CHECKPOINT_VERSION};
pub use eval::{
    extract_features, extract_frame_features, fewshot_eval, fewshot_split, finetune,
    linear_probe, segmentation_head_finetune, stratified_fraction, ClassifierSettings,
    FinetuneOutcome, SegmentationOutcome,
};
pub use optim::{AdamW, Optimizer, OptimizerKind, Schedule, SgdMomentum};
pub use trainer::{video_stream_path, EpochStats, PretrainSettings, Trainer};

pub mod finetune;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use finetune::{classifier_accuracy, finetune_classifier, finetune_vlm, ClassifierReport, VlmReport};
pub use optim::{clip_global_norm, global_norm, AdamWParams, OptimizerState};
pub use schedule::{pretrain_groups, validate_pretrain, StageSchedule};
pub use trainer::{
    batch_indices, caption, caption_matches, encode_samples, mean_of, mean_token_loss, optimize_step, run_pretrain,
    run_stage, train_step, EncodedSample, MetricsLog, Output, PretrainReport, StepStats,
};

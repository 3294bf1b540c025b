//! Losses, online adaptation and the meta-training loop.

pub mod ablation;
pub mod loss;
pub mod meta;
pub mod online;
pub mod schedule;

pub use ablation::{ablation_toggles, all_variants, Variant};
pub use loss::{balanced_bce, episode_loss, iou_loss, pair_loss_on, LossReport};
pub use meta::{meta_train, sample_task, supervised_step, write_jsonl, EpochRecord, TaskPool, TaskRecord, Trained};
pub use online::{make_shots, online_optimize, Adapted, Shot};
pub use schedule::{cosine_anneal, Adam};

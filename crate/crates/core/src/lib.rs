//! Few-shot organ segmentation from a single annotated slice.
//!
//! A frozen ViT encoder with trainable adapters produces four levels of
//! embeddings. Point prompts refine the shallowest level, and a mask-attention
//! decoder fuses all levels conditioned on the support mask. Parameters are
//! meta-learned so that a few online gradient steps on a handful of labeled
//! slices adapt the model to a new organ.

pub mod app;
pub mod bench;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fmad;
pub mod metaopt;
pub mod model;
pub mod params;
pub mod prompt;
pub mod rng;

pub use config::{Config, DataConfig, DecoderKind, MetaConfig, ModelConfig, PromptMode, TrainMode};
pub use error::{Error, Result};
pub use metaseg_autodiff as autodiff;
pub use model::{forward_on, init_model, predict_logits, segment, Pair};
pub use params::{GradMap, ParamSet, Tag};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::config::Config;
    use crate::data::{default_families, gen_volume, ChunkedVolume};
    use crate::eval::query_pairs;
    use crate::model::Pair;

    pub fn desk_volume(seed: u64) -> ChunkedVolume {
        let cfg = Config::desk();
        gen_volume(&default_families(), cfg.data.n_slices, cfg.data.size, seed).unwrap()
    }

    pub fn desk_pairs(organ: &str, n: usize, seed: u64) -> Vec<Pair> {
        let mut p = query_pairs(&[desk_volume(seed)], organ).unwrap();
        p.truncate(n);
        p
    }
}

//! Few-shot benchmark on synthetic volumes.
//!
//! Leave-one-family-out: train on a handful of labeled images of every
//! family but one, then adapt to the held-out family from a few labeled
//! slices and score single-click segmentation of unseen volumes.

use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{gen_volume_with, ChunkedVolume};
use crate::error::{Error, Result};
use crate::eval::{eval_shots, mean_dsc, query_pairs};
use crate::metaopt::ablation::Variant;
use crate::metaopt::meta::{meta_train, TaskPool};
use crate::metaopt::online::{make_shots, online_optimize};
use crate::model::{init_model, Pair};
use crate::params::ParamSet;
use crate::rng::{purpose_stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub base: Config,
    /// Labeled images per training family in leave-one-out runs.
    pub train_images: usize,
    /// Labeled images of the evaluated family used for online adaptation.
    pub shots: usize,
    /// Online sweeps over the shots at test time.
    pub test_steps: usize,
    pub test_volumes: usize,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut base = Config::desk();
        base.meta.alpha = 0.1;
        base.meta.beta0 = 3e-3;
        // Meta-training uses as many sweeps as test-time adaptation.
        base.meta.inner_steps = 5;
        base.meta.epochs = 100;
        Self {
            base,
            train_images: 5,
            shots: 5,
            test_steps: 5,
            test_volumes: 2,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Volumes of one benchmark seed.
#[derive(Debug, Clone)]
pub struct BenchData {
    pub train: ChunkedVolume,
    pub adapt: ChunkedVolume,
    pub test: Vec<ChunkedVolume>,
}

pub fn bench_data(bench: &BenchConfig, seed: u64) -> Result<BenchData> {
    let d = &bench.base.data;
    let make = |k: u64| gen_volume_with(&d.families, d.n_slices, d.size, d.n_chunks, seed * 64 + k, true);
    Ok(BenchData {
        train: make(0)?,
        adapt: make(1)?,
        test: (0..bench.test_volumes as u64)
            .map(|k| make(2 + k))
            .collect::<Result<_>>()?,
    })
}

/// `n` pairs drawn without replacement.
pub fn pick(pairs: &[Pair], n: usize, seed: u64, path: &[u64]) -> Result<Vec<Pair>> {
    if pairs.len() < n {
        return Err(Error::Task(format!(
            "need {n} labeled pairs, only {} available",
            pairs.len()
        )));
    }
    let idx = index::sample(&mut purpose_stream(seed, Purpose::Split, path), pairs.len(), n);
    Ok(idx.iter().map(|i| pairs[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    /// Family excluded from training, if any.
    pub held_out: Option<String>,
    /// Family evaluated.
    pub organ: String,
    /// Mean query Dice of the trained model before online adaptation.
    pub dsc_before: f64,
    /// Mean query Dice after each online sweep over the shots.
    pub curve: Vec<f64>,
    pub final_meta_loss: Option<f64>,
    pub seconds: f64,
}

impl RunResult {
    /// Dice after the last online sweep (before adaptation when there were none).
    pub fn dsc_after(&self) -> f64 {
        self.curve.last().copied().unwrap_or(self.dsc_before)
    }
}

fn organ_names(bench: &BenchConfig) -> Vec<String> {
    bench.base.data.families.iter().map(|f| f.name.clone()).collect()
}

fn organ_index(bench: &BenchConfig, organ: &str) -> Result<u64> {
    organ_names(bench)
        .iter()
        .position(|o| o == organ)
        .map(|i| i as u64)
        .ok_or_else(|| Error::Lookup(format!("unknown family `{organ}`")))
}

fn train(cfg: &Config, pool: &TaskPool, seed: u64) -> Result<(ParamSet, Option<f64>)> {
    let init = init_model(&cfg.model, seed)?;
    let trained = meta_train(&cfg.model, &cfg.meta, &init, pool, &mut |_| Ok(()))?;
    Ok((trained.params, trained.log.last().map(|r| r.meta_loss)))
}

/// Scores `params` on `organ`, then adapts sweep by sweep on the shots.
fn evaluate(
    bench: &BenchConfig,
    cfg: &Config,
    params: &ParamSet,
    data: &BenchData,
    organ: &str,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let oi = organ_index(bench, organ)?;
    let shots_pairs = pick(
        &query_pairs(std::slice::from_ref(&data.adapt), organ)?,
        bench.shots,
        seed,
        &[1, oi],
    )?;
    let shots = make_shots(&cfg.model, &shots_pairs, seed, &[1_000, oi])?;
    let queries = eval_shots(&cfg.model, &query_pairs(&data.test, organ)?, seed ^ (oi << 32))?;
    let before = mean_dsc(&cfg.model, params, &queries)?;
    let mut p = params.clone();
    let mut curve = Vec::with_capacity(bench.test_steps);
    for _ in 0..bench.test_steps {
        p = online_optimize(&cfg.model, &p, &shots, 1, cfg.meta.alpha)?.params;
        curve.push(mean_dsc(&cfg.model, &p, &queries)?);
    }
    Ok((before, curve))
}

/// Trains without `held_out` on `train_images` images per remaining family,
/// then adapts to `held_out` and scores it.
pub fn leave_one_out(bench: &BenchConfig, variant: Variant, held_out: &str, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let mut cfg = variant.apply(&bench.base);
    cfg.meta.seed = seed;
    let data = bench_data(bench, seed)?;
    let mut pool = TaskPool::default();
    for organ in organ_names(bench).iter().filter(|o| *o != held_out) {
        let all = query_pairs(std::slice::from_ref(&data.train), organ)?;
        pool.insert(
            organ.clone(),
            pick(&all, bench.train_images, seed, &[0, organ_index(bench, organ)?])?,
        );
    }
    organ_index(bench, held_out)?;
    cfg.meta.tasks = cfg.meta.tasks.min(pool.len());
    let (params, final_meta_loss) = train(&cfg, &pool, seed)?;
    let (dsc_before, curve) = evaluate(bench, &cfg, &params, &data, held_out, seed)?;
    Ok(RunResult {
        variant: variant.to_string(),
        seed,
        held_out: Some(held_out.to_string()),
        organ: held_out.to_string(),
        dsc_before,
        curve,
        final_meta_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains on every labeled pair of every family, then scores each family
/// on unseen volumes.
pub fn in_distribution(bench: &BenchConfig, variant: Variant, seed: u64) -> Result<Vec<RunResult>> {
    let start = Instant::now();
    let mut cfg = variant.apply(&bench.base);
    cfg.meta.seed = seed;
    let data = bench_data(bench, seed)?;
    let organs = organ_names(bench);
    let pool = TaskPool::from_volumes(std::slice::from_ref(&data.train), &organs)?;
    cfg.meta.tasks = cfg.meta.tasks.min(pool.len());
    let (params, final_meta_loss) = train(&cfg, &pool, seed)?;
    let train_secs = start.elapsed().as_secs_f64();
    organs
        .iter()
        .map(|organ| {
            let t = Instant::now();
            let (dsc_before, curve) = evaluate(bench, &cfg, &params, &data, organ, seed)?;
            Ok(RunResult {
                variant: variant.to_string(),
                seed,
                held_out: None,
                organ: organ.clone(),
                dsc_before,
                curve,
                final_meta_loss,
                seconds: train_secs / organs.len() as f64 + t.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// One leave-one-out run of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    pub held_out: String,
    pub seed: u64,
}

/// Runs every spec on the global thread pool; results come back in spec order.
pub fn run_matrix(bench: &BenchConfig, specs: &[RunSpec]) -> Result<Vec<RunResult>> {
    use rayon::prelude::*;
    specs
        .par_iter()
        .map(|s| leave_one_out(bench, s.variant, &s.held_out, s.seed))
        .collect()
}

/// In-distribution runs of every variant and seed, in parallel.
pub fn in_distribution_matrix(bench: &BenchConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<RunResult>> {
    use rayon::prelude::*;
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let nested = jobs
        .par_iter()
        .map(|&(v, s)| in_distribution(bench, v, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Mean of `f` over the results matching `keep`.
pub fn mean_of(results: &[RunResult], keep: impl Fn(&RunResult) -> bool, f: impl Fn(&RunResult) -> f64) -> f64 {
    let xs: Vec<f64> = results.iter().filter(|r| keep(r)).map(f).collect();
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pick_is_seeded_and_without_replacement() {
        let pairs = crate::testutil::desk_pairs("liver", 12, 1);
        let a = pick(&pairs, 5, 3, &[0]).unwrap();
        assert_eq!(a, pick(&pairs, 5, 3, &[0]).unwrap());
        assert_ne!(a, pick(&pairs, 5, 4, &[0]).unwrap());
        for (i, p) in a.iter().enumerate() {
            assert!(!a[..i].contains(p));
        }
        assert!(matches!(pick(&pairs, 13, 3, &[0]), Err(Error::Task(_))));
    }

    #[test]
    fn seeds_get_distinct_volumes() {
        let b = BenchConfig {
            test_volumes: 1,
            ..BenchConfig::default()
        };
        let d0 = bench_data(&b, 0).unwrap();
        let d1 = bench_data(&b, 1).unwrap();
        assert_ne!(d0.train.slices, d0.adapt.slices);
        assert_ne!(d0.train.slices, d1.train.slices);
        assert_ne!(d0.test[0].slices, d0.adapt.slices);
    }

    #[test]
    fn tiny_run_produces_a_curve() {
        let mut b = BenchConfig {
            test_volumes: 1,
            test_steps: 2,
            ..BenchConfig::default()
        };
        b.base.meta.epochs = 1;
        let r = leave_one_out(&b, Variant::FULL, "spleen", 0).unwrap();
        assert_eq!(r.curve.len(), 2);
        assert_eq!(r.held_out.as_deref(), Some("spleen"));
        assert!(r.curve.iter().chain([&r.dsc_before]).all(|d| (0.0..=1.0).contains(d)));
        assert!(matches!(
            leave_one_out(&b, Variant::FULL, "pancreas", 0),
            Err(Error::Lookup(_))
        ));
    }
}

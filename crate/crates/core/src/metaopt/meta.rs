//! Offline meta-learner: learns an initialization that adapts quickly.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{MetaConfig, ModelConfig, TrainMode};
use crate::data::{make_episodes, ChunkedVolume};
use crate::error::{Error, Result};
use crate::metaopt::loss::LossReport;
use crate::metaopt::online::{make_shots, mean_grad, run, shot_hvp, Shot};
use crate::metaopt::schedule::{cosine_anneal, Outer};
use crate::model::Pair;
use crate::params::{axpy, ensure_finite, GradMap, ParamSet};
use crate::rng::{purpose_stream, Purpose};

/// Labeled pairs grouped by organ.
#[derive(Debug, Clone, Default)]
pub struct TaskPool {
    organs: BTreeMap<String, Vec<Pair>>,
}

impl TaskPool {
    /// Every query slice of every episode, for each listed organ. Pairs whose
    /// query mask is empty cannot be prompted and are left out.
    pub fn from_volumes(volumes: &[ChunkedVolume], organs: &[String]) -> Result<Self> {
        let mut pool = TaskPool::default();
        for organ in organs {
            let entry = pool.organs.entry(organ.clone()).or_default();
            for v in volumes {
                for ep in make_episodes(v, organ)?.episodes {
                    entry.extend(Pair::from_episode(&ep).into_iter().filter(|p| !p.mask.is_empty()));
                }
            }
        }
        Ok(pool)
    }

    pub fn insert(&mut self, organ: impl Into<String>, pairs: Vec<Pair>) {
        self.organs.insert(organ.into(), pairs);
    }

    pub fn organs(&self) -> impl Iterator<Item = &str> {
        self.organs.keys().map(String::as_str)
    }

    pub fn pairs(&self, organ: &str) -> Result<&[Pair]> {
        self.organs
            .get(organ)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no task for organ `{organ}`")))
    }

    pub fn len(&self) -> usize {
        self.organs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.organs.is_empty()
    }
}

/// One task of a meta-batch: `K` pairs to adapt on and `K` fresh pairs to score.
#[derive(Debug, Clone)]
pub struct TaskSample {
    pub organ: String,
    pub support: Vec<Pair>,
    pub query: Vec<Pair>,
}

/// Draws the pairs of task `slot` in `epoch`. The fresh pairs avoid the
/// adaptation pairs whenever the pool is large enough.
pub fn sample_task(pool: &TaskPool, organ: &str, k: usize, seed: u64, epoch: u64, slot: u64) -> Result<TaskSample> {
    let pairs = pool.pairs(organ)?;
    let n = pairs.len();
    if n == 0 {
        return Err(Error::Task(format!("organ `{organ}` has no usable pairs")));
    }
    let path = [epoch, slot];
    let picked = index::sample(&mut purpose_stream(seed, Purpose::Support, &path), n, k.min(n)).into_vec();
    let rest: Vec<usize> = (0..n).filter(|i| !picked.contains(i)).collect();
    let mut rs = purpose_stream(seed, Purpose::Resample, &path);
    let fresh: Vec<usize> = if rest.len() >= k {
        index::sample(&mut rs, rest.len(), k).iter().map(|i| rest[i]).collect()
    } else {
        index::sample(&mut rs, n, k.min(n)).into_vec()
    };
    Ok(TaskSample {
        organ: organ.to_string(),
        support: picked.iter().map(|&i| pairs[i].clone()).collect(),
        query: fresh.iter().map(|&i| pairs[i].clone()).collect(),
    })
}

/// Picks `t` distinct organs for `epoch`; organs without usable pairs are
/// passed over with a warning.
pub fn sample_organs(pool: &TaskPool, t: usize, seed: u64, epoch: u64) -> Result<Vec<String>> {
    let mut all: Vec<&str> = pool.organs().collect();
    all.shuffle(&mut purpose_stream(seed, Purpose::Tasks, &[epoch]));
    let mut chosen = Vec::with_capacity(t);
    for organ in all {
        if chosen.len() == t {
            break;
        }
        if pool.pairs(organ)?.is_empty() {
            tracing::warn!(organ, epoch, "task has no valid episodes, drawing another");
            continue;
        }
        chosen.push(organ.to_string());
    }
    if chosen.len() < t {
        return Err(Error::Task(format!(
            "need {t} tasks per meta-batch but only {} organs have usable pairs",
            chosen.len()
        )));
    }
    Ok(chosen)
}

/// Prompts for a task: adaptation shots and scoring shots.
pub fn task_shots(
    cfg: &ModelConfig,
    task: &TaskSample,
    seed: u64,
    epoch: u64,
    slot: u64,
) -> Result<(Vec<Shot>, Vec<Shot>)> {
    Ok((
        make_shots(cfg, &task.support, seed, &[epoch, slot, 0])?,
        make_shots(cfg, &task.query, seed, &[epoch, slot, 1])?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub organ: String,
    /// Mean loss over the first sweep of online steps (absent without adaptation).
    pub inner_first: Option<f64>,
    /// Mean loss over the last sweep.
    pub inner_last: Option<f64>,
    /// Loss on the fresh pairs at the adapted parameters.
    pub query_loss: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub meta_loss: f64,
    pub beta: f64,
    pub per_task: Vec<TaskRecord>,
}

pub fn write_jsonl<W: Write>(w: &mut W, rec: &EpochRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n").map_err(|e| Error::io("training log", e))
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ParamSet,
    pub log: Vec<EpochRecord>,
}

struct TaskOutcome {
    grad: GradMap,
    record: TaskRecord,
}

fn sweep_mean(trace: &[LossReport]) -> f64 {
    trace.iter().map(|r| r.total).sum::<f64>() / trace.len() as f64
}

fn task_outcome(
    cfg: &ModelConfig,
    meta: &MetaConfig,
    theta: &ParamSet,
    task: &TaskSample,
    epoch: u64,
    slot: u64,
) -> Result<TaskOutcome> {
    let (support, query) = task_shots(cfg, task, meta.seed, epoch, slot)?;
    if meta.mode == TrainMode::FineTune {
        let all: Vec<Shot> = support.into_iter().chain(query).collect();
        let (loss, grad) = mean_grad(cfg, theta, &all)?;
        return Ok(TaskOutcome {
            grad,
            record: TaskRecord {
                organ: task.organ.clone(),
                inner_first: None,
                inner_last: None,
                query_loss: loss.total,
            },
        });
    }
    let adapted = run(cfg, theta, &support, meta.inner_steps, meta.alpha, meta.second_order)?;
    let (loss, mut grad) = mean_grad(cfg, &adapted.params, &query)?;
    if meta.second_order {
        // v ← (I − α H_t) v, from the last inner step back to the first.
        let k = support.len();
        for (t, snapshot) in adapted.history.iter().enumerate().rev() {
            let hv = shot_hvp(cfg, snapshot, &support[t % k], &grad)?;
            axpy(&mut grad, -meta.alpha, &hv)?;
        }
    }
    let k = support.len();
    let (first, last) = if adapted.trace.is_empty() {
        (None, None)
    } else {
        let n = adapted.trace.len();
        (
            Some(sweep_mean(&adapted.trace[..k])),
            Some(sweep_mean(&adapted.trace[n - k..])),
        )
    };
    Ok(TaskOutcome {
        grad,
        record: TaskRecord {
            organ: task.organ.clone(),
            inner_first: first,
            inner_last: last,
            query_loss: loss.total,
        },
    })
}

/// Runs `E` epochs from `init`. Each epoch samples `T` tasks, adapts a copy
/// of the parameters to each, scores the adapted copies on fresh pairs, and
/// moves the shared initialization along the averaged gradient with a
/// cosine-annealed rate. `on_epoch` sees every log record as it is produced.
pub fn meta_train(
    cfg: &ModelConfig,
    meta: &MetaConfig,
    init: &ParamSet,
    pool: &TaskPool,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    meta.validate()?;
    if pool.len() < meta.tasks {
        return Err(Error::Task(format!(
            "{} tasks per meta-batch requested but only {} organs available",
            meta.tasks,
            pool.len()
        )));
    }
    let threads = if meta.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(meta.workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };
    let mut params = init.clone();
    let mut outer = Outer::new(meta.outer);
    let mut log = Vec::with_capacity(meta.epochs);
    for e in 1..=meta.epochs {
        let epoch = e as u64;
        let beta = cosine_anneal(meta.beta0, e - 1, meta.epochs, meta.eta_min)?;
        let organs = sample_organs(pool, meta.tasks, meta.seed, epoch)?;
        let tasks = organs
            .iter()
            .enumerate()
            .map(|(slot, organ)| sample_task(pool, organ, meta.pairs, meta.seed, epoch, slot as u64))
            .collect::<Result<Vec<_>>>()?;
        let work = |(slot, task): (usize, &TaskSample)| task_outcome(cfg, meta, &params, task, epoch, slot as u64);
        let outcomes: Vec<TaskOutcome> = match &threads {
            Some(tp) => tp.install(|| tasks.par_iter().enumerate().map(work).collect::<Result<_>>())?,
            None => tasks.iter().enumerate().map(work).collect::<Result<_>>()?,
        };
        let w = 1.0 / outcomes.len() as f64;
        let mut grad = GradMap::new();
        for o in &outcomes {
            axpy(&mut grad, w, &o.grad)?;
        }
        ensure_finite(&grad, &format!("meta-gradient at epoch {e}"))?;
        outer.step(&mut params, &grad, beta)?;
        let meta_loss = outcomes.iter().map(|o| o.record.query_loss).sum::<f64>() * w;
        let rec = EpochRecord {
            epoch: e,
            meta_loss,
            beta,
            per_task: outcomes.into_iter().map(|o| o.record).collect(),
        };
        tracing::info!(epoch = e, meta_loss, beta, "epoch done");
        on_epoch(&rec)?;
        log.push(rec);
    }
    Ok(Trained { params, log })
}

/// One plain supervised step on `shots`; returns the loss before the step.
pub fn supervised_step(cfg: &ModelConfig, params: &mut ParamSet, shots: &[Shot], lr: f64) -> Result<LossReport> {
    let (loss, grad) = mean_grad(cfg, params, shots)?;
    ensure_finite(&grad, "supervised step")?;
    params.sgd_step(&grad, lr)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, OuterOptimizer};
    use crate::metaopt::online::mean_loss;
    use crate::model::init_model;
    use crate::testutil::desk_pairs;
    use metaseg_autodiff::Tensor;

    fn pool(k: usize) -> TaskPool {
        let mut pool = TaskPool::default();
        for organ in ["liver", "spleen", "kidney_l"] {
            pool.insert(organ, desk_pairs(organ, k, 3));
        }
        pool
    }

    fn small_meta() -> MetaConfig {
        MetaConfig {
            pairs: 2,
            tasks: 2,
            epochs: 2,
            inner_steps: 1,
            alpha: 0.05,
            beta0: 1e-3,
            seed: 4,
            ..MetaConfig::default()
        }
    }

    #[test]
    fn fresh_pairs_avoid_the_support_pairs() {
        let pool = pool(6);
        let t = sample_task(&pool, "liver", 3, 1, 1, 0).unwrap();
        assert_eq!((t.support.len(), t.query.len()), (3, 3));
        for q in &t.query {
            assert!(!t.support.contains(q));
        }
        let again = sample_task(&pool, "liver", 3, 1, 1, 0).unwrap();
        assert_eq!(t.query, again.query);
    }

    #[test]
    fn too_many_tasks_is_a_task_error() {
        let cfg = Config::desk();
        let init = init_model(&cfg.model, 0).unwrap();
        let meta = MetaConfig {
            tasks: 4,
            ..small_meta()
        };
        let err = meta_train(&cfg.model, &meta, &init, &pool(2), &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Task(_)), "{err}");
    }

    #[test]
    fn zero_inner_steps_with_plain_outer_sgd_is_a_supervised_step() {
        let cfg = Config::desk();
        let init = init_model(&cfg.model, 0).unwrap();
        let pool = pool(4);
        let meta = MetaConfig {
            inner_steps: 0,
            tasks: 1,
            epochs: 1,
            outer: OuterOptimizer::Sgd,
            ..small_meta()
        };
        let trained = meta_train(&cfg.model, &meta, &init, &pool, &mut |_| Ok(())).unwrap();

        let organ = &sample_organs(&pool, 1, meta.seed, 1).unwrap()[0];
        let task = sample_task(&pool, organ, meta.pairs, meta.seed, 1, 0).unwrap();
        let (_, query) = task_shots(&cfg.model, &task, meta.seed, 1, 0).unwrap();
        let mut expected = init.clone();
        supervised_step(&cfg.model, &mut expected, &query, meta.beta0).unwrap();
        for (name, p) in expected.iter() {
            let got = trained.params.tensor(name).unwrap();
            assert!(got.max_abs_diff(&p.tensor) <= 1e-12, "{name}");
        }
    }

    #[test]
    fn training_keeps_frozen_tensors_and_is_reproducible() {
        let cfg = Config::desk();
        let init = init_model(&cfg.model, 0).unwrap();
        let pool = pool(4);
        let mut lines = Vec::new();
        let a = meta_train(&cfg.model, &small_meta(), &init, &pool, &mut |r| {
            write_jsonl(&mut lines, r)
        })
        .unwrap();
        let b = meta_train(&cfg.model, &small_meta(), &init, &pool, &mut |_| Ok(())).unwrap();
        assert_eq!(a.params.frozen_hash(), init.frozen_hash());
        assert_ne!(a.params.hash(), init.hash());
        assert_eq!(a.params.hash(), b.params.hash());
        let text = String::from_utf8(lines).unwrap();
        let recs: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs, a.log);
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.per_task.len() == 2 && r.meta_loss.is_finite()));
    }

    #[test]
    fn worker_pool_gives_identical_parameters() {
        let cfg = Config::desk();
        let init = init_model(&cfg.model, 0).unwrap();
        let pool = pool(4);
        let one = meta_train(&cfg.model, &small_meta(), &init, &pool, &mut |_| Ok(())).unwrap();
        let meta = MetaConfig {
            workers: 2,
            ..small_meta()
        };
        let two = meta_train(&cfg.model, &meta, &init, &pool, &mut |_| Ok(())).unwrap();
        assert_eq!(one.params.hash(), two.params.hash());
    }

    /// Directional derivative of the post-adaptation query loss against the
    /// meta-gradient, with and without second-order terms.
    #[test]
    fn second_order_meta_gradient_matches_finite_differences() {
        let cfg = Config::desk();
        let theta = init_model(&cfg.model, 1).unwrap();
        let pool = pool(4);
        let meta = MetaConfig {
            pairs: 1,
            inner_steps: 2,
            alpha: 0.2,
            second_order: true,
            ..small_meta()
        };
        let task = sample_task(&pool, "liver", 1, 0, 1, 0).unwrap();
        let exact = task_outcome(&cfg.model, &meta, &theta, &task, 1, 0).unwrap().grad;
        let first = task_outcome(
            &cfg.model,
            &MetaConfig {
                second_order: false,
                ..meta.clone()
            },
            &theta,
            &task,
            1,
            0,
        )
        .unwrap()
        .grad;

        let (support, query) = task_shots(&cfg.model, &task, meta.seed, 1, 0).unwrap();
        let objective = |p: &ParamSet| {
            let adapted = run(&cfg.model, p, &support, meta.inner_steps, meta.alpha, false).unwrap();
            mean_loss(&cfg.model, &adapted.params, &query).unwrap().total
        };
        let mut rng = crate::rng::stream(8, &[]);
        let u: GradMap = exact
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::randn(t.shape().to_vec(), 1.0, &mut rng)))
            .collect();
        let eps = 1e-5;
        let mut plus = theta.clone();
        plus.sgd_step(&u, -eps).unwrap();
        let mut minus = theta.clone();
        minus.sgd_step(&u, eps).unwrap();
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
        let dot = |g: &GradMap| -> f64 {
            g.iter()
                .map(|(n, t)| t.data().iter().zip(u[n].data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (so, fo) = (dot(&exact), dot(&first));
        assert!(
            (so - numeric).abs() <= 1e-5 * numeric.abs().max(1e-3),
            "second order {so} vs {numeric}"
        );
        assert!(
            (fo - numeric).abs() > (so - numeric).abs(),
            "first order {fo} should be further from {numeric}"
        );
    }
}

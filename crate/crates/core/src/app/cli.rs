//! Command line: data generation, training, adaptation, evaluation,
//! gradient checks, the service and ablations.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::app::checkpoint::{load_checkpoint, save_checkpoint};
use crate::app::service::{serve, ServiceConfig};
use crate::bench::{leave_one_out, pick, BenchConfig, RunResult};
use crate::config::Config;
use crate::data::{gen_volume_with, list_volumes, load_volume, make_episodes, save_volume, ChunkedVolume};
use crate::error::{Error, Result};
use crate::eval::{eval_shots, mean_dsc, query_pairs};
use crate::fmad::fmam_gradcheck;
use crate::metaopt::ablation::{all_variants, Variant};
use crate::metaopt::meta::{meta_train, write_jsonl, TaskPool};
use crate::metaopt::online::{make_shots, online_optimize};
use crate::model::{init_model, Pair};

#[derive(Debug, Parser)]
#[command(
    name = "metaseg",
    version,
    about = "Few-shot organ segmentation with meta-learned online adaptation"
)]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration layered over the defaults; missing keys keep their default values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic volumes.
    GenData(GenDataArgs),
    /// Meta-train and write a checkpoint with its JSONL log.
    Train(TrainArgs),
    /// Adapt a checkpoint to one organ of a volume.
    Adapt(AdaptArgs),
    /// Per-organ query Dice of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and the mask attention module.
    Gradcheck(GradcheckArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Leave-one-family-out comparison of model variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of volumes (defaults to the config's `data.n_volumes`).
    #[arg(long)]
    pub volumes: Option<usize>,
    /// Skip the per-pixel noise.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of volume manifests.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to the checkpoint path with a `.jsonl` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides the config's `meta.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated organs to train on (defaults to every family).
    #[arg(long, value_delimiter = ',')]
    pub organs: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Volume manifest.
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub organ: String,
    /// Adapt on the pairs of this chunk; otherwise on `meta.pairs` pairs drawn from the volume.
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Adapted checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of volume manifests.
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the JSON table here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = metaseg_autodiff::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = metaseg_autodiff::gradcheck::DEFAULT_TOLERANCE)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides `METASEG_PORT`.
    #[arg(long)]
    pub port: Option<u16>,
    /// Overrides `METASEG_DATA_DIR`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Variants such as `ss-fmad-meta`; defaults to all twelve.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Families to hold out; defaults to every family.
    #[arg(long, value_delimiter = ',')]
    pub held_out: Vec<String>,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Overrides the config's `meta.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// One JSON line per run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<Option<String>> {
    path.map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .transpose()
}

fn layered(base: Config, text: Option<&str>) -> Result<Config> {
    match text {
        Some(t) => base.overlay(t),
        None => {
            base.validate()?;
            Ok(base)
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let text = read_config(cli.config.as_deref())?;
    let cfg = layered(Config::desk(), text.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, cli.seed, &a),
        Command::Train(a) => train(cfg, cli.seed, &a),
        Command::Adapt(a) => adapt(cli.seed, &a),
        Command::Eval(a) => eval(cli.seed, &a),
        Command::Gradcheck(a) => gradcheck(cli.seed, &a),
        Command::Serve(a) => {
            let mut sc = ServiceConfig::from_env()?;
            if let Some(p) = a.port {
                sc.port = p;
            }
            if let Some(d) = a.data_dir {
                sc.data_dir = d;
            }
            tokio::runtime::Runtime::new()
                .map_err(|e| Error::io("async runtime", e))?
                .block_on(serve(sc))
        }
        Command::Ablate(a) => ablate(text.as_deref(), cli.seed, &a),
    }
}

fn gen_data(cfg: &Config, seed: u64, a: &GenDataArgs) -> Result<()> {
    let d = &cfg.data;
    let n = a.volumes.unwrap_or(d.n_volumes);
    for i in 0..n as u64 {
        let mut v = gen_volume_with(
            &d.families,
            d.n_slices,
            d.size,
            d.n_chunks,
            seed.wrapping_mul(1_000).wrapping_add(i),
            !a.clean,
        )?;
        v.id = format!("vol{i:03}");
        let path = save_volume(&a.out, &v)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn load_dir(dir: &Path) -> Result<Vec<ChunkedVolume>> {
    let paths = list_volumes(dir)?;
    if paths.is_empty() {
        return Err(Error::Lookup(format!("no volume manifests in {}", dir.display())));
    }
    paths.iter().map(|p| load_volume(p)).collect()
}

fn train(mut cfg: Config, seed: u64, a: &TrainArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.meta.epochs = e;
    }
    cfg.meta.seed = seed;
    cfg.validate()?;
    let volumes = load_dir(&a.data)?;
    let organs = if a.organs.is_empty() {
        cfg.data.families.iter().map(|f| f.name.clone()).collect()
    } else {
        a.organs.clone()
    };
    let pool = TaskPool::from_volumes(&volumes, &organs)?;
    let init = init_model(&cfg.model, seed)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("jsonl"));
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let trained = meta_train(&cfg.model, &cfg.meta, &init, &pool, &mut |rec| {
        write_jsonl(&mut log, rec)?;
        eprintln!(
            "epoch {:>4}  meta-loss {:.5}  beta {:.3e}",
            rec.epoch, rec.meta_loss, rec.beta
        );
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&a.out, &cfg, &trained.params)?;
    println!("{}", a.out.display());
    Ok(())
}

fn adapt(seed: u64, a: &AdaptArgs) -> Result<()> {
    let (ckpt, params) = load_checkpoint(&a.checkpoint)?;
    let cfg = ckpt.config;
    let v = load_volume(&a.volume)?;
    let pairs: Vec<Pair> = match a.chunk {
        Some(c) => {
            let eps = make_episodes(&v, &a.organ)?;
            let ep = eps
                .episodes
                .iter()
                .find(|e| e.chunk == c)
                .ok_or_else(|| Error::Task(format!("chunk {c} has no usable `{}` episode", a.organ)))?;
            Pair::from_episode(ep)
                .into_iter()
                .filter(|p| !p.mask.is_empty())
                .collect()
        }
        None => {
            let all = query_pairs(std::slice::from_ref(&v), &a.organ)?;
            pick(&all, cfg.meta.pairs.min(all.len()), seed, &[2])?
        }
    };
    let shots = make_shots(&cfg.model, &pairs, seed, &[3])?;
    let steps = a.steps.unwrap_or(cfg.meta.inner_steps);
    let alpha = a.alpha.unwrap_or(cfg.meta.alpha);
    let adapted = online_optimize(&cfg.model, &params, &shots, steps, alpha)?;
    for (i, r) in adapted.trace.iter().enumerate() {
        eprintln!("step {i:>3}  loss {:.5}", r.total);
    }
    save_checkpoint(&a.out, &cfg, &adapted.params)?;
    println!("{}", a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    organ: String,
    dsc: f64,
    queries: usize,
}

fn eval(seed: u64, a: &EvalArgs) -> Result<()> {
    let (ckpt, params) = load_checkpoint(&a.checkpoint)?;
    let cfg = ckpt.config;
    let volumes = load_dir(&a.data)?;
    let mut rows = Vec::new();
    for f in &cfg.data.families {
        let pairs = query_pairs(&volumes, &f.name)?;
        if pairs.is_empty() {
            continue;
        }
        let queries = eval_shots(&cfg.model, &pairs, seed)?;
        rows.push(EvalRow {
            organ: f.name.clone(),
            dsc: mean_dsc(&cfg.model, &params, &queries)?,
            queries: queries.len(),
        });
    }
    let table: serde_json::Map<String, serde_json::Value> =
        rows.iter().map(|r| (r.organ.clone(), r.dsc.into())).collect();
    let json = serde_json::to_string(&table)?;
    if let Some(p) = &a.json {
        std::fs::write(p, &json).map_err(|e| Error::io(p, e))?;
    }
    println!("{json}");
    println!("{:<12} {:>8} {:>8}", "organ", "dsc", "queries");
    for r in &rows {
        println!("{:<12} {:>8.4} {:>8}", r.organ, r.dsc, r.queries);
    }
    Ok(())
}

fn gradcheck(seed: u64, a: &GradcheckArgs) -> Result<()> {
    let mut checks = metaseg_autodiff::gradcheck::check_catalog(seed, a.trials, a.step, a.tol)?;
    checks.extend(fmam_gradcheck(seed, a.trials, 0.1, a.step, a.tol)?);
    let mut failed = 0;
    println!(
        "{:<20} {:>5} {:>5} {:>12}  result",
        "op", "input", "trial", "max rel err"
    );
    for c in &checks {
        if !c.report.pass {
            failed += 1;
        }
        println!(
            "{:<20} {:>5} {:>5} {:>12.3e}  {}",
            c.op,
            c.input,
            c.trial,
            c.report.max_rel_err,
            if c.report.pass { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Error::Task(format!(
            "{failed} of {} gradient checks failed",
            checks.len()
        )));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn ablate(config: Option<&str>, seed: u64, a: &AblateArgs) -> Result<()> {
    let mut bench = BenchConfig::default();
    bench.base = layered(bench.base, config)?;
    if let Some(e) = a.epochs {
        bench.base.meta.epochs = e;
    }
    let variants: Vec<Variant> = if a.variants.is_empty() {
        all_variants()
    } else {
        a.variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
    };
    let held_out: Vec<String> = if a.held_out.is_empty() {
        bench.base.data.families.iter().map(|f| f.name.clone()).collect()
    } else {
        a.held_out.clone()
    };
    let mut out = match &a.out {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut results: Vec<RunResult> = Vec::new();
    for v in &variants {
        for organ in &held_out {
            for s in seed..seed + a.seeds {
                let r = leave_one_out(&bench, *v, organ, s)?;
                eprintln!(
                    "{v} {organ} seed {s}: before {:.4} after {:.4}",
                    r.dsc_before,
                    r.dsc_after()
                );
                if let Some(w) = out.as_mut() {
                    serde_json::to_writer(&mut *w, &r)?;
                    w.write_all(b"\n").map_err(|e| Error::io("ablation log", e))?;
                }
                results.push(r);
            }
        }
    }
    if let Some(w) = out.as_mut() {
        w.flush().map_err(|e| Error::io("ablation log", e))?;
    }
    println!("{:<20} {:>10} {:>10} {:>6}", "variant", "before", "after", "runs");
    for v in &variants {
        let name = v.to_string();
        let rs: Vec<&RunResult> = results.iter().filter(|r| r.variant == name).collect();
        let n = rs.len() as f64;
        println!(
            "{:<20} {:>10.4} {:>10.4} {:>6}",
            name,
            rs.iter().map(|r| r.dsc_before).sum::<f64>() / n,
            rs.iter().map(|r| r.dsc_after()).sum::<f64>() / n,
            rs.len()
        );
    }
    Ok(())
}

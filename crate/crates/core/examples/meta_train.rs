//! Meta-trains a small model on synthetic volumes, streaming the epoch log
//! as JSONL, and writes a checkpoint.
//!
//! cargo run --release --example meta_train -- /tmp/metaseg-ckpt

use std::path::PathBuf;

use metaseg::app::{checkpoint_hash, save_checkpoint};
use metaseg::bench::BenchConfig;
use metaseg::data::gen_volume;
use metaseg::init_model;
use metaseg::metaopt::{meta_train, write_jsonl, TaskPool};

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "metaseg-ckpt".into()));
    std::fs::create_dir_all(&out)?;
    let mut cfg = BenchConfig::default().base;
    cfg.meta.epochs = 30;
    let d = &cfg.data;
    let volumes = (0..2)
        .map(|s| gen_volume(&d.families, d.n_slices, d.size, s))
        .collect::<Result<Vec<_>, _>>()?;
    let organs: Vec<String> = d.families.iter().map(|f| f.name.clone()).collect();
    let pool = TaskPool::from_volumes(&volumes, &organs)?;

    let init = init_model(&cfg.model, 0)?;
    let mut log = Vec::new();
    let trained = meta_train(&cfg.model, &cfg.meta, &init, &pool, &mut |rec| {
        println!(
            "epoch {:>3}  meta-loss {:.4}  beta {:.2e}",
            rec.epoch, rec.meta_loss, rec.beta
        );
        write_jsonl(&mut log, rec)
    })?;
    std::fs::write(out.join("train.jsonl"), log)?;

    let ckpt = out.join("model.json");
    save_checkpoint(&ckpt, &cfg, &trained.params)?;
    println!(
        "frozen tensors untouched: {}",
        trained.params.frozen_hash() == init.frozen_hash()
    );
    println!("{} sha256 {}", ckpt.display(), checkpoint_hash(&ckpt)?);
    Ok(())
}

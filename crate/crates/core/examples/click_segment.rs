//! Segments a slice from one positive and one negative click, then writes the
//! mask as RLE and as a PNG overlay.
//!
//! cargo run --release --example click_segment -- [checkpoint.json]

use metaseg::app::{load_checkpoint, Rle};
use metaseg::bench::BenchConfig;
use metaseg::data::{composite_png, dsc, gen_volume, Mask};
use metaseg::metaopt::{meta_train, TaskPool};
use metaseg::prompt::PointPrompt;
use metaseg::{init_model, segment, Config, ParamSet};

/// Normalized `[x, y]` centroid of a mask.
fn centroid(m: &Mask) -> [f64; 2] {
    let (h, w) = m.shape();
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if m.get(i, j) {
                sx += (j as f64 + 0.5) / w as f64;
                sy += (i as f64 + 0.5) / h as f64;
            }
        }
    }
    let n = m.count().max(1) as f64;
    [sx / n, sy / n]
}

fn model(cfg: &mut Config) -> anyhow::Result<ParamSet> {
    if let Some(path) = std::env::args().nth(1) {
        let (ckpt, params) = load_checkpoint(path.as_ref())?;
        *cfg = ckpt.config;
        return Ok(params);
    }
    cfg.meta.epochs = 60;
    let d = &cfg.data;
    let v = gen_volume(&d.families, d.n_slices, d.size, 0)?;
    let organs: Vec<String> = d.families.iter().map(|f| f.name.clone()).collect();
    let pool = TaskPool::from_volumes(&[v], &organs)?;
    Ok(
        meta_train(&cfg.model, &cfg.meta, &init_model(&cfg.model, 0)?, &pool, &mut |_| {
            Ok(())
        })?
        .params,
    )
}

fn main() -> anyhow::Result<()> {
    let mut cfg = BenchConfig::default().base;
    let params = model(&mut cfg)?;
    let d = &cfg.data;
    let v = gen_volume(&d.families, d.n_slices, d.size, 3)?;

    let k = v.n_slices() / 2;
    let chunk = &v.chunks[v.chunk_of(k).expect("slice in range")];
    let support = &v.masks("liver")?[chunk.support];
    let truth = &v.masks("liver")?[k];
    // x runs along columns and y along rows, both in [0, 1].
    let prompt = PointPrompt::new(vec![centroid(truth)], vec![[0.95, 0.95]])?;

    let mask = segment(&cfg.model, &params, v.slice(k)?, support, Some(&prompt))?;
    let rle = Rle::encode(&mask);
    assert_eq!(rle.decode()?, mask);
    println!(
        "slice {k}: {} pixels, {} runs, dsc {:.3}",
        mask.count(),
        rle.counts.len(),
        dsc(&mask, truth)?
    );
    println!("{}", serde_json::to_string(&rle)?);
    std::fs::write(
        "click_segment.png",
        composite_png(v.slice(k)?, &mask, [60, 200, 90], 120)?,
    )?;
    Ok(())
}

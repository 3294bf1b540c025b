//! Adapts a model to one organ from the labeled slices of a single chunk and
//! compares query Dice before and after.

use metaseg::bench::BenchConfig;
use metaseg::data::{gen_volume, make_episodes};
use metaseg::eval::{eval_shots, mean_dsc, query_pairs};
use metaseg::metaopt::{make_shots, meta_train, online_optimize, TaskPool};
use metaseg::{init_model, Pair};

fn main() -> anyhow::Result<()> {
    let mut cfg = BenchConfig::default().base;
    cfg.meta.epochs = 60;
    let d = cfg.data.clone();
    let train = gen_volume(&d.families, d.n_slices, d.size, 0)?;
    let test = gen_volume(&d.families, d.n_slices, d.size, 1)?;
    // Meta-train without the organ we adapt to.
    let seen = ["liver", "kidney_l", "kidney_r"].map(String::from);
    let pool = TaskPool::from_volumes(std::slice::from_ref(&train), &seen)?;
    let theta = meta_train(&cfg.model, &cfg.meta, &init_model(&cfg.model, 0)?, &pool, &mut |_| {
        Ok(())
    })?
    .params;

    let organ = "spleen";
    let eps = make_episodes(&test, organ)?.episodes;
    let ep = &eps[eps.len() / 2];
    let pairs: Vec<Pair> = Pair::from_episode(ep)
        .into_iter()
        .filter(|p| !p.mask.is_empty())
        .collect();
    let shots = make_shots(&cfg.model, &pairs, 0, &[0])?;
    let queries = eval_shots(&cfg.model, &query_pairs(std::slice::from_ref(&test), organ)?, 7)?;

    println!("{organ}: chunk {} with {} labeled slices", ep.chunk, shots.len());
    println!("before  dsc {:.3}", mean_dsc(&cfg.model, &theta, &queries)?);
    for alpha in [0.1, 0.3] {
        let a = online_optimize(&cfg.model, &theta, &shots, 5, alpha)?;
        let first = a.trace.first().map_or(f64::NAN, |r| r.total);
        let last = a.trace.last().map_or(f64::NAN, |r| r.total);
        println!(
            "alpha {alpha}  support loss {first:.3} -> {last:.3}  dsc {:.3}",
            mean_dsc(&cfg.model, &a.params, &queries)?
        );
    }
    Ok(())
}

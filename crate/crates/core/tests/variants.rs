use metaseg::data::{gen_volume, make_episodes};
use metaseg::metaopt::{all_variants, episode_loss, meta_train, TaskPool};
use metaseg::{init_model, Config};

fn pool(cfg: &Config) -> TaskPool {
    let d = &cfg.data;
    let v = gen_volume(&d.families, d.n_slices, d.size, 5).unwrap();
    let organs: Vec<String> = d.families.iter().map(|f| f.name.clone()).collect();
    TaskPool::from_volumes(&[v], &organs).unwrap()
}

#[test]
fn every_variant_trains_one_epoch() {
    let base = Config::desk();
    let pool = pool(&base);
    let variants = all_variants();
    assert_eq!(variants.len(), 12);
    for v in variants {
        let mut cfg = v.apply(&base);
        cfg.meta.epochs = 1;
        cfg.meta.tasks = 2;
        cfg.meta.pairs = 2;
        let init = init_model(&cfg.model, 1).unwrap();
        let t = meta_train(&cfg.model, &cfg.meta, &init, &pool, &mut |_| Ok(())).unwrap();
        assert!(t.log[0].meta_loss.is_finite(), "{v}");
        assert_eq!(t.params.frozen_hash(), init.frozen_hash(), "{v}");
        assert_ne!(t.params.hash(), init.hash(), "{v}");
    }
}

#[test]
fn episode_loss_is_deterministic_per_seed() {
    let cfg = Config::desk();
    let d = &cfg.data;
    let v = gen_volume(&d.families, d.n_slices, d.size, 6).unwrap();
    let ep = &make_episodes(&v, "liver").unwrap().episodes[0];
    let params = init_model(&cfg.model, 2).unwrap();
    let a = episode_loss(&cfg.model, &params, ep, 11).unwrap();
    assert_eq!(a, episode_loss(&cfg.model, &params, ep, 11).unwrap());
    assert!(a.total.is_finite() && a.bce >= 0.0 && (0.0..=1.0).contains(&a.iou));
}

//! Starts the HTTP service on a fresh data directory with one volume and one
//! checkpoint.
//!
//! cargo run --release --example serve
//! curl localhost:8787/volumes
//! curl -XPOST localhost:8787/sessions -H 'content-type: application/json' -d '{"checkpoint":"model.json"}'

use metaseg::app::save_checkpoint;
use metaseg::app::service::{serve, ServiceConfig};
use metaseg::data::{gen_volume, save_volume};
use metaseg::{init_model, Config};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let mut sc = ServiceConfig::from_env()?;
    std::fs::create_dir_all(&sc.data_dir)?;
    let cfg = Config::desk();
    let d = &cfg.data;
    let mut v = gen_volume(&d.families, d.n_slices, d.size, 0)?;
    v.id = "vol000".into();
    save_volume(&sc.data_dir, &v)?;
    save_checkpoint(&sc.data_dir.join("model.json"), &cfg, &init_model(&cfg.model, 0)?)?;
    sc.data_dir = std::fs::canonicalize(&sc.data_dir)?;
    println!("serving {} on port {}", sc.data_dir.display(), sc.port);
    serve(sc).await?;
    Ok(())
}

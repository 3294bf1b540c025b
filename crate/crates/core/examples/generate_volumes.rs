//! Generates a few synthetic volumes and writes them, with one slice as PNG,
//! to a directory.
//!
//! cargo run --release --example generate_volumes -- /tmp/metaseg-data

use std::path::PathBuf;

use metaseg::data::{composite_png, gen_volume_with, save_volume};
use metaseg::Config;

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "metaseg-data".into()));
    let d = Config::desk().data;
    for i in 0..3u64 {
        let mut v = gen_volume_with(&d.families, d.n_slices, d.size, d.n_chunks, i, true)?;
        v.id = format!("vol{i:03}");
        let manifest = save_volume(&out, &v)?;
        let mid = v.n_slices() / 2;
        let liver = &v.masks("liver")?[mid];
        std::fs::write(
            out.join(format!("{}_mid.png", v.id)),
            composite_png(v.slice(mid)?, liver, [230, 60, 60], 110)?,
        )?;
        println!(
            "{} ({} slices, {} chunks)",
            manifest.display(),
            v.n_slices(),
            v.chunks.len()
        );
        for organ in v.organ_names() {
            let area: usize = v.masks(&organ)?.iter().map(|m| m.count()).sum();
            println!("  {organ:<9} {area:>6} labeled pixels");
        }
    }
    Ok(())
}

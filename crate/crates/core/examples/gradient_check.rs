//! Finite-difference check of every differentiable primitive and of the
//! mask attention module.

use std::collections::BTreeMap;

use metaseg::autodiff::gradcheck::{check_catalog, DEFAULT_STEP, DEFAULT_TOLERANCE};
use metaseg::fmad::fmam_gradcheck;

fn main() -> anyhow::Result<()> {
    let mut checks = check_catalog(0, 3, DEFAULT_STEP, DEFAULT_TOLERANCE)?;
    checks.extend(fmam_gradcheck(0, 3, 0.1, DEFAULT_STEP, DEFAULT_TOLERANCE)?);
    let mut worst: BTreeMap<&str, (f64, bool)> = BTreeMap::new();
    for c in &checks {
        let e = worst.entry(c.op).or_insert((0.0, true));
        e.0 = e.0.max(c.report.max_rel_err);
        e.1 &= c.report.pass;
    }
    for (op, (err, pass)) in &worst {
        println!("{op:<22} {err:>10.2e}  {}", if *pass { "ok" } else { "FAIL" });
    }
    let failed = worst.values().filter(|w| !w.1).count();
    println!("{} primitives, {failed} failing", worst.len());
    Ok(())
}

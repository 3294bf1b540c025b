//! The mask attention module on a toy sequence: query tokens attend to the
//! support tokens selected by the mask, so features resembling the masked
//! ones get amplified.

use metaseg::autodiff::Tensor;
use metaseg::fmad::{fmam, FmamWeights};

fn main() -> anyhow::Result<()> {
    // Two clusters of tokens; the mask covers the first one.
    let f = Tensor::new([6, 2], vec![1.0, 0.1, 0.9, 0.2, 1.1, 0.0, 0.1, 1.0, 0.0, 0.9, 0.2, 1.1])?;
    let mask = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let mp = Tensor::from_fn([6, 2], |k| mask[k / 2]);
    for tau in [1.0, 0.1] {
        let out = fmam(&f, &mp, &FmamWeights::identity(2, tau))?;
        println!("tau = {tau}");
        for (i, row) in out.data().chunks(2).enumerate() {
            println!("  token {i} mask {:.0}  ->  [{:+.3}, {:+.3}]", mask[i], row[0], row[1]);
        }
    }
    Ok(())
}

//! Output deviation under top-k masking, dReLU against SwiGLU.
//!
//! `cargo run --release --example topk_sweep`

use sparse_act::inputs::{InputDistribution, InputSampler};
use sparse_act::sparsity::deviation_sweep;
use sparse_act::{ActivationKind, FfnWeights, Rng};

fn main() -> sparse_act::Result<()> {
    let (d, n) = (128, 512);
    let inputs = InputSampler::new(d, InputDistribution::default(), &Rng::new(9))?.batch(64);
    let keeps = [0.05, 0.1, 0.2, 0.25, 0.5, 0.75, 1.0];
    let base = FfnWeights::<f32>::gaussian(d, n, ActivationKind::DRelu, 0.02, &mut Rng::new(8))?;

    println!("{:>6} {:>12} {:>12}", "keep", "drelu", "swiglu");
    let drelu = deviation_sweep(&base, &inputs, &keeps)?;
    let swiglu = deviation_sweep(&base.with_kind(ActivationKind::SwiGlu)?, &inputs, &keeps)?;
    for (a, b) in drelu.iter().zip(&swiglu) {
        println!("{:>6.2} {:>12.5} {:>12.5}", a.keep_fraction, a.output_deviation, b.output_deviation);
    }
    Ok(())
}

//! Neuron-gather execution: skip inactive neurons and get the dense result back bit for bit.
//!
//! `cargo run --release --example sparse_kernel`

use std::time::Instant;

use sparse_act::sparsity::NeuronMask;
use sparse_act::{ActivationKind, FfnWeights, GatheredFfn, Rng, Vector};

fn main() -> sparse_act::Result<()> {
    let (d, n) = (1024, 4096);
    let w = FfnWeights::<f32>::gaussian(d, n, ActivationKind::DRelu, 0.02, &mut Rng::new(3))?;
    let x = Vector::gaussian(d, 1.0, &mut Rng::new(4))?;
    let kernel = GatheredFfn::new(&w);

    let t = Instant::now();
    let trace = w.trace(&x)?;
    let dense_time = t.elapsed();

    let mask = NeuronMask::from_nonzero(&trace.combined);
    let t = Instant::now();
    let (sparse, macs) = kernel.sparse_ffn_forward_counted(&x, &mask)?;
    let sparse_time = t.elapsed();

    println!("active neurons: {} of {n} (sparsity {:.3})", mask.len(), mask.sparsity());
    println!("bitwise equal to dense: {}", sparse.bitwise_eq(&trace.output));
    println!("multiply-adds: {} sparse vs {} dense", macs.0, kernel.dense_macs());
    // The sparse timing excludes the mask computation, which a predictor replaces.
    println!("one call: dense {dense_time:?}, sparse {sparse_time:?}");
    Ok(())
}

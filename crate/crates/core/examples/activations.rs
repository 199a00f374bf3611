//! Zero fractions of the four gated activations on one random block.
//!
//! `cargo run --release --example activations`

use sparse_act::sparsity::NeuronMask;
use sparse_act::{ActivationKind, FfnWeights, Rng, Vector};

fn main() -> sparse_act::Result<()> {
    let (d, n, samples) = (256, 1024, 64);
    let base = FfnWeights::<f32>::gaussian(d, n, ActivationKind::DRelu, 0.02, &mut Rng::new(0))?;
    let mut rng = Rng::new(1);
    let inputs: Vec<Vector<f32>> = (0..samples).map(|_| Vector::gaussian(d, 1.0, &mut rng)).collect::<Result<_, _>>()?;

    let kinds = [
        ActivationKind::SwiGlu,
        ActivationKind::ReGlu,
        ActivationKind::shifted_relu(0.01)?,
        ActivationKind::DRelu,
    ];
    for kind in kinds {
        let w = base.clone().with_kind(kind)?;
        let mut zeros = 0usize;
        for x in &inputs {
            let mask = NeuronMask::from_nonzero(&w.trace(x)?.combined);
            zeros += n - mask.len();
        }
        let frac = zeros as f64 / (samples * n) as f64;
        println!("{:<22} exact-zero fraction {frac:.4}", format!("{kind:?}"));
    }

    // Gradients flow through the same weights in 64-bit.
    let w64 = base.cast::<f64>();
    let x = inputs[0].cast::<f64>();
    let grads = w64.ffn_backward(&x, &Vector::from_fn(d, |_| 1.0))?;
    println!("|dL/dx| = {:.4e} for L = sum(output)", grads.grad_x.norm());
    Ok(())
}

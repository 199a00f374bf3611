//! Mixture-of-experts routing with neuron sparsity inside each routed expert,
//! plus the parameter arithmetic for a Mixtral-shaped model.
//!
//! `cargo run --release --example moe`

use sparse_act::moe::{compose_sparsity, count_activated_params, ArchConfig, GatheredMoe, MoeLayer};
use sparse_act::sparsity::NeuronMask;
use sparse_act::{ActivationKind, FfnWeights, Matrix, Rng, Vector};

fn main() -> sparse_act::Result<()> {
    let (d, n, e, a) = (64, 256, 8, 2);
    let mut rng = Rng::new(11);
    let router = Matrix::<f32>::gaussian(e, d, 0.1, &mut rng)?;
    let experts = (0..e)
        .map(|_| FfnWeights::gaussian(d, n, ActivationKind::DRelu, 0.05, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let layer = MoeLayer::new(router, experts, a)?;
    let gathered = GatheredMoe::new(&layer);

    let x = Vector::gaussian(d, 1.0, &mut rng)?;
    let routes = layer.route(&x)?;
    for r in &routes {
        println!("expert {} weight {:.4}", r.expert, r.weight);
    }
    let dense = layer.moe_forward(&x, sparse_act::moe::ExpertExecution::Dense)?;
    let mut touched = 0;
    let sparse = gathered.forward_lazy(&x, |e, x| {
        let m = NeuronMask::from_nonzero(&layer.expert(e).trace(x)?.combined);
        touched += m.len();
        Ok(m)
    })?;
    println!("neurons run: {touched} of {}", e * n);
    println!("sparse equals dense: {}", sparse.bitwise_eq(&dense));

    let c = compose_sparsity(8, 2, 0.85)?;
    println!(
        "E=8 a=2 s=0.85: active fraction {} combined sparsity {}",
        c.combined_active_fraction, c.combined_sparsity
    );
    let mixtral = ArchConfig {
        num_experts: Some(8),
        experts_per_token: Some(2),
        ..ArchConfig::mistral_7b_like()
    };
    for s in [0.0, 0.85] {
        let p = count_activated_params(&mixtral, s)?;
        println!("neuron sparsity {s}: {:.2}B activated parameters, {} active neurons per expert", p.total as f64 / 1e9, p.active_neurons_per_expert);
    }
    Ok(())
}

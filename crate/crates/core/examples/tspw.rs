//! Save a generated model to a TSPW file, inspect it and load it back.
//!
//! `cargo run --release --example tspw`

use sparse_act::model_io::Execution;
use sparse_act::{gen_synthetic_model, ActivationKind, Model, ModelConfig, ModelFile, Rng, Vector};

fn main() -> sparse_act::Result<()> {
    let mut cfg = ModelConfig::dense(64, 256, 2, ActivationKind::DRelu);
    cfg.num_experts = Some(4);
    cfg.experts_per_token = Some(2);
    let file = gen_synthetic_model(&cfg, 0, 0.02)?;

    let dir = std::env::temp_dir().join("sparse-act-example");
    std::fs::create_dir_all(&dir).map_err(|source| sparse_act::Error::Io { path: dir.clone(), source })?;
    let path = dir.join("moe.tspw");
    file.save(&path)?;

    let loaded = ModelFile::load(&path)?;
    for t in loaded.tensors().iter().take(6) {
        println!("{:<24} {:?}", t.name, t.dims);
    }
    println!("... {} tensors, identical after reload: {}", loaded.tensors().len(), loaded == file);

    let model = Model::from_file(&loaded, &cfg)?;
    let x = Vector::gaussian(cfg.hidden_size, 1.0, &mut Rng::new(5))?;
    let dense = model.forward(&x, Execution::Dense)?;
    let topk = model.forward(&x, Execution::TopK(0.1))?;
    println!("top-10% relative deviation through the stack: {:.4}", topk.relative_deviation(&dense)?);

    std::fs::write(&path, b"GGUF").map_err(|source| sparse_act::Error::Io { path: path.clone(), source })?;
    println!("corrupt file: {}", ModelFile::load(&path).unwrap_err());
    Ok(())
}

//! Dense against neuron-sparse timing for one block. Pass `d n` to change the
//! size; the default is small enough for a quick run.
//!
//! `cargo run --release --example bench -- 4096 14336`

use sparse_act::bench::{bench_ffn, BenchConfig};

fn main() -> sparse_act::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (d, n) = match args[..] {
        [d, n] => (d, n),
        _ => (1024, 4096),
    };
    let report = bench_ffn(&BenchConfig::new(d, n, vec![0.0, 0.5, 0.75, 0.9, 0.95]))?;
    println!("{} ({} logical cpus, 1 thread timed)", report.machine.cpu_model.as_deref().unwrap_or("unknown cpu"), report.machine.logical_cpus);
    for r in &report.results {
        println!(
            "sparsity {:.2}: dense {:>9.1} us  sparse {:>9.1} us  speedup {:.2}x",
            r.sparsity, r.dense_us, r.sparse_us, r.speedup
        );
    }
    println!("monotone: {}", report.is_monotone());
    Ok(())
}

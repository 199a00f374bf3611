//! Train, calibrate and evaluate a low-rank activation predictor on the
//! committed synthetic benchmark.
//!
//! `cargo run --release --example predictor`

use sparse_act::predictor::PredictorBenchmark;

fn main() -> sparse_act::Result<()> {
    let bench = PredictorBenchmark::committed();
    println!(
        "block d={} n={} {:?}, predictor rank {}",
        bench.hidden_size, bench.intermediate_size, bench.activation, bench.train.rank
    );
    let out = bench.run()?;
    for (epoch, loss) in out.epoch_losses.iter().enumerate() {
        println!("epoch {epoch:>2} loss {loss:.4}");
    }
    let t = &out.trained;
    println!("threshold {:.4}", out.threshold);
    println!(
        "trained: recall {:.4} precision {:.4} predicted {:.4} (true {:.4}) deviation {:.4}",
        t.recall, t.precision, t.predicted_active_fraction, t.true_active_fraction, t.output_deviation
    );
    println!("oracle:  recall {:.4} deviation {}", out.oracle.recall, out.oracle.output_deviation);
    Ok(())
}

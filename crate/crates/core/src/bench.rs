//! Single-threaded dense vs. neuron-sparse timing harness.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::activations::{ActivationKind, FfnWeights};
use crate::error::{Error, Result};
use crate::kernel::GatheredFfn;
use crate::sparsity::{kept_count, NeuronMask};
use crate::tensor::{Rng, Vector};

/// Environment variable that downgrades speedup assertions to warnings.
pub const NO_ASSERT_SPEEDUP_ENV: &str = "TSPW_NO_ASSERT_SPEEDUP";

/// True when [`NO_ASSERT_SPEEDUP_ENV`] is set to `1`.
pub fn speedup_assertions_disabled() -> bool {
    std::env::var(NO_ASSERT_SPEEDUP_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub d: usize,
    pub n: usize,
    pub sparsities: Vec<f64>,
    /// Timed calls per path; the median is reported.
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub const MIN_ITERATIONS: usize = 100;

    pub fn new(d: usize, n: usize, sparsities: Vec<f64>) -> Self {
        Self {
            d,
            n,
            sparsities,
            iterations: Self::MIN_ITERATIONS,
            warmup: 3,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d < 64 || self.n < 64 {
            return Err(Error::InvalidArgument(format!(
                "benchmark needs d, n >= 64, got d = {}, n = {}",
                self.d, self.n
            )));
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("sparsity must lie in [0, 1), got {s}")));
        }
        if self.iterations < Self::MIN_ITERATIONS {
            return Err(Error::InvalidArgument(format!(
                "at least {} timed iterations required, got {}",
                Self::MIN_ITERATIONS,
                self.iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
    pub engine_version: String,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            engine_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub d: usize,
    pub n: usize,
    pub sparsity: f64,
    pub threads: usize,
    pub active: usize,
    /// Median microseconds per dense call.
    pub dense_us: f64,
    /// Median microseconds per sparse call.
    pub sparse_us: f64,
    pub speedup: f64,
    /// Floating point operations (two per multiply-accumulate).
    pub flops_dense: u64,
    pub flops_sparse: u64,
    /// FNV-1a over the bit patterns of the last sparse output.
    pub checksum: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub machine: MachineInfo,
    pub results: Vec<BenchResult>,
}

#[derive(Serialize)]
struct CsvRow {
    d: usize,
    n: usize,
    sparsity: f64,
    dense_us: f64,
    sparse_us: f64,
    speedup: f64,
    flops_dense: u64,
    flops_sparse: u64,
}

impl BenchReport {
    /// Columns `d,n,sparsity,dense_us,sparse_us,speedup,flops_dense,flops_sparse`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.results {
            w.serialize(CsvRow {
                d: r.d,
                n: r.n,
                sparsity: r.sparsity,
                dense_us: r.dense_us,
                sparse_us: r.sparse_us,
                speedup: r.speedup,
                flops_dense: r.flops_dense,
                flops_sparse: r.flops_sparse,
            })?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Speedups in the order the sparsity levels were given.
    pub fn speedups(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.speedup).collect()
    }

    /// Whether speedup never decreases as sparsity increases.
    pub fn is_monotone(&self) -> bool {
        let mut by_sparsity: Vec<_> = self.results.iter().map(|r| (r.sparsity, r.speedup)).collect();
        by_sparsity.sort_by(|a, b| a.0.total_cmp(&b.0));
        by_sparsity.windows(2).all(|w| w[1].1 >= w[0].1)
    }
}

/// Median of per-call wall times in microseconds.
pub fn median_us(mut f: impl FnMut(), warmup: usize, iterations: usize) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<f64> = (0..iterations)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect();
    median(&mut samples)
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let m = samples.len() / 2;
    if samples.len().is_multiple_of(2) {
        (samples[m - 1] + samples[m]) / 2.0
    } else {
        samples[m]
    }
}

fn fnv1a(values: &[f32]) -> u64 {
    values.iter().fold(0xcbf2_9ce4_8422_2325, |h, v| {
        v.to_bits()
            .to_le_bytes()
            .iter()
            .fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
    })
}

/// Times the dense block against the neuron-gather kernel at each sparsity
/// level. Weights, input and masks are drawn from `config.seed`; the dense
/// median is measured once and shared by every row.
pub fn bench_ffn(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let (d, n) = (config.d, config.n);
    let mut rng = Rng::new(config.seed);
    let ffn = FfnWeights::<f32>::gaussian(d, n, ActivationKind::DRelu, 0.02, &mut rng)?;
    let x = Vector::gaussian(d, 1.0, &mut rng)?;
    let gathered = GatheredFfn::new(&ffn);

    let dense_us = median_us(
        || {
            black_box(ffn.forward(black_box(&x)).expect("shapes checked"));
        },
        config.warmup,
        config.iterations,
    );
    let flops_dense = 2 * gathered.dense_macs();

    let mut results = Vec::with_capacity(config.sparsities.len());
    for (level, &sparsity) in config.sparsities.iter().enumerate() {
        let active = kept_count(1.0 - sparsity, n)?;
        let mask = NeuronMask::new(n, rng.fork(level as u64).sample_indices(n, active))?;
        let (out, macs) = gathered.sparse_ffn_forward_counted(&x, &mask)?;
        let sparse_us = median_us(
            || {
                black_box(gathered.sparse_ffn_forward(black_box(&x), &mask).expect("shapes checked"));
            },
            config.warmup,
            config.iterations,
        );
        results.push(BenchResult {
            d,
            n,
            sparsity,
            threads: 1,
            active,
            dense_us,
            sparse_us,
            speedup: dense_us / sparse_us,
            flops_dense,
            flops_sparse: 2 * macs.0,
            checksum: fnv1a(out.as_slice()),
        });
    }
    Ok(BenchReport {
        config: config.clone(),
        machine: MachineInfo::detect(),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(bench_ffn(&BenchConfig::new(32, 128, vec![0.0])).is_err());
        assert!(bench_ffn(&BenchConfig::new(64, 128, vec![1.0])).is_err());
        let mut c = BenchConfig::new(64, 128, vec![0.5]);
        c.iterations = 10;
        assert!(bench_ffn(&c).is_err());
    }

    #[test]
    fn small_bench_reports_exact_work() {
        let report = bench_ffn(&BenchConfig::new(64, 256, vec![0.0, 0.5, 0.75])).unwrap();
        assert_eq!(report.results.len(), 3);
        for r in &report.results {
            assert_eq!(r.flops_dense, 2 * 3 * 64 * 256);
            assert_eq!(r.flops_sparse, 2 * 3 * 64 * r.active as u64);
            assert!(r.dense_us > 0.0 && r.sparse_us > 0.0);
        }
        assert_eq!(report.results[1].active, 128);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "d,n,sparsity,dense_us,sparse_us,speedup,flops_dense,flops_sparse"
        );
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn workload_is_deterministic() {
        let a = bench_ffn(&BenchConfig::new(64, 128, vec![0.5])).unwrap();
        let b = bench_ffn(&BenchConfig::new(64, 128, vec![0.5])).unwrap();
        assert_eq!(a.results[0].checksum, b.results[0].checksum);
    }
}

//! The `sparse-act` command-line driver.
//!
//! Every subcommand writes its primary output plus a sidecar
//! `<output>.manifest.json` ([`RunManifest`]) holding the subcommand, the
//! resolved configuration, seed, engine version, machine metadata and output
//! paths. Commands that read a model take its [`ModelConfig`] from `--config`
//! or, by default, from the manifest beside the model file.
//!
//! Output schemas:
//!
//! | command | file | columns / fields |
//! |---|---|---|
//! | `profile` | CSV | `unit,layer,expert,vectors,samples,zero_fraction,le_<t>...` (one row per unit) |
//! | `profile --hist` | CSV | `unit,signal,lo,hi,count` (one row per bin, plus clamp bins) |
//! | `profile --json` | JSON | `{thresholds, units: [{unit, layer, expert, vectors, samples, zero_fraction, threshold_fractions}]}` |
//! | `sweep` | CSV | `keep_fraction,combined_deviation,output_deviation` |
//! | `bench` | CSV | `d,n,sparsity,dense_us,sparse_us,speedup,flops_dense,flops_sparse` |
//! | `count` | JSON (stdout) | composition and activated parameter counts |
//! | `eval-predictor` | JSON | `{oracle, units: [{unit, recall, precision, ...}], pooled}` |
//!
//! Exit codes: 0 success, 2 usage error, 3 data or format error, 4 speedup
//! bound not met (only with `--assert-speedup`).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{bench_ffn, speedup_assertions_disabled, BenchConfig, MachineInfo, NO_ASSERT_SPEEDUP_ENV};
use crate::error::Error;
use crate::inputs::{InputDistribution, InputSampler};
use crate::model_io::{gen_synthetic_model, LayerPredictors, Layer, Model, ModelConfig, ModelFile, PredictorConfig};
use crate::moe::{compose_sparsity, count_activated_params, ArchConfig};
use crate::predictor::{
    calibrate_threshold, collect_training_set, evaluate_predictor, train_predictor, OraclePredictor, PredictorMetrics, TrainConfig,
};
use crate::sparsity::{write_deviation_csv, ActivationHistogram, Signal, SparsityReport, UnitId};
use crate::tensor::{Rng, Vector};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BOUND: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sparse-act", version, about = "Activation-sparse feed-forward inference experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a Gaussian-initialized model for a JSON config.
    Gen(GenArgs),
    /// Per-unit activation sparsity over a stream of inputs.
    Profile(ProfileArgs),
    /// Top-k masking fidelity across keep fractions.
    Sweep(SweepArgs),
    /// Time dense vs. neuron-sparse execution of one block.
    Bench(BenchArgs),
    /// Expert/neuron sparsity composition and activated parameter counts.
    Count(CountArgs),
    /// Train low-rank activation predictors for every unit of a model.
    TrainPredictor(TrainArgs),
    /// Recall, precision and output deviation of attached predictors.
    EvalPredictor(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Standard deviation of every weight.
    #[arg(long, default_value_t = 0.02)]
    pub std: f64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Model config JSON; defaults to the config in the model's manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Number of seeded random inputs.
    #[arg(long, visible_alias = "samples", default_value_t = 256)]
    pub inputs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw inputs from a random rank-K subspace plus noise instead of i.i.d. N(0, 1).
    #[arg(long)]
    pub latent_rank: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    /// Seed of the low-rank subspace; keep it fixed across train and eval.
    #[arg(long, default_value_t = 0)]
    pub basis_seed: u64,
}

impl InputArgs {
    fn distribution(&self) -> InputDistribution {
        match self.latent_rank {
            Some(latent_rank) => InputDistribution::LowRank {
                latent_rank,
                noise_std: self.noise_std,
                basis_seed: self.basis_seed,
            },
            None => InputDistribution::default(),
        }
    }

    fn sample(&self, d: usize) -> crate::Result<Vec<Vector<f32>>> {
        if self.inputs == 0 {
            return Err(Error::InvalidArgument("--inputs must be positive".into()));
        }
        Ok(InputSampler::new(d, self.distribution(), &Rng::new(self.seed))?.batch(self.inputs))
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1e-3,1e-2")]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write gate, up and combined histograms for every unit.
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Keep fractions, ascending. Defaults to 0.05, 0.10, ..., 1.0.
    #[arg(long, value_delimiter = ',')]
    pub keep: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    pub d: usize,
    #[arg(long, default_value_t = 14336)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.75,0.9")]
    pub sparsity: Vec<f64>,
    #[arg(long, default_value_t = BenchConfig::MIN_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Exit with code 4 unless speedup is monotone in sparsity and every
    /// level >= 0.9 reaches --min-speedup.
    #[arg(long)]
    pub assert_speedup: bool,
    #[arg(long, default_value_t = 3.0)]
    pub min_speedup: f64,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Number of experts (defaults to the config's, else 1).
    #[arg(long = "E")]
    pub num_experts: Option<usize>,
    /// Experts routed per token (defaults to the config's, else 1).
    #[arg(long = "a")]
    pub experts_per_token: Option<usize>,
    #[arg(long)]
    pub neuron_sparsity: f64,
    /// Architecture JSON for parameter counting (hidden_size,
    /// intermediate_size, num_layers, num_experts, experts_per_token,
    /// attention_params_per_layer, embedding_params).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Predictor rank; defaults to hidden_size / 8.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Replace --threshold by the largest threshold reaching this recall on
    /// a held-out eighth of the inputs (minimum over units).
    #[arg(long)]
    pub target_recall: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Evaluate exact-zero oracle masks instead of the attached predictors.
    #[arg(long)]
    pub oracle_mask: bool,
    /// Override the predictor threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance written next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub engine_version: String,
    pub machine: serde_json::Value,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn new(subcommand: &str, config: serde_json::Value, seed: Option<u64>, outputs: Vec<PathBuf>) -> Self {
        Self {
            subcommand: subcommand.into(),
            config,
            seed,
            engine_version: env!("CARGO_PKG_VERSION").into(),
            machine: serde_json::to_value(MachineInfo::detect()).expect("plain struct"),
            outputs,
        }
    }

    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    fn write_beside(&self, output: &Path) -> crate::Result<()> {
        write_json(&Self::path_for(output), &serde_json::to_value(self)?)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
    Bound(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(msg) => Failure::Usage(msg),
            other => Failure::Data(other),
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(Failure::Bound(msg)) => {
            eprintln!("error: {msg}");
            EXIT_BOUND
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Profile(a) => profile(a),
        Command::Sweep(a) => sweep(a),
        Command::Bench(a) => bench(a),
        Command::Count(a) => count(a),
        Command::TrainPredictor(a) => train(a),
        Command::EvalPredictor(a) => eval(a),
    }
}

fn create(path: &Path) -> crate::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> crate::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a model and its config (explicit, else from the sidecar manifest).
pub fn load_model_with_config(model: &Path, config: Option<&Path>) -> crate::Result<Model> {
    let cfg = match config {
        Some(p) => ModelConfig::load(p)?,
        None => {
            let manifest = RunManifest::load(&RunManifest::path_for(model))?;
            let cfg: ModelConfig = serde_json::from_value(manifest.config["model"].clone())?;
            cfg.validate()?;
            cfg
        }
    };
    Model::from_file(&ModelFile::load(model)?, &cfg)
}

fn gen(a: GenArgs) -> Result<(), Failure> {
    let cfg = ModelConfig::load(&a.config)?;
    gen_synthetic_model(&cfg, a.seed, a.std)?.save(&a.out)?;
    RunManifest::new(
        "gen",
        serde_json::json!({ "model": cfg, "std": a.std }),
        Some(a.seed),
        vec![a.out.clone()],
    )
    .write_beside(&a.out)?;
    Ok(())
}

fn profile(a: ProfileArgs) -> Result<(), Failure> {
    let model = load_model_with_config(&a.model.model, a.model.config.as_deref())?;
    let inputs = a.input.sample(model.d())?;
    let mut report = SparsityReport::new(a.thresholds.clone())?;
    model.profile(&inputs, &mut report)?;
    report.write_csv(create(&a.out)?)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.json {
        write_json(p, &report.to_json())?;
        outputs.push(p.clone());
    }
    if let Some(p) = &a.hist {
        let signals = [Signal::GatePre, Signal::UpPre, Signal::Combined];
        let mut hists: BTreeMap<UnitId, Vec<ActivationHistogram>> = model
            .units()
            .into_iter()
            .map(|u| (u, signals.iter().map(|&s| ActivationHistogram::new(s)).collect()))
            .collect();
        for x in &inputs {
            model.forward_traced(x, |u, _, t| {
                for h in hists.get_mut(&u).expect("every unit registered") {
                    h.record(t);
                }
            })?;
        }
        let mut w = csv::Writer::from_writer(create(p)?);
        w.write_record(ActivationHistogram::CSV_HEADER).map_err(Error::from)?;
        for (u, hs) in &hists {
            for h in hs {
                h.write_csv_rows(&u.to_string(), &mut w)?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        outputs.push(p.clone());
    }
    RunManifest::new(
        "profile",
        serde_json::json!({
            "model": a.model.model,
            "model_config": model.config,
            "inputs": a.input.inputs,
            "input_distribution": a.input.distribution(),
            "thresholds": a.thresholds,
        }),
        Some(a.input.seed),
        outputs,
    )
    .write_beside(&a.out)?;
    Ok(())
}

/// 0.05, 0.10, ..., 1.0 without accumulated rounding.
pub fn default_keeps() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let model = load_model_with_config(&a.model.model, a.model.config.as_deref())?;
    let keeps = a.keep.clone().unwrap_or_else(default_keeps);
    let inputs = a.input.sample(model.d())?;
    let rows = model.deviation_sweep(&inputs, &keeps)?;
    write_deviation_csv(&rows, create(&a.out)?)?;
    RunManifest::new(
        "sweep",
        serde_json::json!({
            "model": a.model.model,
            "model_config": model.config,
            "inputs": a.input.inputs,
            "input_distribution": a.input.distribution(),
            "keep": keeps,
        }),
        Some(a.input.seed),
        vec![a.out.clone()],
    )
    .write_beside(&a.out)?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let mut cfg = BenchConfig::new(a.d, a.n, a.sparsity.clone());
    cfg.iterations = a.iterations;
    cfg.warmup = a.warmup;
    cfg.seed = a.seed;
    let report = bench_ffn(&cfg)?;
    report.write_csv(create(&a.out)?)?;
    RunManifest::new(
        "bench",
        serde_json::json!({
            "bench": cfg,
            "results": report.results,
            "assert_speedup": a.assert_speedup,
            "min_speedup": a.min_speedup,
        }),
        Some(a.seed),
        vec![a.out.clone()],
    )
    .write_beside(&a.out)?;
    for r in &report.results {
        println!("sparsity {:.2}: dense {:.1} us, sparse {:.1} us, speedup {:.2}x", r.sparsity, r.dense_us, r.sparse_us, r.speedup);
    }
    if !a.assert_speedup {
        return Ok(());
    }
    let mut problems = Vec::new();
    if !report.is_monotone() {
        problems.push(format!("speedup is not monotone in sparsity: {:?}", report.speedups()));
    }
    for r in report.results.iter().filter(|r| r.sparsity >= 0.9) {
        if r.speedup < a.min_speedup {
            problems.push(format!(
                "speedup {:.2}x at sparsity {} is below {}x",
                r.speedup, r.sparsity, a.min_speedup
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else if speedup_assertions_disabled() {
        for p in &problems {
            eprintln!("warning: {p} ({NO_ASSERT_SPEEDUP_ENV}=1)");
        }
        Ok(())
    } else {
        Err(Failure::Bound(problems.join("; ")))
    }
}

fn count(a: CountArgs) -> Result<(), Failure> {
    let arch = a.config.as_deref().map(load_arch).transpose()?;
    let e = a.num_experts.or(arch.as_ref().and_then(|c| c.num_experts)).unwrap_or(1);
    let k = a.experts_per_token.or(arch.as_ref().and_then(|c| c.experts_per_token)).unwrap_or(1);
    let comp = compose_sparsity(e, k, a.neuron_sparsity)?;
    let mut out = serde_json::json!({
        "num_experts": e,
        "experts_per_token": k,
        "neuron_sparsity": a.neuron_sparsity,
        "expert_sparsity": comp.expert_sparsity,
        "active_fraction": comp.combined_active_fraction,
        "combined_sparsity": comp.combined_sparsity,
    });
    if let Some(mut arch) = arch {
        if arch.num_experts.is_some() || a.num_experts.is_some() {
            arch.num_experts = Some(e);
            arch.experts_per_token = Some(k);
        }
        out["arch"] = serde_json::to_value(&arch).map_err(Error::from)?;
        out["activated_params"] = serde_json::to_value(count_activated_params(&arch, a.neuron_sparsity)?).map_err(Error::from)?;
    }
    println!("{}", serde_json::to_string_pretty(&out).map_err(Error::from)?);
    if let Some(p) = &a.out {
        write_json(p, &out)?;
        RunManifest::new("count", out.clone(), None, vec![p.clone()]).write_beside(p)?;
    }
    Ok(())
}

fn load_arch(path: &Path) -> crate::Result<ArchConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Inputs each unit sees in the dense residual stream.
fn unit_inputs(model: &Model, inputs: &[Vector<f32>]) -> crate::Result<BTreeMap<UnitId, Vec<Vector<f32>>>> {
    let mut seen: BTreeMap<UnitId, Vec<Vector<f32>>> = model.units().into_iter().map(|u| (u, Vec::new())).collect();
    for x in inputs {
        model.forward_traced(x, |u, h, _| seen.get_mut(&u).expect("known unit").push(h.clone()))?;
    }
    Ok(seen)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut model = load_model_with_config(&a.model.model, a.model.config.as_deref())?;
    let inputs = a.input.sample(model.d())?;
    let cfg = TrainConfig {
        rank: a.rank.unwrap_or_else(|| TrainConfig::for_width(model.d()).rank),
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        threshold: a.threshold,
        seed: a.input.seed,
    };
    let held_out = if a.target_recall.is_some() { inputs.len() / 8 } else { 0 };
    let (fit, calib) = inputs.split_at(inputs.len() - held_out);
    let calib_inputs = unit_inputs(&model, calib)?;
    let mut trained = BTreeMap::new();
    let mut losses = serde_json::Map::new();
    let mut threshold = cfg.threshold;
    let mut calibrated = serde_json::Map::new();
    for (i, (unit, xs)) in unit_inputs(&model, fit)?.into_iter().enumerate() {
        if xs.is_empty() {
            return Err(Failure::Usage(format!("{unit} received no routed inputs; raise --inputs")));
        }
        let pairs = collect_training_set(model.unit_weights(unit), &xs)?;
        let unit_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let outcome = train_predictor(&pairs, &unit_cfg)?;
        if let Some(target) = a.target_recall {
            let held = &calib_inputs[&unit];
            if held.is_empty() {
                return Err(Failure::Usage(format!("{unit} has no held-out inputs; raise --inputs")));
            }
            let t = calibrate_threshold(&outcome.model, model.unit_weights(unit), held, target)?;
            calibrated.insert(unit.to_string(), serde_json::json!(t));
            threshold = if i == 0 { t } else { threshold.min(t) };
        }
        losses.insert(unit.to_string(), serde_json::json!(outcome.epoch_losses));
        trained.insert(unit, outcome.model);
    }
    for p in trained.values_mut() {
        *p = p.clone().with_threshold(threshold)?;
    }
    let cfg = TrainConfig { threshold, ..cfg };
    for (i, layer) in model.layers.iter().enumerate() {
        model.predictors[i] = Some(match layer {
            Layer::Dense(_) => LayerPredictors::Dense(trained.remove(&UnitId::layer(i)).expect("trained")),
            Layer::Moe(m) => LayerPredictors::Experts(
                (0..m.num_experts())
                    .map(|e| trained.remove(&UnitId::expert(i, e)).expect("trained"))
                    .collect(),
            ),
        });
    }
    model.config.predictor = Some(PredictorConfig {
        rank: cfg.rank,
        threshold: cfg.threshold,
    });
    model.to_file()?.save(&a.out)?;
    RunManifest::new(
        "train-predictor",
        serde_json::json!({
            "model": model.config,
            "source_model": a.model.model,
            "train": cfg,
            "inputs": a.input.inputs,
            "input_distribution": a.input.distribution(),
            "target_recall": a.target_recall,
            "calibrated_thresholds": calibrated,
            "epoch_losses": losses,
        }),
        Some(a.input.seed),
        vec![a.out.clone()],
    )
    .write_beside(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct UnitMetrics {
    unit: String,
    #[serde(flatten)]
    metrics: PredictorMetrics,
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let model = load_model_with_config(&a.model.model, a.model.config.as_deref())?;
    let inputs = a.input.sample(model.d())?;
    let mut units = Vec::new();
    for (unit, xs) in unit_inputs(&model, &inputs)? {
        if xs.is_empty() {
            continue;
        }
        let w = model.unit_weights(unit);
        let metrics = if a.oracle_mask {
            evaluate_predictor(&OraclePredictor::new(w)?, w, &xs)?
        } else {
            let p = predictor_for(&model, unit)?;
            let p = match a.threshold {
                Some(t) => p.clone().with_threshold(t)?,
                None => p.clone(),
            };
            evaluate_predictor(&p, w, &xs)?
        };
        units.push(UnitMetrics {
            unit: unit.to_string(),
            metrics,
        });
    }
    let out = serde_json::json!({
        "oracle": a.oracle_mask,
        "units": units,
        "pooled": pool(units.iter().map(|u| &u.metrics)),
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(Error::from)?);
    if let Some(p) = &a.out {
        write_json(p, &out)?;
        RunManifest::new(
            "eval-predictor",
            serde_json::json!({
                "model": a.model.model,
                "model_config": model.config,
                "inputs": a.input.inputs,
                "input_distribution": a.input.distribution(),
                "oracle_mask": a.oracle_mask,
                "threshold": a.threshold,
            }),
            Some(a.input.seed),
            vec![p.clone()],
        )
        .write_beside(p)?;
    }
    Ok(())
}

fn predictor_for(model: &Model, unit: UnitId) -> Result<&crate::predictor::PredictorModel, Failure> {
    let missing = || Failure::Usage(format!("{unit} has no predictor; run train-predictor first"));
    match (model.predictors[unit.layer].as_ref().ok_or_else(missing)?, unit.expert) {
        (LayerPredictors::Dense(p), None) => Ok(p),
        (LayerPredictors::Experts(ps), Some(e)) => Ok(&ps[e]),
        _ => Err(missing()),
    }
}

/// Sample-weighted means of per-unit metrics.
fn pool<'a>(metrics: impl Iterator<Item = &'a PredictorMetrics>) -> serde_json::Value {
    let ms: Vec<_> = metrics.collect();
    let total: usize = ms.iter().map(|m| m.samples).sum();
    let mean = |f: fn(&PredictorMetrics) -> f64| -> f64 {
        ms.iter().map(|m| f(m) * m.samples as f64).sum::<f64>() / total.max(1) as f64
    };
    serde_json::json!({
        "recall": mean(|m| m.recall),
        "precision": mean(|m| m.precision),
        "predicted_active_fraction": mean(|m| m.predicted_active_fraction),
        "true_active_fraction": mean(|m| m.true_active_fraction),
        "output_deviation": mean(|m| m.output_deviation),
        "samples": total,
    })
}

//! Neuron-activation predictors.
//!
//! A predictor maps a block input to the set of neurons expected to fire, so
//! the gather kernel can skip the rest. The learned model is a two-layer
//! low-rank network, `score = W2·relu(W1·x)`, trained with per-neuron binary
//! cross-entropy against exact active sets.

use serde::{Deserialize, Serialize};

use crate::activations::{sigmoid, ActivationKind, FfnWeights};
use crate::error::{shape_err, Error, Result};
use crate::inputs::{InputDistribution, InputSampler};
use crate::kernel::GatheredFfn;
use crate::moe::MoeLayer;
use crate::sparsity::NeuronMask;
use crate::tensor::{Matrix, Rng, Vector};

/// Anything that can propose an active-neuron set for an input.
pub trait MaskPredictor {
    fn predict_mask(&self, x: &Vector<f32>) -> Result<NeuronMask>;
}

/// Low-rank predictor: `w1` is `r×d`, `w2` is `n×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    w1: Matrix<f32>,
    w2: Matrix<f32>,
    threshold: f64,
}

impl PredictorModel {
    pub const DEFAULT_THRESHOLD: f64 = 0.5;

    pub fn new(w1: Matrix<f32>, w2: Matrix<f32>, threshold: f64) -> Result<Self> {
        let (r, d) = w1.shape();
        if r == 0 || r > d {
            return Err(Error::InvalidArgument(format!("predictor rank must lie in 1..={d}, got {r}")));
        }
        if w2.cols() != r {
            return Err(shape_err("PredictorModel::new", format!("w2 with {r} columns"), w2.cols()));
        }
        check_threshold(threshold)?;
        Ok(Self { w1, w2, threshold })
    }

    pub fn rank(&self) -> usize {
        self.w1.rows()
    }

    pub fn d(&self) -> usize {
        self.w1.cols()
    }

    pub fn n(&self) -> usize {
        self.w2.rows()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn w1(&self) -> &Matrix<f32> {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix<f32> {
        &self.w2
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        self.threshold = threshold;
        Ok(self)
    }

    /// Pre-sigmoid scores, one per neuron.
    pub fn scores(&self, x: &Vector<f32>) -> Result<Vector<f32>> {
        if x.len() != self.d() {
            return Err(shape_err("predict_mask", format!("input of length {}", self.d()), x.len()));
        }
        let mut h = self.w1.matvec(x)?;
        h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        self.w2.matvec(&h)
    }

    /// `{ j : sigmoid(score_j) > threshold }`, evaluated as a comparison
    /// against `logit(threshold)` so that it is exactly monotone in the
    /// threshold.
    pub fn predict_mask(&self, x: &Vector<f32>) -> Result<NeuronMask> {
        let cut = logit(self.threshold);
        let scores = self.scores(x)?;
        Ok(NeuronMask::from_bools(
            &scores.iter().map(|&s| f64::from(s) > cut).collect::<Vec<_>>(),
        ))
    }
}

impl MaskPredictor for PredictorModel {
    fn predict_mask(&self, x: &Vector<f32>) -> Result<NeuronMask> {
        PredictorModel::predict_mask(self, x)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {t}")))
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Largest threshold at which `model` recalls at least `target_recall` of the
/// truly active neurons of `w` over `inputs`, pooled. Exact up to the
/// rounding of mapping the score cut back through the sigmoid.
pub fn calibrate_threshold(
    model: &PredictorModel,
    w: &FfnWeights<f32>,
    inputs: &[Vector<f32>],
    target_recall: f64,
) -> Result<f64> {
    if !(target_recall > 0.0 && target_recall <= 1.0) {
        return Err(Error::InvalidArgument(format!("target recall must lie in (0, 1], got {target_recall}")));
    }
    if !w.kind.has_exact_zeros() {
        return Err(Error::NoExactZeros(w.kind.to_string()));
    }
    let mut active_scores = Vec::new();
    for x in inputs {
        let combined = w.trace(x)?.combined;
        let scores = model.scores(x)?;
        active_scores.extend(
            combined
                .iter()
                .zip(scores.iter())
                .filter(|(&c, _)| c != 0.0)
                .map(|(_, &s)| f64::from(s)),
        );
    }
    if active_scores.is_empty() {
        return Err(Error::InvalidArgument("no active neurons to calibrate against".into()));
    }
    active_scores.sort_by(f64::total_cmp);
    let misses = ((1.0 - target_recall) * active_scores.len() as f64).floor() as usize;
    // Cut strictly below the whole tie block containing the first kept score.
    let keep_from = active_scores[misses];
    let first = active_scores.partition_point(|&s| s < keep_from);
    let cut = if first == 0 {
        keep_from - 1.0
    } else {
        let below = active_scores[first - 1];
        let mid = below + (keep_from - below) / 2.0;
        if mid < keep_from { mid } else { below }
    };
    Ok(sigmoid(cut).clamp(1e-12, 1.0 - 1e-12))
}

/// Computes the exact active set from the block's own pre-activations.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor<'w> {
    ffn: &'w FfnWeights<f32>,
}

impl<'w> OraclePredictor<'w> {
    pub fn new(ffn: &'w FfnWeights<f32>) -> Result<Self> {
        if !ffn.kind.has_exact_zeros() {
            return Err(Error::NoExactZeros(ffn.kind.to_string()));
        }
        Ok(Self { ffn })
    }
}

impl MaskPredictor for OraclePredictor<'_> {
    fn predict_mask(&self, x: &Vector<f32>) -> Result<NeuronMask> {
        Ok(NeuronMask::from_nonzero(&self.ffn.trace(x)?.combined))
    }
}

/// Predicts every neuron active.
#[derive(Debug, Clone, Copy)]
pub struct FullMaskPredictor {
    pub n: usize,
}

impl MaskPredictor for FullMaskPredictor {
    fn predict_mask(&self, _: &Vector<f32>) -> Result<NeuronMask> {
        Ok(NeuronMask::full(self.n))
    }
}

/// An input and the exact activity of every neuron for it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x: Vector<f32>,
    pub active: Vec<bool>,
}

/// Labels each input with `combined[j] != 0`. Only kinds with exact zeros
/// have a ground truth.
pub fn collect_training_set(w: &FfnWeights<f32>, inputs: &[Vector<f32>]) -> Result<Vec<TrainingPair>> {
    if !w.kind.has_exact_zeros() {
        return Err(Error::NoExactZeros(w.kind.to_string()));
    }
    inputs
        .iter()
        .map(|x| {
            let t = w.trace(x)?;
            Ok(TrainingPair {
                x: x.clone(),
                active: t.combined.iter().map(|&c| c != 0.0).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rank: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Rank `d/8` (at least 1), 20 epochs, learning rate 0.01, batch 32,
    /// threshold 0.5.
    pub fn for_width(d: usize) -> Self {
        Self {
            rank: (d / 8).max(1),
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 32,
            threshold: PredictorModel::DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PredictorModel,
    /// Mean per-neuron cross-entropy over the whole set: entry 0 before
    /// training, entry `e` after epoch `e`.
    pub epoch_losses: Vec<f64>,
}

struct Net {
    w1: Vec<f64>,
    w2: Vec<f64>,
    r: usize,
    d: usize,
    n: usize,
}

impl Net {
    fn forward(&self, x: &[f64], h: &mut [f64], s: &mut [f64]) {
        for k in 0..self.r {
            let row = &self.w1[k * self.d..(k + 1) * self.d];
            h[k] = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        }
        for j in 0..self.n {
            let row = &self.w2[j * self.r..(j + 1) * self.r];
            s[j] = row.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
        }
    }

    fn loss(&self, data: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let mut h = vec![0.0; self.r];
        let mut s = vec![0.0; self.n];
        let mut total = 0.0;
        for (x, y) in data {
            self.forward(x, &mut h, &mut s);
            total += s.iter().zip(y).map(|(&s, &y)| bce_with_logit(s, y)).sum::<f64>();
        }
        total / (data.len() * self.n) as f64
    }
}

/// `−y·ln σ(s) − (1−y)·ln(1−σ(s))` without overflow.
fn bce_with_logit(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

/// Mini-batch gradient descent with a fixed learning rate on the summed
/// per-neuron cross-entropy (averaged over the batch). Training runs in f64;
/// the returned model is f32.
pub fn train_predictor(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("predictor training needs at least one pair".into()))?;
    let (d, n, r) = (first.x.len(), first.active.len(), cfg.rank);
    if r == 0 || r > d {
        return Err(Error::InvalidArgument(format!("predictor rank must lie in 1..={d}, got {r}")));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    check_threshold(cfg.threshold)?;
    if let Some(bad) = pairs.iter().position(|p| p.x.len() != d || p.active.len() != n) {
        return Err(shape_err("train_predictor", format!("pairs of width d={d}, n={n}"), format!("pair {bad}")));
    }

    let data: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|p| {
            (
                p.x.iter().map(|&v| f64::from(v)).collect(),
                p.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
            )
        })
        .collect();

    let mut rng = Rng::new(cfg.seed);
    let init = |rows: usize, cols: usize, rng: &mut Rng| -> Result<Vec<f64>> {
        Ok(Matrix::<f64>::gaussian(rows, cols, 1.0 / (cols as f64).sqrt(), rng)?.into_vec())
    };
    let mut net = Net {
        w1: init(r, d, &mut rng)?,
        w2: init(n, r, &mut rng)?,
        r,
        d,
        n,
    };

    let mut losses = vec![net.loss(&data)];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut g1 = vec![0.0; r * d];
    let mut g2 = vec![0.0; n * r];
    let mut h = vec![0.0; r];
    let mut s = vec![0.0; n];
    let mut dh = vec![0.0; r];

    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            g1.iter_mut().for_each(|g| *g = 0.0);
            g2.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (x, y) = &data[i];
                net.forward(x, &mut h, &mut s);
                dh.iter_mut().for_each(|g| *g = 0.0);
                for j in 0..n {
                    let ds = sigmoid(s[j]) - y[j];
                    if ds == 0.0 {
                        continue;
                    }
                    let w2row = &net.w2[j * r..(j + 1) * r];
                    let g2row = &mut g2[j * r..(j + 1) * r];
                    for k in 0..r {
                        g2row[k] += ds * h[k];
                        dh[k] += ds * w2row[k];
                    }
                }
                for k in 0..r {
                    if h[k] > 0.0 {
                        let g1row = &mut g1[k * d..(k + 1) * d];
                        for (g, &xv) in g1row.iter_mut().zip(x) {
                            *g += dh[k] * xv;
                        }
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            net.w1.iter_mut().zip(&g1).for_each(|(w, g)| *w -= step * g);
            net.w2.iter_mut().zip(&g2).for_each(|(w, g)| *w -= step * g);
        }
        let loss = net.loss(&data);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        losses.push(loss);
    }

    let to_f32 = |v: &[f64], rows, cols| Matrix::from_vec(rows, cols, v.iter().map(|&x| x as f32).collect());
    let model = PredictorModel::new(to_f32(&net.w1, r, d)?, to_f32(&net.w2, n, r)?, cfg.threshold)?;
    Ok(TrainOutcome {
        model,
        epoch_losses: losses,
    })
}

/// Trains one predictor per expert on the inputs routed to that expert.
pub fn train_expert_predictors(layer: &MoeLayer<f32>, inputs: &[Vector<f32>], cfg: &TrainConfig) -> Result<Vec<TrainOutcome>> {
    let mut routed: Vec<Vec<Vector<f32>>> = vec![Vec::new(); layer.num_experts()];
    for x in inputs {
        for r in layer.route(x)? {
            routed[r.expert].push(x.clone());
        }
    }
    routed
        .iter()
        .enumerate()
        .map(|(e, xs)| {
            if xs.is_empty() {
                return Err(Error::InvalidArgument(format!("expert {e} received no routed inputs")));
            }
            let pairs = collect_training_set(layer.expert(e), xs)?;
            let cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(e as u64),
                ..cfg.clone()
            };
            train_predictor(&pairs, &cfg)
        })
        .collect()
}

/// Quality of predicted masks against exact ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictorMetrics {
    /// Truly active neurons that were predicted, pooled over all samples.
    pub recall: f64,
    /// Predicted neurons that were truly active, pooled over all samples.
    pub precision: f64,
    pub predicted_active_fraction: f64,
    pub true_active_fraction: f64,
    /// Mean relative L2 deviation of the predicted-mask sparse output from
    /// the dense output.
    pub output_deviation: f64,
    pub samples: usize,
}

pub fn evaluate_predictor(p: &impl MaskPredictor, w: &FfnWeights<f32>, inputs: &[Vector<f32>]) -> Result<PredictorMetrics> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one input".into()));
    }
    let gathered = GatheredFfn::new(w);
    let (mut tp, mut truth, mut predicted) = (0u64, 0u64, 0u64);
    let mut deviation = 0.0;
    for x in inputs {
        let trace = w.trace(x)?;
        let exact = NeuronMask::from_nonzero(&trace.combined);
        let guess = p.predict_mask(x)?;
        tp += exact.active().iter().filter(|&&j| guess.contains(j)).count() as u64;
        truth += exact.len() as u64;
        predicted += guess.len() as u64;
        deviation += gathered.sparse_ffn_forward(x, &guess)?.relative_deviation(&trace.output)?;
    }
    let total = (inputs.len() * w.n()) as f64;
    Ok(PredictorMetrics {
        recall: if truth == 0 { 1.0 } else { tp as f64 / truth as f64 },
        precision: if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 },
        predicted_active_fraction: predicted as f64 / total,
        true_active_fraction: truth as f64 / total,
        output_deviation: deviation / inputs.len() as f64,
        samples: inputs.len(),
    })
}

/// A self-contained train/calibrate/evaluate run on one synthetic block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorBenchmark {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub activation: ActivationKind,
    pub weight_std: f64,
    pub weight_seed: u64,
    pub inputs: InputDistribution,
    /// Train, calibration and evaluation inputs come from forks 0, 1 and 2.
    pub input_seed: u64,
    pub train_samples: usize,
    pub calibration_samples: usize,
    pub eval_samples: usize,
    pub train: TrainConfig,
    /// When set, the threshold is calibrated to this recall on the
    /// calibration inputs; otherwise `train.threshold` is used.
    pub target_recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictorBenchmarkOutcome {
    pub threshold: f64,
    pub epoch_losses: Vec<f64>,
    pub trained: PredictorMetrics,
    pub oracle: PredictorMetrics,
}

impl PredictorBenchmark {
    /// The configuration in `configs/predictor_benchmark.json`.
    pub fn committed() -> Self {
        serde_json::from_str(include_str!("../configs/predictor_benchmark.json")).expect("committed config parses")
    }

    pub fn weights(&self) -> Result<FfnWeights<f32>> {
        FfnWeights::gaussian(
            self.hidden_size,
            self.intermediate_size,
            self.activation,
            self.weight_std,
            &mut Rng::new(self.weight_seed),
        )
    }

    pub fn run(&self) -> Result<PredictorBenchmarkOutcome> {
        let w = self.weights()?;
        let root = Rng::new(self.input_seed);
        let draw = |stream: u64, count: usize| -> Result<Vec<Vector<f32>>> {
            Ok(InputSampler::new(self.hidden_size, self.inputs, &root.fork(stream))?.batch(count))
        };
        let outcome = train_predictor(&collect_training_set(&w, &draw(0, self.train_samples)?)?, &self.train)?;
        let threshold = match self.target_recall {
            Some(target) => calibrate_threshold(&outcome.model, &w, &draw(1, self.calibration_samples)?, target)?,
            None => self.train.threshold,
        };
        let model = outcome.model.with_threshold(threshold)?;
        let eval = draw(2, self.eval_samples)?;
        Ok(PredictorBenchmarkOutcome {
            threshold,
            epoch_losses: outcome.epoch_losses,
            trained: evaluate_predictor(&model, &w, &eval)?,
            oracle: evaluate_predictor(&OraclePredictor::new(&w)?, &w, &eval)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn drelu(d: usize, n: usize, seed: u64) -> FfnWeights<f32> {
        FfnWeights::gaussian(d, n, ActivationKind::DRelu, 0.1, &mut Rng::new(seed)).unwrap()
    }

    fn gaussian_inputs(d: usize, count: usize, seed: u64) -> Vec<Vector<f32>> {
        InputSampler::new(d, InputDistribution::default(), &Rng::new(seed)).unwrap().batch(count)
    }

    #[test]
    fn dead_gates_give_empty_masks() {
        let w_gate = Matrix::from_fn(6, 4, |_, _| -1.0f32);
        let mut rng = Rng::new(1);
        let w = FfnWeights::new(
            w_gate,
            Matrix::gaussian(6, 4, 1.0, &mut rng).unwrap(),
            Matrix::gaussian(4, 6, 1.0, &mut rng).unwrap(),
            ActivationKind::DRelu,
        )
        .unwrap();
        let xs: Vec<_> = (0..5).map(|i| Vector::from_fn(4, |j| 0.1 + (i + j) as f32)).collect();
        let pairs = collect_training_set(&w, &xs).unwrap();
        assert!(pairs.iter().all(|p| p.active.iter().all(|&a| !a)));
    }

    #[test]
    fn training_set_rejects_smooth_activations() {
        let w = drelu(4, 8, 0).with_kind(ActivationKind::SwiGlu).unwrap();
        assert!(matches!(collect_training_set(&w, &[Vector::zeros(4)]), Err(Error::NoExactZeros(_))));
        assert!(OraclePredictor::new(&w).is_err());
    }

    #[test]
    fn duplicate_inputs_get_identical_masks() {
        let w = drelu(8, 32, 2);
        let x = gaussian_inputs(8, 1, 3).remove(0);
        let pairs = collect_training_set(&w, &[x.clone(), x]).unwrap();
        assert_eq!(pairs[0], pairs[1]);
    }

    #[test]
    fn model_validation() {
        let w1 = Matrix::<f32>::zeros(2, 4);
        let w2 = Matrix::<f32>::zeros(8, 2);
        assert!(PredictorModel::new(w1.clone(), w2.clone(), 0.5).is_ok());
        assert!(PredictorModel::new(w1.clone(), w2.clone(), 1.0).is_err());
        assert!(PredictorModel::new(w1.clone(), w2.clone(), 0.0).is_err());
        assert!(PredictorModel::new(Matrix::zeros(5, 4), Matrix::zeros(8, 5), 0.5).is_err());
        assert!(PredictorModel::new(w1, Matrix::zeros(8, 3), 0.5).is_err());
    }

    fn random_model(d: usize, n: usize, r: usize, seed: u64) -> PredictorModel {
        let mut rng = Rng::new(seed);
        PredictorModel::new(
            Matrix::gaussian(r, d, 1.0, &mut rng).unwrap(),
            Matrix::gaussian(n, r, 1.0, &mut rng).unwrap(),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn threshold_limits() {
        let m = random_model(8, 64, 2, 4);
        let x = gaussian_inputs(8, 1, 5).remove(0);
        let high = m.clone().with_threshold(1.0 - 1e-15).unwrap();
        let low = m.with_threshold(1e-15).unwrap();
        assert!(high.predict_mask(&x).unwrap().is_empty());
        assert_eq!(low.predict_mask(&x).unwrap().len(), 64);
    }

    #[test]
    fn oracle_and_full_predictors_are_lossless() {
        let w = drelu(16, 64, 6);
        let xs = gaussian_inputs(16, 40, 7);
        let oracle = evaluate_predictor(&OraclePredictor::new(&w).unwrap(), &w, &xs).unwrap();
        assert_eq!((oracle.recall, oracle.precision, oracle.output_deviation), (1.0, 1.0, 0.0));
        let full = evaluate_predictor(&FullMaskPredictor { n: 64 }, &w, &xs).unwrap();
        assert_eq!((full.recall, full.output_deviation), (1.0, 0.0));
        assert_eq!(full.precision, full.true_active_fraction);
        assert_eq!(full.predicted_active_fraction, 1.0);
    }

    #[test]
    fn separable_toy_is_learned() {
        // Neurons 0 and 1 fire iff x0 > 0, neurons 2 and 3 iff x0 < 0.
        let w_gate = Matrix::from_rows(&[
            vec![1.0f32, 0.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0, 0.0],
            vec![-3.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        // x3 is pinned to 1, so every up pre-activation is exactly 1.
        let w_up = Matrix::from_fn(4, 4, |_, j| if j == 3 { 1.0f32 } else { 0.0 });
        let w_down = Matrix::identity(4);
        let w = FfnWeights::new(w_gate, w_up, w_down, ActivationKind::ReGlu).unwrap();
        let mut rng = Rng::new(8);
        let mut sample = |count: usize| -> Vec<Vector<f32>> {
            (0..count)
                .map(|_| {
                    let mut x = Vector::<f32>::gaussian(4, 1.0, &mut rng).unwrap();
                    x.as_mut_slice()[3] = 1.0;
                    x
                })
                .collect()
        };
        let train = collect_training_set(&w, &sample(400)).unwrap();
        let held_out = sample(200);
        let cfg = TrainConfig {
            rank: 4,
            epochs: 60,
            learning_rate: 0.2,
            batch_size: 16,
            threshold: 0.5,
            seed: 1,
        };
        let out = train_predictor(&train, &cfg).unwrap();
        let metrics = evaluate_predictor(&out.model, &w, &held_out).unwrap();
        assert!(metrics.recall >= 0.99, "{metrics:?}");
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let w = drelu(8, 16, 9);
        let pairs = collect_training_set(&w, &gaussian_inputs(8, 10, 10)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::for_width(8)
        };
        let out = train_predictor(&pairs, &cfg).unwrap();
        assert_eq!(out.epoch_losses.len(), 1);
        assert_eq!(out.model.rank(), 1);
        let again = train_predictor(&pairs, &cfg).unwrap();
        assert_eq!(out.model, again.model);
    }

    #[test]
    fn calibrated_threshold_meets_target_on_its_own_set() {
        let w = drelu(16, 64, 21);
        let xs = gaussian_inputs(16, 200, 22);
        let pairs = collect_training_set(&w, &xs).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::for_width(16)
        };
        let model = train_predictor(&pairs, &cfg).unwrap().model;
        let mut last = 1.0;
        for target in [0.5, 0.8, 0.95, 1.0] {
            let t = calibrate_threshold(&model, &w, &xs, target).unwrap();
            let m = evaluate_predictor(&model.clone().with_threshold(t).unwrap(), &w, &xs).unwrap();
            assert!(m.recall >= target - 1e-9, "target {target}: recall {}", m.recall);
            assert!(t <= last);
            last = t;
        }
        assert!(calibrate_threshold(&model, &w, &xs, 0.0).is_err());
        assert!(calibrate_threshold(&model, &w.clone().with_kind(ActivationKind::SwiGlu).unwrap(), &xs, 0.9).is_err());
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let w = drelu(16, 32, 11);
        let pairs = collect_training_set(&w, &gaussian_inputs(16, 64, 12)).unwrap();
        let cfg = TrainConfig {
            rank: 4,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 64,
            threshold: 0.5,
            seed: 2,
        };
        let out = train_predictor(&pairs, &cfg).unwrap();
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{:?}", out.epoch_losses);
        }
        assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let w = drelu(16, 32, 13);
        let pairs = collect_training_set(&w, &gaussian_inputs(16, 32, 14)).unwrap();
        let cfg = TrainConfig {
            rank: 4,
            epochs: 50,
            learning_rate: 1e300,
            batch_size: 8,
            threshold: 0.5,
            seed: 3,
        };
        assert!(matches!(train_predictor(&pairs, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn training_rejects_bad_input() {
        assert!(train_predictor(&[], &TrainConfig::for_width(8)).is_err());
        let w = drelu(8, 16, 15);
        let pairs = collect_training_set(&w, &gaussian_inputs(8, 4, 16)).unwrap();
        let cfg = TrainConfig {
            rank: 9,
            ..TrainConfig::for_width(8)
        };
        assert!(train_predictor(&pairs, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn lowering_threshold_only_adds(seed in 0u64..200, t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let m = random_model(6, 20, 3, seed);
            let x = gaussian_inputs(6, 1, seed + 1).remove(0);
            let strict = m.clone().with_threshold(hi).unwrap().predict_mask(&x).unwrap();
            let loose = m.with_threshold(lo).unwrap().predict_mask(&x).unwrap();
            prop_assert!(loose.is_superset_of(&strict));
        }

        #[test]
        fn superset_masks_are_lossless(seed in 0u64..200, extra in 0.0f64..1.0) {
            let w = drelu(12, 40, seed);
            let x = gaussian_inputs(12, 1, seed + 7).remove(0);
            let t = w.trace(&x).unwrap();
            let mut rng = Rng::new(seed);
            let flags: Vec<bool> = t.combined.iter().map(|&c| c != 0.0 || rng.uniform() < extra).collect();
            let mask = NeuronMask::from_bools(&flags);
            let y = GatheredFfn::new(&w).sparse_ffn_forward(&x, &mask).unwrap();
            prop_assert!(y.bitwise_eq(&t.output));
        }

        #[test]
        fn deviation_bounded_by_missed_mass(seed in 0u64..200, keep in 0.0f64..1.0) {
            let w = drelu(12, 40, seed);
            let x = gaussian_inputs(12, 1, seed + 3).remove(0);
            let t = w.trace(&x).unwrap();
            let mut rng = Rng::new(seed ^ 0xabc);
            let flags: Vec<bool> = (0..40).map(|_| rng.uniform() < keep).collect();
            let mask = NeuronMask::from_bools(&flags);
            let y = GatheredFfn::new(&w).sparse_ffn_forward(&x, &mask).unwrap();
            let missed = Vector::from_fn(40, |j| if flags[j] { 0.0 } else { t.combined[j] });
            let bound = missed.norm() * w.w_down.frobenius_norm();
            prop_assert!(y.distance(&t.output).unwrap() <= bound * (1.0 + 1e-5) + 1e-12);
        }
    }
}

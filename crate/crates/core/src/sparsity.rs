//! Top-k neuron masking, sparsity statistics and fidelity sweeps.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::activations::{FfnTrace, FfnWeights};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{to_f64, Real, Vector};

/// Set of active neurons over an intermediate dimension of size `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronMask {
    n: usize,
    active: Vec<usize>,
}

impl NeuronMask {
    /// Builds a mask from arbitrary-order indices. Rejects duplicates and
    /// indices `>= n`.
    pub fn new(n: usize, mut active: Vec<usize>) -> Result<Self> {
        active.sort_unstable();
        if let Some(&bad) = active.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("mask index {bad} out of range for n = {n}")));
        }
        if let Some(w) = active.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate mask index {}", w[0])));
        }
        Ok(Self { n, active })
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            active: (0..n).collect(),
        }
    }

    pub fn empty(n: usize) -> Self {
        Self { n, active: Vec::new() }
    }

    pub fn from_bools(flags: &[bool]) -> Self {
        Self {
            n: flags.len(),
            active: flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect(),
        }
    }

    /// Indices whose value is not exactly zero.
    pub fn from_nonzero<T: Real>(values: &Vector<T>) -> Self {
        Self {
            n: values.len(),
            active: values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != T::zero())
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.active.binary_search(&i).is_ok()
    }

    /// `1 − |active| / n`; an empty dimension counts as fully sparse.
    pub fn sparsity(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            1.0 - self.active.len() as f64 / self.n as f64
        }
    }

    pub fn to_bools(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n];
        for &i in &self.active {
            flags[i] = true;
        }
        flags
    }

    pub fn is_superset_of(&self, other: &NeuronMask) -> bool {
        other.active.iter().all(|&i| self.contains(i))
    }

    /// Zeroes every entry of `values` outside the mask.
    pub fn apply<T: Real>(&self, values: &Vector<T>) -> Result<Vector<T>> {
        if values.len() != self.n {
            return Err(shape_err("NeuronMask::apply", self.n, values.len()));
        }
        let mut out = Vector::zeros(self.n);
        for &i in &self.active {
            out.as_mut_slice()[i] = values[i];
        }
        Ok(out)
    }
}

/// Number of neurons kept for `keep_fraction` of `n`: `round(keep·n)`, halves
/// rounded away from zero, with `keep` read as a decimal (see
/// [`decimal_units`]).
pub fn kept_count(keep_fraction: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction must lie in [0, 1], got {keep_fraction}"
        )));
    }
    let k = match decimal_units(keep_fraction) {
        // round(q·n / S) with halves up, in integers.
        Some(q) => ((2 * q as u128 * n as u128 + DECIMAL_SCALE as u128) / (2 * DECIMAL_SCALE as u128)) as usize,
        None => (keep_fraction * n as f64).round() as usize,
    };
    Ok(k.min(n))
}

/// Fractional resolution at which fractions are read as decimals.
pub(crate) const DECIMAL_SCALE: u64 = 1_000_000_000_000;

/// `x·10¹²` as an integer when `x ∈ [0, 1]` has at most 12 fractional
/// digits, i.e. the decimal a caller most likely wrote. `0.7 · 45` is
/// 31.499999999999996 in floating point but 31.5 in decimal; counts and
/// fractions derived from user-facing decimals go through this.
pub(crate) fn decimal_units(x: f64) -> Option<u64> {
    if !(0.0..=1.0).contains(&x) {
        return None;
    }
    let scaled = x * DECIMAL_SCALE as f64;
    let q = scaled.round();
    ((scaled - q).abs() < 1e-3).then_some(q as u64)
}

/// Keeps the `round(keep·n)` entries of largest magnitude. Equal magnitudes
/// are resolved in favour of the lower index.
pub fn topk_mask<T: Real>(combined: &Vector<T>, keep_fraction: f64) -> Result<NeuronMask> {
    let n = combined.len();
    let k = kept_count(keep_fraction, n)?;
    if k == n {
        return Ok(NeuronMask::full(n));
    }
    if k == 0 {
        return Ok(NeuronMask::empty(n));
    }
    let values = combined.as_slice();
    let order = |&a: &usize, &b: &usize| -> Ordering {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.select_nth_unstable_by(k - 1, order);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(NeuronMask { n, active: idx })
}

/// Forward pass keeping only the top-k combined activations.
pub fn masked_ffn_forward<T: Real>(w: &FfnWeights<T>, x: &Vector<T>, keep_fraction: f64) -> Result<Vector<T>> {
    kept_count(keep_fraction, w.n())?;
    let trace = w.trace(x)?;
    let mask = topk_mask(&trace.combined, keep_fraction)?;
    w.w_down.matvec(&mask.apply(&trace.combined)?)
}

/// Forward pass with an explicit mask applied to the combined activations.
pub fn forward_with_mask<T: Real>(w: &FfnWeights<T>, x: &Vector<T>, mask: &NeuronMask) -> Result<Vector<T>> {
    if mask.n() != w.n() {
        return Err(shape_err("forward_with_mask", w.n(), mask.n()));
    }
    let trace = w.trace(x)?;
    w.w_down.matvec(&mask.apply(&trace.combined)?)
}

/// A measured unit: a dense layer, or one expert inside an MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub expert: Option<usize>,
}

impl UnitId {
    pub fn layer(layer: usize) -> Self {
        Self { layer, expert: None }
    }

    pub fn expert(layer: usize, expert: usize) -> Self {
        Self {
            layer,
            expert: Some(expert),
        }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.expert {
            Some(e) => write!(f, "layer.{}.expert.{}", self.layer, e),
            None => write!(f, "layer.{}", self.layer),
        }
    }
}

/// Raw counts for one unit. Fractions are derived on demand so that merging
/// stays exact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitCounts {
    /// Traces recorded.
    pub vectors: u64,
    /// Neuron activations observed.
    pub samples: u64,
    /// Activations exactly equal to zero.
    pub zeros: u64,
    /// Per threshold `t`, activations with `|value| <= t`.
    pub below: Vec<u64>,
}

impl UnitCounts {
    fn merge(&mut self, other: &UnitCounts) {
        self.vectors += other.vectors;
        self.samples += other.samples;
        self.zeros += other.zeros;
        if self.below.len() < other.below.len() {
            self.below.resize(other.below.len(), 0);
        }
        for (a, b) in self.below.iter_mut().zip(&other.below) {
            *a += b;
        }
    }

    pub fn zero_fraction(&self) -> f64 {
        ratio(self.zeros, self.samples)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Streaming per-unit sparsity statistics over combined activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    thresholds: Vec<f64>,
    units: BTreeMap<UnitId, UnitCounts>,
}

/// One row of a [`SparsityReport`] in its exported form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitSummary {
    pub unit: String,
    pub layer: usize,
    pub expert: Option<usize>,
    pub vectors: u64,
    pub samples: u64,
    pub zero_fraction: f64,
    pub threshold_fractions: BTreeMap<String, f64>,
}

impl SparsityReport {
    /// `thresholds` must be non-negative and sorted ascending.
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidArgument("thresholds must be finite and >= 0".into()));
        }
        if thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("thresholds must be sorted ascending".into()));
        }
        Ok(Self {
            thresholds,
            units: BTreeMap::new(),
        })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Makes `unit` appear in the report even if nothing is recorded for it.
    pub fn register(&mut self, unit: UnitId) {
        let k = self.thresholds.len();
        self.units.entry(unit).or_insert_with(|| UnitCounts {
            below: vec![0; k],
            ..UnitCounts::default()
        });
    }

    /// Accumulates the combined activations of one trace.
    pub fn record<T: Real>(&mut self, unit: UnitId, trace: &FfnTrace<T>) {
        self.record_values(unit, trace.combined.as_slice());
    }

    pub fn record_values<T: Real>(&mut self, unit: UnitId, values: &[T]) {
        self.register(unit);
        let thresholds = &self.thresholds;
        let counts = self.units.get_mut(&unit).expect("registered above");
        counts.vectors += 1;
        counts.samples += values.len() as u64;
        for &v in values {
            let a = to_f64(v).abs();
            if a == 0.0 {
                counts.zeros += 1;
            }
            // thresholds ascending: every t at or above |v| counts it.
            let first = thresholds.partition_point(|&t| t < a);
            for c in &mut counts.below[first..] {
                *c += 1;
            }
        }
    }

    /// Folds `other` into `self`. Both must use the same thresholds.
    pub fn merge(&mut self, other: &SparsityReport) -> Result<()> {
        if self.thresholds != other.thresholds {
            return Err(Error::InvalidArgument("cannot merge reports with different thresholds".into()));
        }
        for (unit, counts) in &other.units {
            self.register(*unit);
            self.units.get_mut(unit).expect("registered").merge(counts);
        }
        Ok(())
    }

    pub fn merged(mut self, other: &SparsityReport) -> Result<Self> {
        self.merge(other)?;
        Ok(self)
    }

    pub fn unit(&self, unit: UnitId) -> Option<&UnitCounts> {
        self.units.get(&unit)
    }

    pub fn units(&self) -> impl Iterator<Item = (&UnitId, &UnitCounts)> {
        self.units.iter()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn zero_fraction(&self, unit: UnitId) -> Option<f64> {
        self.units.get(&unit).map(UnitCounts::zero_fraction)
    }

    /// Zero fraction pooled over every unit.
    pub fn overall_zero_fraction(&self) -> f64 {
        let (z, s) = self
            .units
            .values()
            .fold((0, 0), |(z, s), c| (z + c.zeros, s + c.samples));
        ratio(z, s)
    }

    pub fn summaries(&self) -> Vec<UnitSummary> {
        self.units
            .iter()
            .map(|(unit, c)| UnitSummary {
                unit: unit.to_string(),
                layer: unit.layer,
                expert: unit.expert,
                vectors: c.vectors,
                samples: c.samples,
                zero_fraction: c.zero_fraction(),
                threshold_fractions: self
                    .thresholds
                    .iter()
                    .zip(&c.below)
                    .map(|(t, &b)| (format!("{t:e}"), ratio(b, c.samples)))
                    .collect(),
            })
            .collect()
    }

    /// One row per unit: `unit,layer,expert,vectors,samples,zero_fraction,le_<t>...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["unit", "layer", "expert", "vectors", "samples", "zero_fraction"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(self.thresholds.iter().map(|t| format!("le_{t:e}")));
        w.write_record(&header)?;
        for s in self.summaries() {
            let mut row = vec![
                s.unit,
                s.layer.to_string(),
                s.expert.map(|e| e.to_string()).unwrap_or_default(),
                s.vectors.to_string(),
                s.samples.to_string(),
                s.zero_fraction.to_string(),
            ];
            row.extend(s.threshold_fractions.values().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "thresholds": self.thresholds,
            "units": self.summaries(),
        })
    }
}

/// Which intermediate a histogram observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    GatePre,
    UpPre,
    Combined,
}

impl Signal {
    fn pick<'a, T>(&self, trace: &'a FfnTrace<T>) -> &'a Vector<T> {
        match self {
            Signal::GatePre => &trace.gate_pre,
            Signal::UpPre => &trace.up_pre,
            Signal::Combined => &trace.combined,
        }
    }
}

/// Fixed-range histogram with clamp bins at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    signal: Signal,
    limit: f64,
    underflow: u64,
    counts: Vec<u64>,
    overflow: u64,
}

impl ActivationHistogram {
    pub const DEFAULT_BINS: usize = 201;
    pub const DEFAULT_LIMIT: f64 = 1.0;

    /// 201 uniform bins over `[-1, 1]`; with an odd bin count zero sits in
    /// the middle of the centre bin.
    pub fn new(signal: Signal) -> Self {
        Self::with_range(signal, Self::DEFAULT_LIMIT, Self::DEFAULT_BINS).expect("defaults are valid")
    }

    pub fn with_range(signal: Signal, limit: f64, bins: usize) -> Result<Self> {
        if !(limit > 0.0 && limit.is_finite()) || bins == 0 {
            return Err(Error::InvalidArgument(format!(
                "histogram needs limit > 0 and at least one bin, got limit {limit}, {bins} bins"
            )));
        }
        Ok(Self {
            signal,
            limit,
            underflow: 0,
            counts: vec![0; bins],
            overflow: 0,
        })
    }

    pub fn signal(&self) -> Signal {
        self.signal
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn underflow(&self) -> u64 {
        self.underflow
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }

    /// `[lo, hi)` of regular bin `i`.
    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = 2.0 * self.limit / self.bins() as f64;
        (-self.limit + i as f64 * w, -self.limit + (i + 1) as f64 * w)
    }

    /// Index of the regular bin holding `v`, or `None` for under/overflow.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        if v < -self.limit || v > self.limit {
            return None;
        }
        let pos = (v + self.limit) / (2.0 * self.limit) * self.bins() as f64;
        Some((pos as usize).min(self.bins() - 1))
    }

    pub fn add(&mut self, v: f64) {
        match self.bin_of(v) {
            Some(i) => self.counts[i] += 1,
            None if v < 0.0 => self.underflow += 1,
            None => self.overflow += 1,
        }
    }

    pub fn record<T: Real>(&mut self, trace: &FfnTrace<T>) {
        for &v in self.signal.pick(trace).iter() {
            self.add(to_f64(v));
        }
    }

    pub fn merge(&mut self, other: &ActivationHistogram) -> Result<()> {
        if self.signal != other.signal || self.limit != other.limit || self.bins() != other.bins() {
            return Err(Error::InvalidArgument("cannot merge histograms with different layouts".into()));
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Mass strictly below zero (bins entirely below zero plus underflow).
    pub fn mass_below_zero(&self) -> u64 {
        self.underflow
            + self
                .counts
                .iter()
                .enumerate()
                .filter(|(i, _)| self.bin_edges(*i).1 <= 0.0)
                .map(|(_, c)| c)
                .sum::<u64>()
    }

    /// Rows `label,signal,lo,hi,count`, with the clamp bins first and last.
    pub fn write_csv_rows<W: Write>(&self, label: &str, w: &mut csv::Writer<W>) -> Result<()> {
        let signal = serde_json::to_value(self.signal)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        w.write_record([
            label,
            &signal,
            "-inf",
            &(-self.limit).to_string(),
            &self.underflow.to_string(),
        ])?;
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(i);
            w.write_record([label, &signal, &lo.to_string(), &hi.to_string(), &c.to_string()])?;
        }
        w.write_record([label, &signal, &self.limit.to_string(), "inf", &self.overflow.to_string()])?;
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 5] = ["unit", "signal", "lo", "hi", "count"];
}

/// Fidelity at one keep fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationRow {
    pub keep_fraction: f64,
    /// Mean of `‖C − C_masked‖ / ‖C‖` over samples (and layers, for stacks).
    pub combined_deviation: f64,
    /// Mean relative L2 deviation of the final output.
    pub output_deviation: f64,
}

fn check_keeps(keeps: &[f64]) -> Result<()> {
    for &k in keeps {
        kept_count(k, 0)?;
    }
    if keeps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("keep fractions must be sorted ascending".into()));
    }
    Ok(())
}

/// Relative deviation of top-k masked combined activations and outputs from
/// the unmasked pass, for every keep fraction.
pub fn deviation_sweep<T: Real>(w: &FfnWeights<T>, inputs: &[Vector<T>], keeps: &[f64]) -> Result<Vec<DeviationRow>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("deviation sweep needs at least one input".into()));
    }
    check_keeps(keeps)?;
    let traces = inputs.iter().map(|x| w.trace(x)).collect::<Result<Vec<_>>>()?;
    keeps
        .iter()
        .map(|&keep| {
            let mut comb = 0.0;
            let mut out = 0.0;
            for t in &traces {
                let mask = topk_mask(&t.combined, keep)?;
                let masked = mask.apply(&t.combined)?;
                comb += masked.relative_deviation(&t.combined)?;
                out += w.w_down.matvec(&masked)?.relative_deviation(&t.output)?;
            }
            let m = traces.len() as f64;
            Ok(DeviationRow {
                keep_fraction: keep,
                combined_deviation: comb / m,
                output_deviation: out / m,
            })
        })
        .collect()
}

pub fn write_deviation_csv<W: Write>(rows: &[DeviationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationKind;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn v(data: &[f32]) -> Vector<f32> {
        Vector::new(data.to_vec()).unwrap()
    }

    #[test]
    fn topk_basic() {
        let m = topk_mask(&v(&[0.5, -0.2, 0.0, 3.0]), 0.5).unwrap();
        assert_eq!(m.active(), &[0, 3]);
        assert_eq!(m.sparsity(), 0.5);
    }

    #[test]
    fn topk_magnitude_not_sign() {
        let m = topk_mask(&v(&[0.5, -4.0, 0.0, 3.0]), 0.5).unwrap();
        assert_eq!(m.active(), &[1, 3]);
    }

    #[test]
    fn topk_full_and_ties() {
        assert_eq!(topk_mask(&v(&[1.0, 2.0, 3.0]), 1.0).unwrap().active(), &[0, 1, 2]);
        assert_eq!(topk_mask(&v(&[1.0; 4]), 0.5).unwrap().active(), &[0, 1]);
        assert!(topk_mask(&v(&[1.0; 4]), 0.0).unwrap().is_empty());
    }

    #[test]
    fn topk_rejects_bad_fraction() {
        assert!(topk_mask(&v(&[1.0]), 1.5).is_err());
        assert!(topk_mask(&v(&[1.0]), -0.1).is_err());
        assert!(topk_mask(&v(&[1.0]), f64::NAN).is_err());
    }

    #[test]
    fn kept_count_rounds_half_away() {
        assert_eq!(kept_count(0.5, 5).unwrap(), 3);
        assert_eq!(kept_count(0.1, 5).unwrap(), 1);
        assert_eq!(kept_count(0.3, 5).unwrap(), 2);
        // 0.7 · 45 is 31.499999999999996 in binary floating point.
        assert_eq!(kept_count(0.7, 45).unwrap(), 32);
        assert_eq!(kept_count(0.35, 90).unwrap(), 32);
        assert_eq!(kept_count(1.0 / 3.0, 3).unwrap(), 1);
    }

    #[test]
    fn mask_constructor_validates() {
        assert_eq!(NeuronMask::new(5, vec![3, 1]).unwrap().active(), &[1, 3]);
        assert!(NeuronMask::new(5, vec![5]).is_err());
        assert!(NeuronMask::new(5, vec![1, 1]).is_err());
        let m = NeuronMask::from_bools(&[true, false, true]);
        assert_eq!(m.active(), &[0, 2]);
        assert_eq!(m.to_bools(), vec![true, false, true]);
        assert!(NeuronMask::full(3).is_superset_of(&m));
        assert!(!m.is_superset_of(&NeuronMask::full(3)));
    }

    fn drelu(d: usize, n: usize, seed: u64) -> (FfnWeights<f32>, Rng) {
        let mut rng = Rng::new(seed);
        let w = FfnWeights::gaussian(d, n, ActivationKind::DRelu, 0.2, &mut rng).unwrap();
        (w, rng)
    }

    #[test]
    fn masked_forward_extremes() {
        let (w, mut rng) = drelu(12, 48, 1);
        let x = Vector::gaussian(12, 1.0, &mut rng).unwrap();
        let dense = w.forward(&x).unwrap();
        assert!(masked_ffn_forward(&w, &x, 1.0).unwrap().bitwise_eq(&dense));
        let zero = masked_ffn_forward(&w, &x, 0.0).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(masked_ffn_forward(&w, &x, 2.0).is_err());
    }

    #[test]
    fn masked_forward_lossless_above_true_active_count() {
        let (w, mut rng) = drelu(16, 64, 2);
        for _ in 0..50 {
            let x = Vector::gaussian(16, 1.0, &mut rng).unwrap();
            let t = w.trace(&x).unwrap();
            let m = NeuronMask::from_nonzero(&t.combined).len();
            // Smallest keep whose rounded count covers every live neuron.
            let keep = m as f64 / 64.0;
            let masked = masked_ffn_forward(&w, &x, keep).unwrap();
            assert!(masked.bitwise_eq(&t.output));
        }
    }

    #[test]
    fn report_counts_exact_zeros() {
        let mut r = SparsityReport::new(vec![0.0, 0.5]).unwrap();
        let unit = UnitId::layer(0);
        r.record_values(unit, &[0.0f32; 8]);
        assert_eq!(r.zero_fraction(unit), Some(1.0));
        r.record_values(unit, &[0.4f32, -0.6, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let c = r.unit(unit).unwrap();
        assert_eq!(c.samples, 16);
        assert_eq!(c.zeros, 10);
        assert_eq!(c.below, vec![10, 11]);
    }

    #[test]
    fn report_rejects_unsorted_thresholds() {
        assert!(SparsityReport::new(vec![0.1, 0.0]).is_err());
        assert!(SparsityReport::new(vec![-0.1]).is_err());
    }

    #[test]
    fn drelu_zero_fraction_matches_active_count() {
        let (w, mut rng) = drelu(32, 128, 3);
        let unit = UnitId::layer(0);
        for _ in 0..20 {
            let x = Vector::gaussian(32, 1.0, &mut rng).unwrap();
            let t = w.trace(&x).unwrap();
            let mut r = SparsityReport::new(vec![0.0]).unwrap();
            r.record(unit, &t);
            let active = NeuronMask::from_nonzero(&t.combined).len();
            assert_eq!(r.zero_fraction(unit).unwrap(), 1.0 - active as f64 / 128.0);
        }
    }

    #[test]
    fn swiglu_has_no_exact_zeros_but_threshold_cdf_grows() {
        let mut rng = Rng::new(5);
        let w = FfnWeights::<f32>::gaussian(32, 256, ActivationKind::SwiGlu, 0.2, &mut rng).unwrap();
        let thresholds = vec![0.0, 1e-3, 1e-2, 1e-1];
        let mut r = SparsityReport::new(thresholds).unwrap();
        let unit = UnitId::layer(0);
        for _ in 0..100 {
            let x = Vector::gaussian(32, 1.0, &mut rng).unwrap();
            r.record(unit, &w.trace(&x).unwrap());
        }
        let c = r.unit(unit).unwrap();
        assert!(c.zero_fraction() < 1e-3);
        assert!(c.below.windows(2).all(|p| p[0] <= p[1]));
        assert!(c.below[3] > c.below[1]);
    }

    #[test]
    fn report_csv_has_one_row_per_unit() {
        let mut r = SparsityReport::new(vec![0.0, 1e-2]).unwrap();
        r.record_values(UnitId::layer(0), &[0.0f32, 1.0]);
        r.record_values(UnitId::expert(1, 3), &[0.0f32, 0.0]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("unit,layer,expert,vectors,samples,zero_fraction,le_0e0,le_1e-2"));
        assert!(lines[2].starts_with("layer.1.expert.3,1,3,1,2,1,"));
    }

    #[test]
    fn histogram_zero_lands_in_centre_bin() {
        let mut h = ActivationHistogram::new(Signal::Combined);
        let t = FfnTrace {
            gate_pre: v(&[0.0]),
            up_pre: v(&[0.0]),
            combined: v(&[0.0]),
            output: v(&[0.0]),
        };
        h.record(&t);
        assert_eq!(h.total(), 1);
        let centre = h.bin_of(0.0).unwrap();
        assert_eq!(centre, 100);
        assert_eq!(h.counts()[centre], 1);
        let (lo, hi) = h.bin_edges(centre);
        assert!(lo < 0.0 && hi > 0.0);
    }

    #[test]
    fn histogram_clamp_bins() {
        let mut h = ActivationHistogram::new(Signal::GatePre);
        h.add(-5.0);
        h.add(5.0);
        h.add(1.0);
        h.add(-1.0);
        assert_eq!((h.underflow(), h.overflow()), (1, 1));
        assert_eq!(h.counts()[200], 1);
        assert_eq!(h.counts()[0], 1);
    }

    #[test]
    fn histogram_signs_by_activation() {
        let mut rng = Rng::new(10);
        let reglu = FfnWeights::<f32>::gaussian(16, 64, ActivationKind::ReGlu, 0.3, &mut rng).unwrap();
        let drelu = reglu.clone().with_kind(ActivationKind::DRelu).unwrap();
        let mut gate = ActivationHistogram::new(Signal::GatePre);
        let mut comb = ActivationHistogram::new(Signal::Combined);
        for _ in 0..50 {
            let x = Vector::gaussian(16, 1.0, &mut rng).unwrap();
            gate.record(&reglu.trace(&x).unwrap());
            comb.record(&drelu.trace(&x).unwrap());
        }
        assert!(gate.mass_below_zero() > 0);
        assert!(gate.total() - gate.mass_below_zero() > 0);
        assert_eq!(comb.mass_below_zero(), 0);
    }

    #[test]
    fn sweep_basics() {
        let (w, mut rng) = drelu(16, 64, 4);
        let inputs: Vec<_> = (0..20).map(|_| Vector::gaussian(16, 1.0, &mut rng).unwrap()).collect();
        let keeps: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
        let rows = deviation_sweep(&w, &inputs, &keeps).unwrap();
        let last = rows.last().unwrap();
        assert_eq!((last.combined_deviation, last.output_deviation), (0.0, 0.0));
        assert!(rows.windows(2).all(|p| p[1].combined_deviation <= p[0].combined_deviation));
        assert!(deviation_sweep(&w, &[], &keeps).is_err());
        assert!(deviation_sweep(&w, &inputs, &[0.5, 0.2]).is_err());
    }

    #[test]
    fn sweep_is_lossless_when_keep_covers_live_neurons() {
        let (w, mut rng) = drelu(32, 256, 12);
        let k = kept_count(0.25, 256).unwrap();
        let mut inputs = Vec::new();
        while inputs.len() < 30 {
            let x = Vector::gaussian(32, 1.0, &mut rng).unwrap();
            let live = NeuronMask::from_nonzero(&w.trace(&x).unwrap().combined).len();
            if live <= k {
                inputs.push(x);
            }
        }
        let rows = deviation_sweep(&w, &inputs, &[0.25]).unwrap();
        assert!(rows[0].combined_deviation < 1e-6);
        assert_eq!(rows[0].output_deviation, 0.0);
    }

    fn random_report(seed: u64, units: usize, len: usize) -> SparsityReport {
        let mut rng = Rng::new(seed);
        let mut r = SparsityReport::new(vec![0.0, 0.1, 0.5]).unwrap();
        for _ in 0..5 {
            let unit = UnitId::layer(rng.index(units));
            let vals: Vec<f32> = (0..len)
                .map(|_| if rng.uniform() < 0.5 { 0.0 } else { rng.uniform() as f32 - 0.5 })
                .collect();
            r.record_values(unit, &vals);
        }
        r
    }

    proptest! {
        #[test]
        fn topk_size_and_dominance(vals in prop::collection::vec(-10.0f32..10.0, 1..64), keep in 0.0f64..=1.0) {
            let x = Vector::new(vals.clone()).unwrap();
            let m = topk_mask(&x, keep).unwrap();
            prop_assert_eq!(m.len(), (keep * vals.len() as f64).round() as usize);
            // Every kept magnitude dominates every dropped one.
            let kept_min = m.active().iter().map(|&i| vals[i].abs()).fold(f32::INFINITY, f32::min);
            for i in 0..vals.len() {
                if !m.contains(i) {
                    prop_assert!(vals[i].abs() <= kept_min);
                }
            }
        }

        #[test]
        fn dropped_mass_non_increasing(vals in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            let x = Vector::new(vals).unwrap();
            let mut prev = f64::INFINITY;
            for i in 0..=20 {
                let keep = i as f64 / 20.0;
                let dropped = topk_mask(&x, keep).unwrap().apply(&x).unwrap().distance(&x).unwrap();
                prop_assert!(dropped <= prev);
                prev = dropped;
            }
        }

        #[test]
        fn report_merge_is_associative_and_commutative(a in 0u64..200, b in 0u64..200, c in 0u64..200) {
            let (ra, rb, rc) = (random_report(a, 3, 7), random_report(b, 3, 7), random_report(c, 3, 7));
            let left = ra.clone().merged(&rb).unwrap().merged(&rc).unwrap();
            let right = ra.clone().merged(&rb.clone().merged(&rc).unwrap()).unwrap();
            prop_assert_eq!(&left, &right);
            prop_assert_eq!(ra.clone().merged(&rb).unwrap(), rb.merged(&ra).unwrap());
        }

        #[test]
        fn split_streams_merge_to_whole(seed in 0u64..200, split in 0usize..40) {
            let mut rng = Rng::new(seed);
            let stream: Vec<Vec<f32>> = (0..40)
                .map(|_| (0..9).map(|_| if rng.uniform() < 0.3 { 0.0 } else { rng.uniform() as f32 }).collect())
                .collect();
            let unit = UnitId::layer(0);
            let mut whole = SparsityReport::new(vec![0.0, 0.2]).unwrap();
            let mut first = whole.clone();
            let mut second = whole.clone();
            let mut hw = ActivationHistogram::new(Signal::Combined);
            let mut h1 = hw.clone();
            let mut h2 = hw.clone();
            for (i, s) in stream.iter().enumerate() {
                whole.record_values(unit, s);
                s.iter().for_each(|&v| hw.add(v as f64));
                if i < split {
                    first.record_values(unit, s);
                    s.iter().for_each(|&v| h1.add(v as f64));
                } else {
                    second.record_values(unit, s);
                    s.iter().for_each(|&v| h2.add(v as f64));
                }
            }
            prop_assert_eq!(first.merged(&second).unwrap(), whole);
            h1.merge(&h2).unwrap();
            prop_assert_eq!(h1, hw);
        }
    }
}

//! The TSPW weight file, model configuration and synthetic model generation.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! "TSPW"                 4 bytes
//! version: u32           = 1
//! tensor_count: u32
//! per tensor:
//!   name_len: u32, name: UTF-8 bytes
//!   dtype: u8            0 = f32, 1 = f64
//!   ndim: u32, dims: u64 × ndim
//!   data: row-major, little-endian, product(dims) elements
//! ```
//!
//! Tensor names: `layer.{i}.{gate|up|down}`, `layer.{i}.router`,
//! `layer.{i}.expert.{e}.{gate|up|down}`, `layer.{i}.predictor.{w1|w2}` and,
//! for per-expert predictors, `layer.{i}.expert.{e}.predictor.{w1|w2}`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, FfnTrace, FfnWeights};
use crate::error::{shape_err, Error, FormatError, Result};
use crate::moe::{ExpertExecution, GatheredMoe, MoeLayer};
use crate::predictor::PredictorModel;
use crate::sparsity::{deviation_sweep, DeviationRow, SparsityReport, UnitId};
use crate::tensor::{Matrix, Rng, Vector};

pub const MAGIC: [u8; 4] = *b"TSPW";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype_tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix<f32>) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F32(m.as_slice().to_vec()),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix<f32>> {
        let [rows, cols] = self.dims[..] else {
            return Err(shape_err("Tensor::to_matrix", "2 dimensions", self.dims.len()));
        };
        let data = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Matrix::from_vec(rows as usize, cols as usize, data)
    }
}

/// An ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelFile {
    tensors: Vec<Tensor>,
}

impl ModelFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Appends a tensor; names must be unique and dims must match the data.
    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(FormatError::DuplicateName(tensor.name).into());
        }
        let declared = tensor.dims.iter().product::<u64>();
        if declared != tensor.data.len() as u64 {
            return Err(FormatError::SizeMismatch {
                name: tensor.name,
                declared,
                actual: tensor.data.len() as u64,
            }
            .into());
        }
        self.tensors.push(tensor);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, tensor: Tensor) -> Result<()> {
        self.tensors.retain(|t| t.name != tensor.name);
        self.push(tensor)
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix<f32>) -> Result<()> {
        self.push(Tensor::from_matrix(name, m))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix<f32>> {
        self.get(name)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()))?
            .to_matrix()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype_tag());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()?;
        let mut seen = HashSet::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| FormatError::InvalidName)?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(FormatError::DuplicateName(name));
            }
            let dtype = r.take(1)?[0];
            let width = match dtype {
                0 => 4,
                1 => 8,
                other => return Err(FormatError::UnknownDtype(other)),
            };
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            let elems = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|e| usize::try_from(e).ok())
                .filter(|e| e.checked_mul(width).is_some())
                .ok_or(FormatError::Truncated {
                    offset: r.pos,
                    needed: usize::MAX,
                    available: bytes.len() - r.pos,
                })?;
            let raw = r.take(elems * width)?;
            let data = if dtype == 0 {
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            };
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

pub fn save_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    ModelFile::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub rank: usize,
    pub threshold: f64,
}

/// Model shape and activation, serialized as JSON next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    pub activation: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_experts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experts_per_token: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<PredictorConfig>,
}

impl ModelConfig {
    pub fn dense(hidden_size: usize, intermediate_size: usize, num_layers: usize, activation: ActivationKind) -> Self {
        Self {
            hidden_size,
            intermediate_size,
            num_layers,
            activation,
            num_experts: None,
            experts_per_token: None,
            predictor: None,
        }
    }

    pub fn moe(mut self, num_experts: usize, experts_per_token: usize) -> Self {
        self.num_experts = Some(num_experts);
        self.experts_per_token = Some(experts_per_token);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.intermediate_size == 0 || self.num_layers == 0 {
            return Err(Error::InvalidArgument("model sizes must be positive".into()));
        }
        self.activation.validate()?;
        match (self.num_experts, self.experts_per_token) {
            (None, None) => {}
            (Some(e), Some(a)) if a >= 1 && a <= e => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "num_experts and experts_per_token must both be set, with 1 <= experts_per_token <= num_experts"
                        .into(),
                ))
            }
        }
        if let Some(p) = self.predictor {
            if p.rank == 0 || p.rank > self.hidden_size || !(p.threshold > 0.0 && p.threshold < 1.0) {
                return Err(Error::InvalidArgument(
                    "predictor needs 1 <= rank <= hidden_size and threshold in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn is_moe(&self) -> bool {
        self.num_experts.is_some()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Gaussian-initialized weights for every tensor the config implies, drawn
/// in file order from a single generator seeded with `seed`.
pub fn gen_synthetic_model(config: &ModelConfig, seed: u64, std: f64) -> Result<ModelFile> {
    config.validate()?;
    let (d, n) = (config.hidden_size, config.intermediate_size);
    let mut rng = Rng::new(seed);
    let mut file = ModelFile::new();
    for i in 0..config.num_layers {
        match config.num_experts {
            None => push_ffn(&mut file, &format!("layer.{i}"), d, n, std, &mut rng)?,
            Some(e) => {
                file.push_matrix(format!("layer.{i}.router"), &Matrix::gaussian(e, d, std, &mut rng)?)?;
                for x in 0..e {
                    push_ffn(&mut file, &format!("layer.{i}.expert.{x}"), d, n, std, &mut rng)?;
                }
            }
        }
    }
    Ok(file)
}

fn push_ffn(file: &mut ModelFile, prefix: &str, d: usize, n: usize, std: f64, rng: &mut Rng) -> Result<()> {
    file.push_matrix(format!("{prefix}.gate"), &Matrix::gaussian(n, d, std, rng)?)?;
    file.push_matrix(format!("{prefix}.up"), &Matrix::gaussian(n, d, std, rng)?)?;
    file.push_matrix(format!("{prefix}.down"), &Matrix::gaussian(d, n, std, rng)?)?;
    Ok(())
}

/// One residual block's feed-forward part.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(FfnWeights<f32>),
    Moe(MoeLayer<f32>),
}

/// Predictors attached to a layer: one for a dense layer, one per expert.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerPredictors {
    Dense(PredictorModel),
    Experts(Vec<PredictorModel>),
}

/// A stack of feed-forward blocks on a residual stream (`x ← x + block(x)`);
/// attention is treated as the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub predictors: Vec<Option<LayerPredictors>>,
}

/// How each block is evaluated in a model forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Execution {
    Dense,
    TopK(f64),
    /// Attached predictors choose the neurons; requires predictors on every layer.
    Predicted,
}

impl Model {
    pub fn from_file(file: &ModelFile, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let kind = config.activation;
        let ffn = |prefix: &str| -> Result<FfnWeights<f32>> {
            let w = FfnWeights::new(
                file.matrix(&format!("{prefix}.gate"))?,
                file.matrix(&format!("{prefix}.up"))?,
                file.matrix(&format!("{prefix}.down"))?,
                kind,
            )?;
            if (w.d(), w.n()) != (config.hidden_size, config.intermediate_size) {
                return Err(shape_err(
                    "Model::from_file",
                    format!("{prefix} with d={}, n={}", config.hidden_size, config.intermediate_size),
                    format!("d={}, n={}", w.d(), w.n()),
                ));
            }
            Ok(w)
        };
        let predictor = |prefix: &str| -> Result<Option<PredictorModel>> {
            let (w1, w2) = (format!("{prefix}.predictor.w1"), format!("{prefix}.predictor.w2"));
            if file.get(&w1).is_none() {
                return Ok(None);
            }
            let threshold = config.predictor.map_or(PredictorModel::DEFAULT_THRESHOLD, |p| p.threshold);
            Ok(Some(PredictorModel::new(file.matrix(&w1)?, file.matrix(&w2)?, threshold)?))
        };

        let mut layers = Vec::with_capacity(config.num_layers);
        let mut predictors = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let prefix = format!("layer.{i}");
            match (config.num_experts, config.experts_per_token) {
                (Some(e), Some(a)) => {
                    let experts = (0..e)
                        .map(|x| ffn(&format!("{prefix}.expert.{x}")))
                        .collect::<Result<Vec<_>>>()?;
                    let router = file.matrix(&format!("{prefix}.router"))?;
                    layers.push(Layer::Moe(MoeLayer::new(router, experts, a)?));
                    let preds = (0..e)
                        .map(|x| predictor(&format!("{prefix}.expert.{x}")))
                        .collect::<Result<Option<Vec<_>>>>()?;
                    predictors.push(preds.map(LayerPredictors::Experts));
                }
                _ => {
                    layers.push(Layer::Dense(ffn(&prefix)?));
                    predictors.push(predictor(&prefix)?.map(LayerPredictors::Dense));
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            layers,
            predictors,
        })
    }

    /// Serializes weights and any attached predictors.
    pub fn to_file(&self) -> Result<ModelFile> {
        let mut file = ModelFile::new();
        let push_ffn = |file: &mut ModelFile, prefix: &str, w: &FfnWeights<f32>| -> Result<()> {
            file.push_matrix(format!("{prefix}.gate"), &w.w_gate)?;
            file.push_matrix(format!("{prefix}.up"), &w.w_up)?;
            file.push_matrix(format!("{prefix}.down"), &w.w_down)
        };
        let push_pred = |file: &mut ModelFile, prefix: &str, p: &PredictorModel| -> Result<()> {
            file.push_matrix(format!("{prefix}.predictor.w1"), p.w1())?;
            file.push_matrix(format!("{prefix}.predictor.w2"), p.w2())
        };
        for (i, (layer, preds)) in self.layers.iter().zip(&self.predictors).enumerate() {
            let prefix = format!("layer.{i}");
            match layer {
                Layer::Dense(w) => push_ffn(&mut file, &prefix, w)?,
                Layer::Moe(m) => {
                    file.push_matrix(format!("{prefix}.router"), m.router())?;
                    for (e, w) in m.experts().iter().enumerate() {
                        push_ffn(&mut file, &format!("{prefix}.expert.{e}"), w)?;
                    }
                }
            }
            match preds {
                Some(LayerPredictors::Dense(p)) => push_pred(&mut file, &prefix, p)?,
                Some(LayerPredictors::Experts(ps)) => {
                    for (e, p) in ps.iter().enumerate() {
                        push_pred(&mut file, &format!("{prefix}.expert.{e}"), p)?;
                    }
                }
                None => {}
            }
        }
        Ok(file)
    }

    pub fn d(&self) -> usize {
        self.config.hidden_size
    }

    /// Every measurable unit, in layer order.
    pub fn units(&self) -> Vec<UnitId> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| match l {
                Layer::Dense(_) => vec![UnitId::layer(i)],
                Layer::Moe(m) => (0..m.num_experts()).map(|e| UnitId::expert(i, e)).collect(),
            })
            .collect()
    }

    /// Dense forward pass calling `visit` with the input and trace of every
    /// evaluated unit (routed experts only, for MoE layers).
    pub fn forward_traced(
        &self,
        x: &Vector<f32>,
        mut visit: impl FnMut(UnitId, &Vector<f32>, &FfnTrace<f32>),
    ) -> Result<Vector<f32>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = match layer {
                Layer::Dense(w) => {
                    let t = w.trace(&h)?;
                    visit(UnitId::layer(i), &h, &t);
                    t.output
                }
                Layer::Moe(m) => m.forward_with(&h, |e, w, x| {
                    let t = w.trace(x)?;
                    visit(UnitId::expert(i, e), x, &t);
                    Ok(t.output)
                })?,
            };
            h = residual(&h, &y);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Vector<f32>, exec: Execution) -> Result<Vector<f32>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = match (exec, layer) {
                (Execution::Dense, Layer::Dense(w)) => w.forward(&h)?,
                (Execution::TopK(k), Layer::Dense(w)) => crate::sparsity::masked_ffn_forward(w, &h, k)?,
                (Execution::Dense, Layer::Moe(m)) => m.moe_forward(&h, ExpertExecution::Dense)?,
                (Execution::TopK(k), Layer::Moe(m)) => m.moe_forward(&h, ExpertExecution::TopK(k))?,
                (Execution::Predicted, _) => self.predicted_block(i, &h)?,
            };
            h = residual(&h, &y);
        }
        Ok(h)
    }

    fn predicted_block(&self, i: usize, h: &Vector<f32>) -> Result<Vector<f32>> {
        let missing = || Error::InvalidArgument(format!("layer {i} has no predictor"));
        match (&self.layers[i], self.predictors[i].as_ref().ok_or_else(missing)?) {
            (Layer::Dense(w), LayerPredictors::Dense(p)) => {
                crate::kernel::GatheredFfn::new(w).sparse_ffn_forward(h, &p.predict_mask(h)?)
            }
            (Layer::Moe(m), LayerPredictors::Experts(ps)) => {
                GatheredMoe::new(m).forward_lazy(h, |e, x| ps[e].predict_mask(x))
            }
            _ => Err(Error::InvalidArgument(format!("layer {i} predictors do not match its type"))),
        }
    }

    /// Streams `inputs` through the dense stack and records every evaluated
    /// unit. All units are registered, so unrouted experts appear with zero
    /// samples.
    pub fn profile(&self, inputs: &[Vector<f32>], report: &mut SparsityReport) -> Result<()> {
        for u in self.units() {
            report.register(u);
        }
        for x in inputs {
            self.forward_traced(x, |unit, _, t| report.record(unit, t))?;
        }
        Ok(())
    }

    /// Top-k deviation per keep fraction. Each unit is swept on the inputs it
    /// sees in the dense stack, and the rows are averaged over units.
    pub fn deviation_sweep(&self, inputs: &[Vector<f32>], keeps: &[f64]) -> Result<Vec<DeviationRow>> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("deviation sweep needs at least one input".into()));
        }
        let mut seen: BTreeMap<UnitId, Vec<Vector<f32>>> = BTreeMap::new();
        for x in inputs {
            self.forward_traced(x, |unit, h, _| seen.entry(unit).or_default().push(h.clone()))?;
        }
        let mut acc: Vec<DeviationRow> = keeps
            .iter()
            .map(|&k| DeviationRow {
                keep_fraction: k,
                combined_deviation: 0.0,
                output_deviation: 0.0,
            })
            .collect();
        for (unit, xs) in &seen {
            let rows = deviation_sweep(self.unit_weights(*unit), xs, keeps)?;
            for (a, r) in acc.iter_mut().zip(rows) {
                a.combined_deviation += r.combined_deviation;
                a.output_deviation += r.output_deviation;
            }
        }
        let units = seen.len() as f64;
        for a in &mut acc {
            a.combined_deviation /= units;
            a.output_deviation /= units;
        }
        Ok(acc)
    }

    pub fn unit_weights(&self, unit: UnitId) -> &FfnWeights<f32> {
        match (&self.layers[unit.layer], unit.expert) {
            (Layer::Dense(w), _) => w,
            (Layer::Moe(m), Some(e)) => m.expert(e),
            (Layer::Moe(_), None) => panic!("{unit} names an MoE layer, not an expert"),
        }
    }
}

fn residual(h: &Vector<f32>, y: &Vector<f32>) -> Vector<f32> {
    Vector::from_fn(h.len(), |i| h[i] + y[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn small_tensor(name: &str) -> Tensor {
        Tensor {
            name: name.into(),
            dims: vec![2, 2],
            data: TensorData::F32(vec![1.0, -2.0, 3.5, 0.25]),
        }
    }

    #[test]
    fn empty_model_is_header_only() {
        let bytes = ModelFile::new().to_bytes();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"TSPW");
        assert_eq!(ModelFile::from_bytes(&bytes).unwrap(), ModelFile::new());
    }

    #[test]
    fn single_tensor_byte_count() {
        let mut f = ModelFile::new();
        f.push(small_tensor("w")).unwrap();
        // header + name_len + name + dtype + ndim + 2 dims + 4 f32
        assert_eq!(f.to_bytes().len(), 12 + (4 + 1 + 1 + 4 + 16 + 16));
    }

    #[test]
    fn f64_tensors_round_trip() {
        let mut f = ModelFile::new();
        f.push(Tensor {
            name: "x".into(),
            dims: vec![3],
            data: TensorData::F64(vec![1.0, f64::MIN_POSITIVE, -0.0]),
        })
        .unwrap();
        let back = ModelFile::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), f.to_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected_distinctly() {
        let mut f = ModelFile::new();
        f.push(small_tensor("a")).unwrap();
        let good = f.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&bad), Err(FormatError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(
            ModelFile::from_bytes(&bad),
            Err(FormatError::VersionMismatch { found: 2, expected: 1 })
        );

        assert!(matches!(
            ModelFile::from_bytes(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(ModelFile::from_bytes(&bad), Err(FormatError::TrailingBytes(1)));

        // Two tensors with the same name, assembled by hand.
        let mut dup = good.clone();
        dup[8] = 2;
        dup.extend_from_slice(&good[12..]);
        assert_eq!(ModelFile::from_bytes(&dup), Err(FormatError::DuplicateName("a".into())));

        let mut bad = good.clone();
        bad[12 + 4 + 1] = 7;
        assert_eq!(ModelFile::from_bytes(&bad), Err(FormatError::UnknownDtype(7)));

        let mut bad = good.clone();
        bad[12 + 4] = 0xff;
        assert_eq!(ModelFile::from_bytes(&bad), Err(FormatError::InvalidName));
    }

    #[test]
    fn push_rejects_duplicates_and_bad_sizes() {
        let mut f = ModelFile::new();
        f.push(small_tensor("a")).unwrap();
        assert!(f.push(small_tensor("a")).is_err());
        let mut t = small_tensor("b");
        t.dims = vec![3, 2];
        assert!(f.push(t).is_err());
    }

    #[test]
    fn synthetic_tensor_counts() {
        let dense = ModelConfig::dense(16, 32, 2, ActivationKind::DRelu);
        assert_eq!(gen_synthetic_model(&dense, 1, 0.02).unwrap().len(), 6);
        let moe = ModelConfig::dense(16, 32, 2, ActivationKind::DRelu).moe(4, 2);
        let f = gen_synthetic_model(&moe, 1, 0.02).unwrap();
        assert_eq!(f.len(), 2 * (4 * 3 + 1));
        assert!(f.get("layer.1.expert.3.down").is_some());
        assert!(f.get("layer.0.router").is_some());
    }

    #[test]
    fn synthetic_model_is_deterministic() {
        let cfg = ModelConfig::dense(64, 256, 2, ActivationKind::DRelu);
        let a = gen_synthetic_model(&cfg, 7, 0.02).unwrap().to_bytes();
        let b = gen_synthetic_model(&cfg, 7, 0.02).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic_model(&cfg, 8, 0.02).unwrap().to_bytes());
    }

    #[test]
    fn synthetic_std_is_respected() {
        let cfg = ModelConfig::dense(64, 256, 1, ActivationKind::DRelu);
        let f = gen_synthetic_model(&cfg, 3, 0.02).unwrap();
        for t in f.tensors() {
            let TensorData::F32(v) = &t.data else { panic!() };
            let n = v.len() as f64;
            let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
            let std = (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(std > 0.01 && std < 0.03, "{}: {std}", t.name);
        }
    }

    #[test]
    fn config_json_schema() {
        let cfg = ModelConfig::from_json(
            r#"{"hidden_size": 8, "intermediate_size": 16, "num_layers": 1, "activation": "drelu",
                "num_experts": 4, "experts_per_token": 2, "predictor": {"rank": 2, "threshold": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.num_experts, Some(4));
        assert!(ModelConfig::from_json(r#"{"hidden_size": 8, "intermediate_size": 16, "num_layers": 1, "activation": "drelu", "num_experts": 4}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"hidden_size": 8, "intermediate_size": 16, "num_layers": 1, "activation": "drelu", "num_experts": 2, "experts_per_token": 3}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"hidden_size": 0, "intermediate_size": 16, "num_layers": 1, "activation": "drelu"}"#).is_err());
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn model_round_trips_through_file() {
        let cfg = ModelConfig::dense(8, 16, 2, ActivationKind::DRelu).moe(3, 2);
        let file = gen_synthetic_model(&cfg, 5, 0.1).unwrap();
        let model = Model::from_file(&file, &cfg).unwrap();
        assert_eq!(model.units().len(), 6);
        assert_eq!(model.to_file().unwrap(), file);
        assert!(Model::from_file(&file, &ModelConfig::dense(8, 16, 2, ActivationKind::DRelu)).is_err());
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tspw");
        let cfg = ModelConfig::dense(8, 16, 1, ActivationKind::SwiGlu);
        let file = gen_synthetic_model(&cfg, 2, 0.1).unwrap();
        save_model(&file, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), file);
        assert!(matches!(load_model(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn model_topk_one_matches_dense() {
        let cfg = ModelConfig::dense(8, 32, 3, ActivationKind::DRelu);
        let model = Model::from_file(&gen_synthetic_model(&cfg, 9, 0.2).unwrap(), &cfg).unwrap();
        let x = Vector::gaussian(8, 1.0, &mut Rng::new(1)).unwrap();
        let dense = model.forward(&x, Execution::Dense).unwrap();
        assert!(model.forward(&x, Execution::TopK(1.0)).unwrap().bitwise_eq(&dense));
        assert!(model.forward_traced(&x, |_, _, _| {}).unwrap().bitwise_eq(&dense));
        assert!(model.forward(&x, Execution::Predicted).is_err());
        let rows = model.deviation_sweep(&[x], &[0.1, 1.0]).unwrap();
        assert_eq!(rows[1].combined_deviation, 0.0);
        assert_eq!(rows[1].output_deviation, 0.0);
        assert!(rows[0].combined_deviation > 0.0);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(names in prop::collection::hash_set("[a-z.]{1,12}", 0..5), seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let mut f = ModelFile::new();
            for (i, name) in names.into_iter().enumerate() {
                let rows = 1 + rng.index(4);
                let cols = 1 + rng.index(4);
                if i % 2 == 0 {
                    f.push_matrix(name, &Matrix::gaussian(rows, cols, 1.0, &mut rng).unwrap()).unwrap();
                } else {
                    let data = (0..rows * cols).map(|_| rng.uniform() - 0.5).collect();
                    f.push(Tensor { name, dims: vec![rows as u64, cols as u64], data: TensorData::F64(data) }).unwrap();
                }
            }
            let bytes = f.to_bytes();
            let back = ModelFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, f);
        }
    }
}

//! Mixture-of-experts layers whose routed experts are themselves
//! neuron-sparse, and the arithmetic of how the two sparsities compose.

use serde::{Deserialize, Serialize};

use crate::activations::FfnWeights;
use crate::error::{shape_err, Error, Result};
use crate::kernel::GatheredFfn;
use crate::sparsity::{decimal_units, forward_with_mask, masked_ffn_forward, NeuronMask, DECIMAL_SCALE};
use crate::tensor::{cast, to_f64, Matrix, Real, Vector};

/// `E` experts of identical shape behind a linear router; each token is sent
/// to `experts_per_token` of them.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer<T = f32> {
    router: Matrix<T>,
    experts: Vec<FfnWeights<T>>,
    experts_per_token: usize,
}

/// One routing decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route<T = f32> {
    pub expert: usize,
    pub weight: T,
}

/// How routed experts are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum ExpertExecution<'a> {
    Dense,
    /// Top-k masking of each routed expert's combined activations.
    TopK(f64),
    /// Caller-supplied masks, one per expert (only routed ones are used).
    Masks(&'a [NeuronMask]),
}

impl<T: Real> MoeLayer<T> {
    pub fn new(router: Matrix<T>, experts: Vec<FfnWeights<T>>, experts_per_token: usize) -> Result<Self> {
        let e = experts.len();
        if experts_per_token == 0 || experts_per_token > e {
            return Err(Error::InvalidArgument(format!(
                "experts per token must lie in 1..={e}, got {experts_per_token}"
            )));
        }
        let (d, n) = (experts[0].d(), experts[0].n());
        if let Some(bad) = experts.iter().position(|x| x.d() != d || x.n() != n) {
            return Err(shape_err(
                "MoeLayer::new",
                format!("expert of shape d={d}, n={n}"),
                format!("expert {bad} with d={}, n={}", experts[bad].d(), experts[bad].n()),
            ));
        }
        if router.shape() != (e, d) {
            return Err(shape_err("MoeLayer::new (router)", format!("{e}x{d}"), format!("{:?}", router.shape())));
        }
        Ok(Self {
            router,
            experts,
            experts_per_token,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn experts_per_token(&self) -> usize {
        self.experts_per_token
    }

    pub fn d(&self) -> usize {
        self.router.cols()
    }

    /// Intermediate width of each expert.
    pub fn expert_n(&self) -> usize {
        self.experts[0].n()
    }

    pub fn router(&self) -> &Matrix<T> {
        &self.router
    }

    pub fn experts(&self) -> &[FfnWeights<T>] {
        &self.experts
    }

    pub fn expert(&self, e: usize) -> &FfnWeights<T> {
        &self.experts[e]
    }

    /// Top-`a` experts by router logit (ties to the lower index), weighted by
    /// a softmax over the selected logits only. Returned in ascending expert
    /// order.
    pub fn route(&self, x: &Vector<T>) -> Result<Vec<Route<T>>> {
        if x.len() != self.d() {
            return Err(shape_err("route", format!("input of length {}", self.d()), x.len()));
        }
        let logits = self.router.matvec(x)?;
        let mut order: Vec<usize> = (0..self.num_experts()).collect();
        order.sort_by(|&a, &b| {
            logits[b]
                .partial_cmp(&logits[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(self.experts_per_token);
        order.sort_unstable();

        let max = order.iter().map(|&e| to_f64(logits[e])).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = order.iter().map(|&e| (to_f64(logits[e]) - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(order
            .into_iter()
            .zip(exps)
            .map(|(expert, e)| Route {
                expert,
                weight: cast(e / total),
            })
            .collect())
    }

    /// Weighted sum of the routed experts' outputs, each produced by `eval`.
    /// Summation runs in ascending expert order.
    pub fn forward_with(
        &self,
        x: &Vector<T>,
        mut eval: impl FnMut(usize, &FfnWeights<T>, &Vector<T>) -> Result<Vector<T>>,
    ) -> Result<Vector<T>> {
        let routes = self.route(x)?;
        let mut out = Vector::zeros(self.d());
        for r in routes {
            let y = eval(r.expert, &self.experts[r.expert], x)?;
            for (o, &v) in out.as_mut_slice().iter_mut().zip(y.iter()) {
                *o = *o + r.weight * v;
            }
        }
        Ok(out)
    }

    pub fn moe_forward(&self, x: &Vector<T>, exec: ExpertExecution<'_>) -> Result<Vector<T>> {
        match exec {
            ExpertExecution::Dense => self.forward_with(x, |_, f, x| f.forward(x)),
            ExpertExecution::TopK(keep) => self.forward_with(x, |_, f, x| masked_ffn_forward(f, x, keep)),
            ExpertExecution::Masks(masks) => {
                self.check_masks(masks)?;
                self.forward_with(x, |e, f, x| forward_with_mask(f, x, &masks[e]))
            }
        }
    }

    fn check_masks(&self, masks: &[NeuronMask]) -> Result<()> {
        if masks.len() != self.num_experts() {
            return Err(shape_err("moe_forward", format!("{} masks", self.num_experts()), masks.len()));
        }
        if let Some(e) = masks.iter().position(|m| m.n() != self.expert_n()) {
            return Err(shape_err(
                "moe_forward",
                format!("mask over {} neurons", self.expert_n()),
                format!("expert {e} mask over {} neurons", masks[e].n()),
            ));
        }
        Ok(())
    }

    /// Exact active set of every expert for input `x`, whether routed or not.
    pub fn exact_masks(&self, x: &Vector<T>) -> Result<Vec<NeuronMask>> {
        self.experts
            .iter()
            .map(|f| Ok(NeuronMask::from_nonzero(&f.trace(x)?.combined)))
            .collect()
    }
}

/// An [`MoeLayer`] prepared for the neuron-gather kernel.
pub struct GatheredMoe<'w, T: Real = f32> {
    layer: &'w MoeLayer<T>,
    experts: Vec<GatheredFfn<'w, T>>,
}

impl<'w, T: Real> GatheredMoe<'w, T> {
    pub fn new(layer: &'w MoeLayer<T>) -> Self {
        Self {
            layer,
            experts: layer.experts.iter().map(GatheredFfn::new).collect(),
        }
    }

    pub fn layer(&self) -> &'w MoeLayer<T> {
        self.layer
    }

    pub fn expert(&self, e: usize) -> &GatheredFfn<'w, T> {
        &self.experts[e]
    }

    /// Routed experts run only the neurons in their mask.
    pub fn forward_masks(&self, x: &Vector<T>, masks: &[NeuronMask]) -> Result<Vector<T>> {
        self.layer.check_masks(masks)?;
        self.layer
            .forward_with(x, |e, _, x| self.experts[e].sparse_ffn_forward(x, &masks[e]))
    }

    /// Masks are produced lazily, and only for routed experts.
    pub fn forward_lazy(
        &self,
        x: &Vector<T>,
        mut mask_for: impl FnMut(usize, &Vector<T>) -> Result<NeuronMask>,
    ) -> Result<Vector<T>> {
        self.layer.forward_with(x, |e, _, x| {
            let mask = mask_for(e, x)?;
            self.experts[e].sparse_ffn_forward(x, &mask)
        })
    }
}

/// How expert-level and neuron-level sparsity combine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityComposition {
    pub num_experts: usize,
    pub experts_per_token: usize,
    /// `1 − a/E`
    pub expert_sparsity: f64,
    /// Fraction of inactive neurons inside a routed expert.
    pub neuron_sparsity: f64,
    /// `(a/E)·(1 − neuron_sparsity)`
    pub combined_active_fraction: f64,
    pub combined_sparsity: f64,
}

pub fn compose_sparsity(num_experts: usize, experts_per_token: usize, neuron_sparsity: f64) -> Result<SparsityComposition> {
    if experts_per_token == 0 || experts_per_token > num_experts {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= a <= E, got a = {experts_per_token}, E = {num_experts}"
        )));
    }
    if !(0.0..=1.0).contains(&neuron_sparsity) {
        return Err(Error::InvalidArgument(format!(
            "neuron sparsity must lie in [0, 1], got {neuron_sparsity}"
        )));
    }
    let routed = experts_per_token as f64 / num_experts as f64;
    let active = decimal_product(experts_per_token, num_experts, 1.0 - neuron_sparsity);
    Ok(SparsityComposition {
        num_experts,
        experts_per_token,
        expert_sparsity: 1.0 - routed,
        neuron_sparsity,
        combined_active_fraction: active,
        combined_sparsity: 1.0 - active,
    })
}

/// `(a/e)·f` with `f` read as a decimal: `a·round(f·10¹²)` and `e·10¹²` are
/// exact integers, so one division rounds the rational correctly and
/// `(2/8)·(1 − 0.85)` is the double nearest 0.0375 rather than one ulp above.
fn decimal_product(a: usize, e: usize, f: f64) -> f64 {
    match decimal_units(f) {
        Some(q) if (a as f64) * (q as f64) < 9.0e15 && (e as f64) * (DECIMAL_SCALE as f64) < 9.0e15 => {
            (a as f64 * q as f64) / (e as f64 * DECIMAL_SCALE as f64)
        }
        _ => a as f64 / e as f64 * f,
    }
}

/// Shape of a model for parameter accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    #[serde(default)]
    pub num_experts: Option<usize>,
    #[serde(default)]
    pub experts_per_token: Option<usize>,
    /// Attention parameters per layer, counted dense.
    #[serde(default)]
    pub attention_params_per_layer: u64,
    /// Embedding and output-head parameters, counted dense.
    #[serde(default)]
    pub embedding_params: u64,
}

impl ArchConfig {
    /// A 7B-class dense decoder: 32 layers, hidden 4096, intermediate 14336,
    /// grouped-query attention with 8 KV heads, 32000-token vocabulary with an
    /// untied output head.
    pub fn mistral_7b_like() -> Self {
        let d = 4096u64;
        let kv = 1024u64;
        Self {
            hidden_size: 4096,
            intermediate_size: 14336,
            num_layers: 32,
            num_experts: None,
            experts_per_token: None,
            attention_params_per_layer: 2 * d * d + 2 * d * kv,
            embedding_params: 2 * 32000 * d,
        }
    }
}

/// Parameters touched per token, by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ActivatedParams {
    pub active_neurons_per_expert: u64,
    pub ffn: u64,
    pub router: u64,
    pub attention: u64,
    pub embedding: u64,
    pub total: u64,
}

/// Active neurons out of `n` at a given sparsity, rounded up. Products that
/// land within 1e-9 of an integer are treated as that integer.
pub fn active_neurons(n: usize, neuron_sparsity: f64) -> u64 {
    let exact = (1.0 - neuron_sparsity) * n as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() < 1e-9 {
        nearest as u64
    } else {
        exact.ceil() as u64
    }
}

/// Per-token activated parameters: attention, embeddings and router dense;
/// each routed expert's FFN counted as `3·d·⌈(1 − s)·n⌉`.
pub fn count_activated_params(arch: &ArchConfig, neuron_sparsity: f64) -> Result<ActivatedParams> {
    if !(0.0..=1.0).contains(&neuron_sparsity) {
        return Err(Error::InvalidArgument(format!(
            "neuron sparsity must lie in [0, 1], got {neuron_sparsity}"
        )));
    }
    let (e, a) = match (arch.num_experts, arch.experts_per_token) {
        (Some(e), Some(a)) if a >= 1 && a <= e => (e as u64, a as u64),
        (None, None) => (0, 1),
        _ => {
            return Err(Error::InvalidArgument(
                "num_experts and experts_per_token must both be set with 1 <= a <= E".into(),
            ))
        }
    };
    let d = arch.hidden_size as u64;
    let layers = arch.num_layers as u64;
    let active = active_neurons(arch.intermediate_size, neuron_sparsity);
    let ffn = layers * a * 3 * d * active;
    let router = layers * e * d;
    let attention = layers * arch.attention_params_per_layer;
    Ok(ActivatedParams {
        active_neurons_per_expert: active,
        ffn,
        router,
        attention,
        embedding: arch.embedding_params,
        total: ffn + router + attention + arch.embedding_params,
    })
}

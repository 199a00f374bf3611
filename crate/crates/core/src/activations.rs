//! Gated feed-forward blocks.
//!
//! A block holds three bias-free projections. For input `x`:
//!
//! ```text
//! gate_pre = W_gate·x        up_pre = W_up·x
//! combined = act(gate_pre, up_pre)   (elementwise)
//! output   = W_down·combined
//! ```
//!
//! The activation decides how a neuron's gate and up values combine. dReLU
//! rectifies both sides, so a neuron is live only when both pre-activations are
//! positive; every other ReLU-family kind rectifies only the gate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{cast, Matrix, Real, Rng, Vector};

/// How gate and up pre-activations combine into a neuron's activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActivationKind {
    /// `silu(g)·u`
    #[serde(rename = "swiglu")]
    SwiGlu,
    /// `relu(g)·u`
    #[serde(rename = "reglu")]
    ReGlu,
    /// `(g > threshold ? g : 0)·u`; the up side is left untouched.
    #[serde(rename = "shifted_relu")]
    ShiftedRelu { threshold: f64 },
    /// `relu(g)·relu(u)`
    #[serde(rename = "drelu")]
    DRelu,
}

impl ActivationKind {
    pub fn shifted_relu(threshold: f64) -> Result<Self> {
        let kind = ActivationKind::ShiftedRelu { threshold };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::ShiftedRelu { threshold } if !(threshold >= 0.0 && threshold.is_finite()) => {
                Err(Error::InvalidArgument(format!(
                    "shifted ReLU threshold must be finite and >= 0, got {threshold}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Whether inactive neurons produce exact zeros (everything but SwiGLU).
    pub fn has_exact_zeros(&self) -> bool {
        !matches!(self, ActivationKind::SwiGlu)
    }

    /// Scalar activation. ReLU-family kinds return `+0.0` for inactive neurons.
    #[inline]
    pub fn combine<T: Real>(&self, g: T, u: T) -> T {
        let zero = T::zero();
        match *self {
            ActivationKind::SwiGlu => silu(g) * u,
            ActivationKind::ReGlu => {
                if g > zero {
                    g * u
                } else {
                    zero
                }
            }
            ActivationKind::ShiftedRelu { threshold } => {
                if g > cast(threshold) {
                    g * u
                } else {
                    zero
                }
            }
            ActivationKind::DRelu => {
                if g > zero && u > zero {
                    g * u
                } else {
                    zero
                }
            }
        }
    }

    /// Partial derivatives `(∂/∂g, ∂/∂u)` of [`combine`](Self::combine).
    /// The subgradient at a ReLU kink is 0.
    #[inline]
    pub fn combine_grad<T: Real>(&self, g: T, u: T) -> (T, T) {
        let zero = T::zero();
        match *self {
            ActivationKind::SwiGlu => {
                let s = sigmoid(g);
                let dsilu = s * (T::one() + g * (T::one() - s));
                (dsilu * u, g * s)
            }
            ActivationKind::ReGlu => {
                if g > zero {
                    (u, g)
                } else {
                    (zero, zero)
                }
            }
            ActivationKind::ShiftedRelu { threshold } => {
                if g > cast(threshold) {
                    (u, g)
                } else {
                    (zero, zero)
                }
            }
            ActivationKind::DRelu => {
                if g > zero && u > zero {
                    (u, g)
                } else {
                    (zero, zero)
                }
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::SwiGlu => f.write_str("swiglu"),
            ActivationKind::ReGlu => f.write_str("reglu"),
            ActivationKind::ShiftedRelu { threshold } => write!(f, "shifted_relu:{threshold}"),
            ActivationKind::DRelu => f.write_str("drelu"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    /// Parses `swiglu`, `reglu`, `drelu` or `shifted_relu:<threshold>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "swiglu" => Ok(ActivationKind::SwiGlu),
            "reglu" => Ok(ActivationKind::ReGlu),
            "drelu" => Ok(ActivationKind::DRelu),
            other => match other.strip_prefix("shifted_relu:") {
                Some(t) => {
                    let threshold = t
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("bad threshold {t:?}: {e}")))?;
                    ActivationKind::shifted_relu(threshold)
                }
                None => Err(Error::InvalidArgument(format!("unknown activation {s:?}"))),
            },
        }
    }
}

/// Logistic function in a form that never overflows `exp`.
#[inline]
pub fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(t: T) -> T {
    t * sigmoid(t)
}

/// Elementwise activation over whole pre-activation vectors.
pub fn combined<T: Real>(kind: ActivationKind, gate_pre: &Vector<T>, up_pre: &Vector<T>) -> Result<Vector<T>> {
    if gate_pre.len() != up_pre.len() {
        return Err(shape_err("combined", gate_pre.len(), up_pre.len()));
    }
    Ok(Vector::from_fn(gate_pre.len(), |j| kind.combine(gate_pre[j], up_pre[j])))
}

/// Weights of one gated feed-forward block: `w_gate`, `w_up` are `n×d`,
/// `w_down` is `d×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<T = f32> {
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
    pub kind: ActivationKind,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnTrace<T = f32> {
    pub gate_pre: Vector<T>,
    pub up_pre: Vector<T>,
    pub combined: Vector<T>,
    pub output: Vector<T>,
}

/// Gradients of a scalar loss with respect to the block's input and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnGrads<T = f32> {
    pub grad_x: Vector<T>,
    pub grad_w_gate: Matrix<T>,
    pub grad_w_up: Matrix<T>,
    pub grad_w_down: Matrix<T>,
}

impl<T: Real> FfnWeights<T> {
    pub fn new(w_gate: Matrix<T>, w_up: Matrix<T>, w_down: Matrix<T>, kind: ActivationKind) -> Result<Self> {
        kind.validate()?;
        let (n, d) = w_gate.shape();
        if w_up.shape() != (n, d) {
            return Err(shape_err("FfnWeights::new (w_up)", format!("{n}x{d}"), format!("{:?}", w_up.shape())));
        }
        if w_down.shape() != (d, n) {
            return Err(shape_err(
                "FfnWeights::new (w_down)",
                format!("{d}x{n}"),
                format!("{:?}", w_down.shape()),
            ));
        }
        Ok(Self {
            w_gate,
            w_up,
            w_down,
            kind,
        })
    }

    /// Gaussian `N(0, std²)` weights, drawn gate, up, down in that order.
    pub fn gaussian(d: usize, n: usize, kind: ActivationKind, std: f64, rng: &mut Rng) -> Result<Self> {
        let w_gate = Matrix::gaussian(n, d, std, rng)?;
        let w_up = Matrix::gaussian(n, d, std, rng)?;
        let w_down = Matrix::gaussian(d, n, std, rng)?;
        Self::new(w_gate, w_up, w_down, kind)
    }

    /// Model (input/output) width.
    pub fn d(&self) -> usize {
        self.w_gate.cols()
    }

    /// Intermediate width: the number of neurons.
    pub fn n(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn with_kind(mut self, kind: ActivationKind) -> Result<Self> {
        kind.validate()?;
        self.kind = kind;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> FfnWeights<U> {
        FfnWeights {
            w_gate: self.w_gate.cast(),
            w_up: self.w_up.cast(),
            w_down: self.w_down.cast(),
            kind: self.kind,
        }
    }

    fn check_input(&self, x: &Vector<T>, op: &'static str) -> Result<()> {
        if x.len() != self.d() {
            return Err(shape_err(op, format!("input of length {}", self.d()), x.len()));
        }
        Ok(())
    }

    /// Full forward pass, returning the trace as well.
    pub fn trace(&self, x: &Vector<T>) -> Result<FfnTrace<T>> {
        self.check_input(x, "ffn_forward")?;
        let gate_pre = self.w_gate.matvec(x)?;
        let up_pre = self.w_up.matvec(x)?;
        let combined = combined(self.kind, &gate_pre, &up_pre)?;
        let output = self.w_down.matvec(&combined)?;
        Ok(FfnTrace {
            gate_pre,
            up_pre,
            combined,
            output,
        })
    }

    pub fn forward(&self, x: &Vector<T>) -> Result<Vector<T>> {
        Ok(self.trace(x)?.output)
    }

    /// Forward pass; the trace is returned only when `capture` is set.
    pub fn ffn_forward(&self, x: &Vector<T>, capture: bool) -> Result<(Vector<T>, Option<FfnTrace<T>>)> {
        let trace = self.trace(x)?;
        if capture {
            Ok((trace.output.clone(), Some(trace)))
        } else {
            Ok((trace.output, None))
        }
    }

    /// Gradients of `⟨grad_out, forward(x)⟩`.
    pub fn ffn_backward(&self, x: &Vector<T>, grad_out: &Vector<T>) -> Result<FfnGrads<T>> {
        self.check_input(x, "ffn_backward")?;
        if grad_out.len() != self.d() {
            return Err(shape_err(
                "ffn_backward",
                format!("grad_out of length {}", self.d()),
                grad_out.len(),
            ));
        }
        let trace = self.trace(x)?;
        let grad_w_down = Matrix::outer(grad_out, &trace.combined);
        let grad_combined = self.w_down.matvec_transposed(grad_out)?;

        let n = self.n();
        let mut grad_gate = Vector::zeros(n);
        let mut grad_up = Vector::zeros(n);
        for j in 0..n {
            let (dg, du) = self.kind.combine_grad(trace.gate_pre[j], trace.up_pre[j]);
            grad_gate.as_mut_slice()[j] = grad_combined[j] * dg;
            grad_up.as_mut_slice()[j] = grad_combined[j] * du;
        }

        let grad_w_gate = Matrix::outer(&grad_gate, x);
        let grad_w_up = Matrix::outer(&grad_up, x);
        let from_gate = self.w_gate.matvec_transposed(&grad_gate)?;
        let from_up = self.w_up.matvec_transposed(&grad_up)?;
        let grad_x = Vector::from_fn(self.d(), |i| from_gate[i] + from_up[i]);

        Ok(FfnGrads {
            grad_x,
            grad_w_gate,
            grad_w_up,
            grad_w_down,
        })
    }
}

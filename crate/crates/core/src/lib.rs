//! Activation-sparse inference for gated feed-forward blocks.
//!
//! The crate covers the full path from weights to measurements:
//!
//! - [`activations`]: gated MLP forward/backward for SwiGLU, ReGLU, shifted
//!   ReLU and dReLU.
//! - [`sparsity`]: neuron masks, top-k masking, sparsity reports and
//!   histograms.
//! - [`kernel`]: the neuron-gather kernel that touches only active rows.
//! - [`moe`]: routed experts, sparsity composition and parameter counting.
//! - [`predictor`]: low-rank active-set predictors.
//! - [`model_io`]: the TSPW weight file, model configs and layer stacks.
//! - [`bench`]: dense vs. sparse timing.
//! - [`cli`]: the `sparse-act` command-line driver.
//!
//! Every dot product accumulates in ascending index order starting from
//! `+0.0`. Inactive ReLU-family neurons contribute exact zeros, so skipping
//! them leaves each accumulator bit-for-bit unchanged; the sparse kernel is
//! therefore bitwise equal to the dense path on the exact active set.

pub mod activations;
pub mod bench;
pub mod cli;
pub mod error;
pub mod inputs;
pub mod kernel;
pub mod model_io;
pub mod moe;
pub mod predictor;
pub mod sparsity;
pub mod tensor;

pub use activations::{ActivationKind, FfnGrads, FfnTrace, FfnWeights};
pub use error::{Error, FormatError, Result};
pub use kernel::GatheredFfn;
pub use model_io::{gen_synthetic_model, load_model, save_model, Model, ModelConfig, ModelFile};
pub use moe::{compose_sparsity, count_activated_params, MoeLayer};
pub use predictor::{MaskPredictor, OraclePredictor, PredictorModel};
pub use sparsity::{topk_mask, NeuronMask, SparsityReport, UnitId};
pub use tensor::{Matrix, Rng, Vector};

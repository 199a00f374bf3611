//! Neuron-gather execution of a gated block.
//!
//! Only neurons in the mask are touched: their gate and up rows are dotted
//! with the input, and their down-projection columns (stored here as rows of
//! a transposed copy) are accumulated into the output in ascending neuron
//! order. Accumulation order per output element is the same as the dense
//! matvec, which is what makes the exact-mask result bit-identical.

use crate::activations::FfnWeights;
use crate::error::{shape_err, Result};
use crate::sparsity::NeuronMask;
use crate::tensor::{axpy_rows, dot_rows, Matrix, Real, Vector};

/// An [`FfnWeights`] plus a transposed copy of `w_down` (`n×d`), so the
/// down-projection column of each neuron is a contiguous row.
#[derive(Debug, Clone)]
pub struct GatheredFfn<'w, T: Real = f32> {
    ffn: &'w FfnWeights<T>,
    w_down_t: Matrix<T>,
}

/// Multiply-accumulate tally from an instrumented run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount(pub u64);

trait MacSink {
    fn add(&mut self, macs: usize);
}

impl MacSink for () {
    #[inline(always)]
    fn add(&mut self, _: usize) {}
}

impl MacSink for MacCount {
    #[inline(always)]
    fn add(&mut self, macs: usize) {
        self.0 += macs as u64;
    }
}

impl<'w, T: Real> GatheredFfn<'w, T> {
    pub fn new(ffn: &'w FfnWeights<T>) -> Self {
        Self {
            ffn,
            w_down_t: ffn.w_down.transpose(),
        }
    }

    pub fn weights(&self) -> &'w FfnWeights<T> {
        self.ffn
    }

    pub fn w_down_transposed(&self) -> &Matrix<T> {
        &self.w_down_t
    }

    /// Computes only the neurons in `mask`.
    pub fn sparse_ffn_forward(&self, x: &Vector<T>, mask: &NeuronMask) -> Result<Vector<T>> {
        self.run(x, mask, &mut ())
    }

    /// As [`sparse_ffn_forward`](Self::sparse_ffn_forward), also counting
    /// every multiply-accumulate performed.
    pub fn sparse_ffn_forward_counted(&self, x: &Vector<T>, mask: &NeuronMask) -> Result<(Vector<T>, MacCount)> {
        let mut count = MacCount::default();
        let out = self.run(x, mask, &mut count)?;
        Ok((out, count))
    }

    /// Multiply-accumulates of the dense forward pass: `3·d·n`.
    pub fn dense_macs(&self) -> u64 {
        3 * self.ffn.d() as u64 * self.ffn.n() as u64
    }

    fn run(&self, x: &Vector<T>, mask: &NeuronMask, macs: &mut impl MacSink) -> Result<Vector<T>> {
        let (d, n) = (self.ffn.d(), self.ffn.n());
        if x.len() != d {
            return Err(shape_err("sparse_ffn_forward", format!("input of length {d}"), x.len()));
        }
        if mask.n() != n {
            return Err(shape_err(
                "sparse_ffn_forward",
                format!("mask over {n} neurons"),
                format!("mask over {} neurons", mask.n()),
            ));
        }
        let active = mask.active();
        let k = active.len();

        let mut gate = vec![T::zero(); k];
        let mut up = vec![T::zero(); k];
        dot_rows(&self.ffn.w_gate, active, x.as_slice(), &mut gate);
        dot_rows(&self.ffn.w_up, active, x.as_slice(), &mut up);
        macs.add(2 * k * d);

        let kind = self.ffn.kind;
        let coeffs: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kind.combine(g, u)).collect();
        let mut out = vec![T::zero(); d];
        axpy_rows(&mut out, &self.w_down_t, active, &coeffs);
        macs.add(k * d);
        Vector::new(out)
    }
}

/// Free-function form of [`GatheredFfn::sparse_ffn_forward`].
pub fn sparse_ffn_forward<T: Real>(g: &GatheredFfn<'_, T>, x: &Vector<T>, mask: &NeuronMask) -> Result<Vector<T>> {
    g.sparse_ffn_forward(x, mask)
}

//! Transformer building blocks with hand-written forward and backward
//! passes.
//!
//! There is no autograd tape. Each layer's `forward` returns the output
//! plus a cache of whatever the analytic `backward` needs; inference
//! paths simply drop the cache. Gradients accumulate into a [`GradStore`]
//! keyed by parameter name, and the same names drive the optimizer,
//! checkpoint index, and gradient checks.
//!
//! Batched sequences are packed as `[batch * seq, width]` matrices so the
//! linear layers run as a few large matrix products; only attention looks
//! at per-item row blocks.

pub mod attention;
pub mod block;
pub mod init;
pub mod linear;
pub mod norm;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use block::{BlockCache, Mlp, MlpCache, TransformerBlock};
pub use init::Initializer;
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};

use crate::float::{real, Real};

/// Shape metadata for a packed `[batch * seq, width]` activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub seq: usize,
}

impl SeqShape {
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Read-only parameter visitor. Layers report `(name, shape, data)` leaves
/// in a fixed order.
pub trait Visit<F> {
    fn leaf(&mut self, name: &str, shape: &[usize], data: &[F]);
}

/// Mutable parameter visitor; same traversal order as [`Visit`].
pub trait VisitMut<F> {
    fn leaf(&mut self, name: &str, shape: &[usize], data: &mut [F]);
}

pub(crate) fn key(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Named gradient accumulator. `BTreeMap` keeps iteration deterministic.
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    map: BTreeMap<String, (Vec<usize>, Vec<F>)>,
}

impl<F: Real> GradStore<F> {
    pub fn new() -> Self {
        GradStore {
            map: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: String, shape: &[usize], data: &[F]) {
        match self.map.get_mut(&name) {
            Some((existing_shape, acc)) => {
                debug_assert_eq!(existing_shape.as_slice(), shape, "gradient shape for {name}");
                for (a, &d) in acc.iter_mut().zip(data) {
                    *a = *a + d;
                }
            }
            None => {
                self.map.insert(name, (shape.to_vec(), data.to_vec()));
            }
        }
    }

    pub fn add2(&mut self, name: String, grad: &Array2<F>) {
        let shape = [grad.nrows(), grad.ncols()];
        self.add(name, &shape, grad.as_slice().expect("standard layout"));
    }

    pub fn add1(&mut self, name: String, grad: &Array1<F>) {
        let shape = [grad.len()];
        self.add(name, &shape, grad.as_slice().expect("standard layout"));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[F])> {
        self.map
            .get(name)
            .map(|(shape, data)| (shape.as_slice(), data.as_slice()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[F])> {
        self.map
            .iter()
            .map(|(name, (shape, data))| (name.as_str(), shape.as_slice(), data.as_slice()))
    }

    pub fn scale(&mut self, factor: F) {
        for (_, data) in self.map.values_mut() {
            for v in data {
                *v = *v * factor;
            }
        }
    }

    pub fn zero_out(&mut self, name: &str) {
        if let Some((_, data)) = self.map.get_mut(name) {
            data.fill(F::zero());
        }
    }

    pub fn l2_norm(&self, name: &str) -> Option<f64> {
        self.map.get(name).map(|(_, data)| {
            data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<F: Real> Default for GradStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable row softmax, in place. Rows with `-inf` entries get
/// exact zeros there.
pub fn softmax_rows_inplace<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Backward of row softmax: given probabilities `p` and upstream `dp`,
/// returns `p * (dp - rowsum(dp * p))`.
pub fn softmax_rows_backward<F: Real>(probs: &Array2<F>, dprobs: &Array2<F>) -> Array2<F> {
    let inner = (dprobs * probs).sum_axis(Axis(1));
    let mut out = dprobs.clone();
    for (mut row, &s) in out.rows_mut().into_iter().zip(inner.iter()) {
        row.map_inplace(|v| *v = *v - s);
    }
    out * probs
}

/// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<F: Real>(x: F) -> F {
    let c: F = real(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k: F = real(0.044715);
    let half: F = real(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (F::one() + inner.tanh())
}

/// Derivative of the tanh-form GELU.
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c: F = real(0.797_884_560_802_865_4);
    let k: F = real(0.044715);
    let half: F = real(0.5);
    let three: F = real(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

/// Row-wise L2 normalization. Returns the normalized matrix and the
/// original row norms (needed by the backward pass).
pub fn l2_normalize_rows<F: Real>(x: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let norms = Array1::from_iter(
        x.rows()
            .into_iter()
            .map(|row| row.iter().map(|&v| v * v).sum::<F>().sqrt()),
    );
    let mut out = x.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row.map_inplace(|v| *v = *v / n);
    }
    (out, norms)
}

/// Backward of row-wise L2 normalization: `dx = (dy - y * <dy, y>) / norm`.
pub fn l2_normalize_rows_backward<F: Real>(
    normalized: &Array2<F>,
    norms: &Array1<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    let mut dx = dy.clone();
    for ((mut drow, yrow), &n) in dx
        .rows_mut()
        .into_iter()
        .zip(normalized.rows())
        .zip(norms.iter())
    {
        let dot = drow
            .iter()
            .zip(yrow.iter())
            .map(|(&d, &y)| d * y)
            .sum::<F>();
        for (d, &y) in drow.iter_mut().zip(yrow.iter()) {
            *d = (*d - y * dot) / n;
        }
    }
    dx
}

//! Dense layer over packed `[rows, in_dim]` activations.

use ndarray::{Array1, Array2, Axis};

use super::{key, GradStore, Visit, VisitMut};
use crate::float::Real;

/// `y = x W + b` with `W: [in_dim, out_dim]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Option<Array1<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(weight: Array2<F>, bias: Option<Array1<F>>) -> Self {
        if let Some(b) = &bias {
            debug_assert_eq!(weight.ncols(), b.len());
        }
        Linear { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates weight and bias gradients under `prefix` and returns
    /// the gradient with respect to the input.
    pub fn backward(
        &self,
        x: &Array2<F>,
        dy: &Array2<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) -> Array2<F> {
        grads.add2(key(prefix, "weight"), &x.t().dot(dy));
        if self.bias.is_some() {
            grads.add1(key(prefix, "bias"), &dy.sum_axis(Axis(0)));
        }
        dy.dot(&self.weight.t())
    }

    pub fn visit(&self, prefix: &str, v: &mut impl Visit<F>) {
        let shape = [self.weight.nrows(), self.weight.ncols()];
        v.leaf(
            &key(prefix, "weight"),
            &shape,
            self.weight.as_slice().expect("standard layout"),
        );
        if let Some(b) = &self.bias {
            v.leaf(&key(prefix, "bias"), &[b.len()], b.as_slice().expect("contiguous"));
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl VisitMut<F>) {
        let shape = [self.weight.nrows(), self.weight.ncols()];
        v.leaf(
            &key(prefix, "weight"),
            &shape,
            self.weight.as_slice_mut().expect("standard layout"),
        );
        if let Some(b) = &mut self.bias {
            let len = b.len();
            v.leaf(&key(prefix, "bias"), &[len], b.as_slice_mut().expect("contiguous"));
        }
    }
}

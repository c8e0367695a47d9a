//! Layer normalization over the last axis of packed activations.

use ndarray::{Array1, Array2, Axis};

use super::{key, GradStore, Visit, VisitMut};
use crate::float::{real, Real};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-feature affine layer norm: `y = gamma * (x - mean) / std + beta`.
#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub eps: F,
}

/// Saved normalizer state: `xhat` is the standardized input, `rstd` the
/// per-row reciprocal standard deviation.
#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: real(LAYER_NORM_EPS),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let dim: F = real(x.ncols() as f64);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.iter().copied().sum::<F>() / dim;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dim;
            let rs = F::one() / (var + self.eps).sqrt();
            row.map_inplace(|v| *v = (*v - mean) * rs);
            *r = rs;
        }
        let mut y = xhat.clone();
        y *= &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    /// `dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))`
    /// where `dxhat = dy * gamma`; means are over the feature axis.
    pub fn backward(
        &self,
        cache: &LayerNormCache<F>,
        dy: &Array2<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) -> Array2<F> {
        let dim: F = real(dy.ncols() as f64);
        grads.add1(key(prefix, "gamma"), &(dy * &cache.xhat).sum_axis(Axis(0)));
        grads.add1(key(prefix, "beta"), &dy.sum_axis(Axis(0)));

        let mut dxhat = dy.clone();
        dxhat *= &self.gamma;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / dim;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / dim;

        let mut dx = dxhat;
        for (((mut drow, xrow), &m1), (&m2, &rs)) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(mean_dxhat.iter())
            .zip(mean_dxhat_xhat.iter().zip(cache.rstd.iter()))
        {
            for (d, &xh) in drow.iter_mut().zip(xrow.iter()) {
                *d = rs * (*d - m1 - xh * m2);
            }
        }
        dx
    }

    pub fn visit(&self, prefix: &str, v: &mut impl Visit<F>) {
        v.leaf(
            &key(prefix, "gamma"),
            &[self.gamma.len()],
            self.gamma.as_slice().expect("contiguous"),
        );
        v.leaf(
            &key(prefix, "beta"),
            &[self.beta.len()],
            self.beta.as_slice().expect("contiguous"),
        );
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl VisitMut<F>) {
        let glen = self.gamma.len();
        v.leaf(
            &key(prefix, "gamma"),
            &[glen],
            self.gamma.as_slice_mut().expect("contiguous"),
        );
        let blen = self.beta.len();
        v.leaf(
            &key(prefix, "beta"),
            &[blen],
            self.beta.as_slice_mut().expect("contiguous"),
        );
    }
}

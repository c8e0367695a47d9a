//! Multi-head self-attention over packed `[batch * seq, width]` inputs.

use ndarray::{s, Array2};

use super::{key, softmax_rows_backward, softmax_rows_inplace, GradStore, Linear, SeqShape, Visit,
            VisitMut};
use crate::float::{real, Real};

/// Standard multi-head attention with separate Q/K/V/output projections.
/// `causal` masks each query position to itself and earlier positions.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub heads: usize,
}

/// Forward state for the backward pass. `probs` holds one `[seq, seq]`
/// attention matrix per `(item, head)`, indexed `item * heads + head`.
#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    pub probs: Vec<Array2<F>>,
    pub ctx: Array2<F>,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new(wq: Linear<F>, wk: Linear<F>, wv: Linear<F>, wo: Linear<F>, heads: usize) -> Self {
        debug_assert_eq!(wq.out_dim() % heads, 0, "width divisible by heads");
        MultiHeadAttention { wq, wk, wv, wo, heads }
    }

    pub fn width(&self) -> usize {
        self.wq.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn forward(
        &self,
        x: &Array2<F>,
        shape: SeqShape,
        causal: bool,
    ) -> (Array2<F>, AttentionCache<F>) {
        let (batch, seq) = (shape.batch, shape.seq);
        let dh = self.head_dim();
        let scale: F = real(1.0 / (dh as f64).sqrt());

        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);

        let mut ctx = Array2::zeros((batch * seq, self.width()));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let rows = s![b * seq..(b + 1) * seq, ..];
            for h in 0..self.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(rows).slice_move(cols);
                let kh = k.slice(rows).slice_move(cols);
                let vh = v.slice(rows).slice_move(cols);

                let mut scores = qh.dot(&kh.t());
                scores.map_inplace(|s| *s = *s * scale);
                if causal {
                    for i in 0..seq {
                        for j in (i + 1)..seq {
                            scores[[i, j]] = F::neg_infinity();
                        }
                    }
                }
                softmax_rows_inplace(&mut scores);
                let out = scores.dot(&vh);
                ctx.slice_mut(rows)
                    .slice_move(cols)
                    .assign(&out);
                probs.push(scores);
            }
        }

        let y = self.wo.forward(&ctx);
        (y, AttentionCache { q, k, v, probs, ctx })
    }

    pub fn backward(
        &self,
        x: &Array2<F>,
        cache: &AttentionCache<F>,
        dy: &Array2<F>,
        shape: SeqShape,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) -> Array2<F> {
        let (batch, seq) = (shape.batch, shape.seq);
        let dh = self.head_dim();
        let scale: F = real(1.0 / (dh as f64).sqrt());

        let dctx = self.wo.backward(&cache.ctx, dy, &key(prefix, "wo"), grads);

        let mut dq = Array2::zeros((batch * seq, self.width()));
        let mut dk = Array2::zeros((batch * seq, self.width()));
        let mut dv = Array2::zeros((batch * seq, self.width()));
        for b in 0..batch {
            let rows = s![b * seq..(b + 1) * seq, ..];
            for h in 0..self.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = cache.q.slice(rows).slice_move(cols);
                let kh = cache.k.slice(rows).slice_move(cols);
                let vh = cache.v.slice(rows).slice_move(cols);
                let p = &cache.probs[b * self.heads + h];
                let dctx_h = dctx.slice(rows).slice_move(cols);

                let dp = dctx_h.dot(&vh.t());
                let dvh = p.t().dot(&dctx_h);
                // Masked positions have p == 0, so ds is exactly zero there
                // and no gradient leaks across the causal boundary.
                let mut ds = softmax_rows_backward(p, &dp);
                ds.map_inplace(|v| *v = *v * scale);

                dq.slice_mut(rows).slice_move(cols).assign(&ds.dot(&kh));
                dk.slice_mut(rows).slice_move(cols).assign(&ds.t().dot(&qh));
                dv.slice_mut(rows).slice_move(cols).assign(&dvh);
            }
        }

        let mut dx = self.wq.backward(x, &dq, &key(prefix, "wq"), grads);
        dx += &self.wk.backward(x, &dk, &key(prefix, "wk"), grads);
        dx += &self.wv.backward(x, &dv, &key(prefix, "wv"), grads);
        dx
    }

    pub fn visit(&self, prefix: &str, v: &mut impl Visit<F>) {
        self.wq.visit(&key(prefix, "wq"), v);
        self.wk.visit(&key(prefix, "wk"), v);
        self.wv.visit(&key(prefix, "wv"), v);
        self.wo.visit(&key(prefix, "wo"), v);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl VisitMut<F>) {
        self.wq.visit_mut(&key(prefix, "wq"), v);
        self.wk.visit_mut(&key(prefix, "wk"), v);
        self.wv.visit_mut(&key(prefix, "wv"), v);
        self.wo.visit_mut(&key(prefix, "wo"), v);
    }
}

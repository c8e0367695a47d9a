//! Pre-norm transformer block: attention and MLP residual branches.

use ndarray::Array2;

use super::{gelu, gelu_grad, key, AttentionCache, GradStore, LayerNorm, LayerNormCache, Linear,
            MultiHeadAttention, SeqShape, Visit, VisitMut};
use crate::float::Real;

/// Two-layer feed-forward with GELU, conventionally 4x expansion.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub fc: Linear<F>,
    pub proj: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    pub x: Array2<F>,
    pub pre: Array2<F>,
    pub act: Array2<F>,
}

impl<F: Real> Mlp<F> {
    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc.forward(x);
        let act = pre.mapv(gelu);
        let y = self.proj.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &MlpCache<F>,
        dy: &Array2<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) -> Array2<F> {
        let dact = self.proj.backward(&cache.act, dy, &key(prefix, "proj"), grads);
        let dpre = &dact * &cache.pre.mapv(gelu_grad);
        self.fc.backward(&cache.x, &dpre, &key(prefix, "fc"), grads)
    }

    pub fn visit(&self, prefix: &str, v: &mut impl Visit<F>) {
        self.fc.visit(&key(prefix, "fc"), v);
        self.proj.visit(&key(prefix, "proj"), v);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl VisitMut<F>) {
        self.fc.visit_mut(&key(prefix, "fc"), v);
        self.proj.visit_mut(&key(prefix, "proj"), v);
    }
}

/// Pre-norm residual block:
/// `y = x + attn(ln1(x))`, `out = y + mlp(ln2(y))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<F> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

/// Everything the block backward needs: normalizer caches, the attention
/// cache keyed to `x1`, and the residual-stream inputs of both branches.
#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    pub ln1: LayerNormCache<F>,
    pub x1: Array2<F>,
    pub attn: AttentionCache<F>,
    pub ln2: LayerNormCache<F>,
    pub mlp: MlpCache<F>,
}

impl<F: Real> TransformerBlock<F> {
    pub fn forward(
        &self,
        x: &Array2<F>,
        shape: SeqShape,
        causal: bool,
    ) -> (Array2<F>, BlockCache<F>) {
        let (x1, ln1_cache) = self.ln1.forward(x);
        let (attn_out, attn_cache) = self.attn.forward(&x1, shape, causal);
        let y = x + &attn_out;
        let (y1, ln2_cache) = self.ln2.forward(&y);
        let (mlp_out, mlp_cache) = self.mlp.forward(&y1);
        let out = y + mlp_out;
        (
            out,
            BlockCache {
                ln1: ln1_cache,
                x1,
                attn: attn_cache,
                ln2: ln2_cache,
                mlp: mlp_cache,
            },
        )
    }

    /// Inference-only forward; skips cache construction entirely.
    pub fn forward_infer(&self, x: &Array2<F>, shape: SeqShape, causal: bool) -> Array2<F> {
        let (out, _) = self.forward(x, shape, causal);
        out
    }

    pub fn backward(
        &self,
        cache: &BlockCache<F>,
        dout: &Array2<F>,
        shape: SeqShape,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) -> Array2<F> {
        let dy1 = self.mlp.backward(&cache.mlp, dout, &key(prefix, "mlp"), grads);
        let mut dy = self.ln2.backward(&cache.ln2, &dy1, &key(prefix, "ln2"), grads);
        dy += dout;

        let dx1 = self
            .attn
            .backward(&cache.x1, &cache.attn, &dy, shape, &key(prefix, "attn"), grads);
        let mut dx = self.ln1.backward(&cache.ln1, &dx1, &key(prefix, "ln1"), grads);
        dx += &dy;
        dx
    }

    pub fn visit(&self, prefix: &str, v: &mut impl Visit<F>) {
        self.ln1.visit(&key(prefix, "ln1"), v);
        self.attn.visit(&key(prefix, "attn"), v);
        self.ln2.visit(&key(prefix, "ln2"), v);
        self.mlp.visit(&key(prefix, "mlp"), v);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl VisitMut<F>) {
        self.ln1.visit_mut(&key(prefix, "ln1"), v);
        self.attn.visit_mut(&key(prefix, "attn"), v);
        self.ln2.visit_mut(&key(prefix, "ln2"), v);
        self.mlp.visit_mut(&key(prefix, "mlp"), v);
    }
}

//! The two towers: a causal transformer text encoder and a ViT image
//! encoder, each projecting into a shared joint space, plus the combined
//! dual encoder with its learnable logit scale and optional image-head
//! adapter.
//!
//! All weights live in 32-bit storage by default; every routine is
//! generic over [`Real`] so the gradient-check suite can run the same
//! code in 64-bit.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{real, Real};
use crate::nn::{
    l2_normalize_rows, l2_normalize_rows_backward, BlockCache, GradStore, Initializer, LayerNorm,
    LayerNormCache, Linear, Mlp, MultiHeadAttention, SeqShape, TransformerBlock, Visit, VisitMut,
};
use crate::tokenizer::TokenBatch;
use crate::util::seeded_rng;
use crate::vision::{bicubic_resize_plane, patch_grid, ImageBatch, ImageSpec};

pub const INIT_STD: f64 = 0.02;
/// `exp(log_scale)` starts at 1/0.07, the usual contrastive temperature.
pub const LOG_SCALE_INIT: f64 = 2.6592600369327783; // ln(1/0.07)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTowerConfig {
    pub context_length: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTowerConfig {
    pub spec: ImageSpec,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextTowerConfig,
    pub image: ImageTowerConfig,
    pub joint_dim: usize,
    pub preset_name: String,
    /// Whether the image head carries the two-layer adapter of the
    /// frozen-backbone regime. Part of the skeleton, so it is stored.
    #[serde(default)]
    pub adapter: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTrainConfig(msg));
        if self.text.width % self.text.heads != 0 {
            return bad(format!(
                "text width {} not divisible by {} heads",
                self.text.width, self.text.heads
            ));
        }
        if self.image.width % self.image.heads != 0 {
            return bad(format!(
                "image width {} not divisible by {} heads",
                self.image.width, self.image.heads
            ));
        }
        if self.text.context_length < 3 {
            return Err(Error::ContextTooShort(self.text.context_length));
        }
        if self.joint_dim == 0 || self.text.layers == 0 || self.image.layers == 0 {
            return bad("zero-sized tower dimension".into());
        }
        patch_grid(&self.image.spec)?;
        Ok(())
    }
}

/// A batch of joint-space vectors. `normalized` records whether rows have
/// been L2-normalized; consumers that require unit rows check the flag
/// and the actual norms.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix<F> {
    pub vectors: Array2<F>,
    pub normalized: bool,
}

pub const NORM_TOLERANCE: f64 = 1e-5;

impl<F: Real> EmbeddingMatrix<F> {
    pub fn raw(vectors: Array2<F>) -> Self {
        EmbeddingMatrix {
            vectors,
            normalized: false,
        }
    }

    /// Wraps rows that are already unit-norm, verifying the invariant.
    pub fn normalized(vectors: Array2<F>) -> Result<Self> {
        let m = EmbeddingMatrix {
            vectors,
            normalized: true,
        };
        m.require_normalized()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn require_normalized(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::NotNormalized {
                row: 0,
                norm: f64::NAN,
            });
        }
        for (row, r) in self.vectors.rows().into_iter().enumerate() {
            let norm = r.iter().map(|&v| (v * v).as_f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        Ok(())
    }
}

fn require_finite<F: Real>(what: &'static str, values: &Array2<F>) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what, step: None });
    }
    Ok(())
}

/// Builds one transformer block; the residual-branch output projections
/// (attention `wo`, MLP `proj`) use the depth-scaled standard deviation.
fn init_block<F: Real>(
    init: &mut Initializer<'_>,
    width: usize,
    heads: usize,
    layers: usize,
) -> TransformerBlock<F> {
    let residual_std = INIT_STD / ((2 * layers) as f64).sqrt();
    let lin = |init: &mut Initializer<'_>, inp: usize, out: usize, std: f64| {
        Linear::new(init.matrix(inp, out, std), Some(Array1::zeros(out)))
    };
    TransformerBlock {
        ln1: LayerNorm::new(width),
        attn: MultiHeadAttention::new(
            lin(init, width, width, INIT_STD),
            lin(init, width, width, INIT_STD),
            lin(init, width, width, INIT_STD),
            lin(init, width, width, residual_std),
            heads,
        ),
        ln2: LayerNorm::new(width),
        mlp: Mlp {
            fc: lin(init, width, width * 4, INIT_STD),
            proj: lin(init, width * 4, width, residual_std),
        },
    }
}

// ---------------------------------------------------------------------------
// Text tower
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TextTower<F> {
    pub config: TextTowerConfig,
    /// `[vocab_size, width]`
    pub token_embed: Array2<F>,
    /// `[context_length, width]`
    pub pos_embed: Array2<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub final_ln: LayerNorm<F>,
    /// `[width, joint_dim]`, no bias
    pub proj: Array2<F>,
}

/// Forward state of the text tower, kept only when gradients are needed.
pub struct TextActivations<F> {
    pub shape: SeqShape,
    pub ids: Array2<u32>,
    pub blocks: Vec<BlockCache<F>>,
    pub final_cache: LayerNormCache<F>,
    /// Rows of the post-norm stream at each item's EOT position, `[B, width]`.
    pub pooled: Array2<F>,
    pub eot_positions: Vec<usize>,
    /// Projected features before normalization, `[B, joint_dim]`.
    pub feats: Array2<F>,
}

impl<F: Real> TextTower<F> {
    /// Draw order (token_embed, pos_embed, blocks front to back, proj) is
    /// part of the determinism contract.
    pub fn init(config: TextTowerConfig, joint_dim: usize, init: &mut Initializer<'_>) -> Self {
        let token_embed = init.matrix(config.vocab_size, config.width, INIT_STD);
        let pos_embed = init.matrix(config.context_length, config.width, INIT_STD);
        let blocks = (0..config.layers)
            .map(|_| init_block(init, config.width, config.heads, config.layers))
            .collect();
        let final_ln = LayerNorm::new(config.width);
        let proj = init.matrix(config.width, joint_dim, INIT_STD);
        TextTower {
            config,
            token_embed,
            pos_embed,
            blocks,
            final_ln,
            proj,
        }
    }

    fn embed(&self, batch: &TokenBatch) -> Result<Array2<F>> {
        let (b, l) = (batch.ids.nrows(), batch.context_length);
        if l != self.config.context_length {
            return Err(Error::MalformedTokenRow(format!(
                "batch context length {l} does not match tower context length {}",
                self.config.context_length
            )));
        }
        let mut x = Array2::zeros((b * l, self.config.width));
        for (i, &id) in batch.ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::TokenIdOutOfRange {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
            let t = i % l;
            let row = &self.token_embed.row(id as usize) + &self.pos_embed.row(t);
            x.row_mut(i).assign(&row);
        }
        Ok(x)
    }

    fn eot_positions(&self, batch: &TokenBatch) -> Vec<usize> {
        batch.lengths.iter().map(|&len| len - 1).collect()
    }

    /// Full forward with caches. Returns pre-normalization features `[B, joint]`.
    pub fn forward(&self, batch: &TokenBatch) -> Result<(Array2<F>, TextActivations<F>)> {
        let shape = SeqShape {
            batch: batch.ids.nrows(),
            seq: batch.context_length,
        };
        let mut x = self.embed(batch)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, shape, true);
            x = next;
            caches.push(cache);
        }
        let (x, final_cache) = self.final_ln.forward(&x);
        let eot = self.eot_positions(batch);
        let mut pooled = Array2::zeros((shape.batch, self.config.width));
        for (b, &pos) in eot.iter().enumerate() {
            pooled.row_mut(b).assign(&x.row(b * shape.seq + pos));
        }
        let feats = pooled.dot(&self.proj);
        require_finite("text features", &feats)?;
        Ok((
            feats.clone(),
            TextActivations {
                shape,
                ids: batch.ids.clone(),
                blocks: caches,
                final_cache,
                pooled,
                eot_positions: eot,
                feats,
            },
        ))
    }

    /// Inference forward; per-block caches are dropped as soon as the
    /// block has run, so peak memory stays near a single block's state.
    pub fn infer(&self, batch: &TokenBatch) -> Result<Array2<F>> {
        let shape = SeqShape {
            batch: batch.ids.nrows(),
            seq: batch.context_length,
        };
        let mut x = self.embed(batch)?;
        for block in &self.blocks {
            x = block.forward_infer(&x, shape, true);
        }
        let (x, _) = self.final_ln.forward(&x);
        let mut pooled = Array2::zeros((shape.batch, self.config.width));
        for (b, &pos) in self.eot_positions(batch).iter().enumerate() {
            pooled.row_mut(b).assign(&x.row(b * shape.seq + pos));
        }
        let feats = pooled.dot(&self.proj);
        require_finite("text features", &feats)?;
        Ok(feats)
    }

    /// Backpropagates `dfeats` (gradient wrt pre-normalization features)
    /// into the gradient store. Inputs are tokens, so nothing flows out.
    pub fn backward(
        &self,
        acts: &TextActivations<F>,
        dfeats: &Array2<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) {
        let shape = acts.shape;
        grads.add2(format!("{prefix}.proj"), &acts.pooled.t().dot(dfeats));
        let dpooled = dfeats.dot(&self.proj.t());

        let mut dx = Array2::zeros((shape.rows(), self.config.width));
        for (b, &pos) in acts.eot_positions.iter().enumerate() {
            dx.row_mut(b * shape.seq + pos).assign(&dpooled.row(b));
        }
        let mut dx = self
            .final_ln
            .backward(&acts.final_cache, &dx, &format!("{prefix}.final_ln"), grads);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(
                &acts.blocks[i],
                &dx,
                shape,
                &format!("{prefix}.blocks.{i}"),
                grads,
            );
        }

        let mut dtok = Array2::zeros(self.token_embed.dim());
        let mut dpos = Array2::zeros(self.pos_embed.dim());
        for (i, &id) in acts.ids.iter().enumerate() {
            let t = i % shape.seq;
            let drow = dx.row(i);
            dtok.row_mut(id as usize).zip_mut_with(&drow, |a, &d| *a = *a + d);
            dpos.row_mut(t).zip_mut_with(&drow, |a, &d| *a = *a + d);
        }
        grads.add2(format!("{prefix}.token_embed"), &dtok);
        grads.add2(format!("{prefix}.pos_embed"), &dpos);
    }

    pub fn visit(&self, prefix: &str, v: &mut impl Visit<F>) {
        v.leaf(
            &format!("{prefix}.token_embed"),
            &[self.token_embed.nrows(), self.token_embed.ncols()],
            self.token_embed.as_slice().expect("standard layout"),
        );
        v.leaf(
            &format!("{prefix}.pos_embed"),
            &[self.pos_embed.nrows(), self.pos_embed.ncols()],
            self.pos_embed.as_slice().expect("standard layout"),
        );
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.blocks.{i}"), v);
        }
        self.final_ln.visit(&format!("{prefix}.final_ln"), v);
        v.leaf(
            &format!("{prefix}.proj"),
            &[self.proj.nrows(), self.proj.ncols()],
            self.proj.as_slice().expect("standard layout"),
        );
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl VisitMut<F>) {
        let shape = [self.token_embed.nrows(), self.token_embed.ncols()];
        v.leaf(
            &format!("{prefix}.token_embed"),
            &shape,
            self.token_embed.as_slice_mut().expect("standard layout"),
        );
        let shape = [self.pos_embed.nrows(), self.pos_embed.ncols()];
        v.leaf(
            &format!("{prefix}.pos_embed"),
            &shape,
            self.pos_embed.as_slice_mut().expect("standard layout"),
        );
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.blocks.{i}"), v);
        }
        self.final_ln.visit_mut(&format!("{prefix}.final_ln"), v);
        let shape = [self.proj.nrows(), self.proj.ncols()];
        v.leaf(
            &format!("{prefix}.proj"),
            &shape,
            self.proj.as_slice_mut().expect("standard layout"),
        );
    }
}

// ---------------------------------------------------------------------------
// Image tower
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ImageTower<F> {
    pub config: ImageTowerConfig,
    /// `[3 * patch * patch, width]`, no bias (conv-style patch projection)
    pub patch_embed: Linear<F>,
    /// `[width]`
    pub class_token: Array1<F>,
    /// `[1 + grid^2, width]`; row 0 belongs to the class token
    pub pos_embed: Array2<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub final_ln: LayerNorm<F>,
    /// `[width, joint_dim]`, no bias
    pub proj: Array2<F>,
}

pub struct ImageActivations<F> {
    pub shape: SeqShape,
    /// Flattened patches `[B * grid^2, 3 * P * P]`.
    pub patches: Array2<F>,
    pub blocks: Vec<BlockCache<F>>,
    pub final_cache: LayerNormCache<F>,
    /// Class-token rows of the post-norm stream, `[B, width]`.
    pub pooled: Array2<F>,
    /// Projected features before normalization, `[B, joint_dim]`.
    pub feats: Array2<F>,
}

impl<F: Real> ImageTower<F> {
    pub fn init(config: ImageTowerConfig, joint_dim: usize, init: &mut Initializer<'_>) -> Self {
        let grid = patch_grid(&config.spec).expect("validated spec");
        let patch_dim = config.spec.patch_dim();
        let patch_embed = Linear::new(init.matrix(patch_dim, config.width, INIT_STD), None);
        let class_token = init.vector(config.width, INIT_STD);
        let pos_embed = init.matrix(grid.sequence_length, config.width, INIT_STD);
        let blocks = (0..config.layers)
            .map(|_| init_block(init, config.width, config.heads, config.layers))
            .collect();
        let final_ln = LayerNorm::new(config.width);
        let proj = init.matrix(config.width, joint_dim, INIT_STD);
        ImageTower {
            config,
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            final_ln,
            proj,
        }
    }

    pub fn sequence_length(&self) -> usize {
        self.pos_embed.nrows()
    }

    /// Flattens `[B, 3, R, R]` pixels into per-patch rows. Patch `p` at
    /// grid cell (py, px) is row `py * grid + px`; within a row, feature
    /// order is channel-major then scanline: `c * P^2 + dy * P + dx`.
    fn patchify(&self, batch: &ImageBatch<F>) -> Result<Array2<F>> {
        let spec = &self.config.spec;
        if batch.spec != *spec {
            return Err(Error::ResolutionMismatch {
                batch: batch.spec.resolution,
                encoder: spec.resolution,
            });
        }
        let grid = patch_grid(spec)?;
        let (b, p, g) = (batch.batch_size(), spec.patch_size, grid.patches_per_side);
        let mut out = Array2::zeros((b * grid.num_patches, spec.patch_dim()));
        for bi in 0..b {
            for py in 0..g {
                for px in 0..g {
                    let mut row = out.row_mut(bi * grid.num_patches + py * g + px);
                    for c in 0..3 {
                        for dy in 0..p {
                            for dx in 0..p {
                                row[c * p * p + dy * p + dx] =
                                    batch.pixels[[bi, c, py * p + dy, px * p + dx]];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Interleaves the class token ahead of each item's patch embeddings
    /// and adds positional embeddings, giving `[B * S, width]` rows.
    fn assemble(&self, patch_feats: &Array2<F>, batch_size: usize) -> Array2<F> {
        let seq = self.sequence_length();
        let num_patches = seq - 1;
        let mut x = Array2::zeros((batch_size * seq, self.config.width));
        for b in 0..batch_size {
            {
                let mut row = x.row_mut(b * seq);
                row.assign(&self.class_token);
                row.zip_mut_with(&self.pos_embed.row(0), |a, &p| *a = *a + p);
            }
            for t in 0..num_patches {
                let mut row = x.row_mut(b * seq + 1 + t);
                row.assign(&patch_feats.row(b * num_patches + t));
                row.zip_mut_with(&self.pos_embed.row(1 + t), |a, &p| *a = *a + p);
            }
        }
        x
    }

    pub fn forward(&self, batch: &ImageBatch<F>) -> Result<(Array2<F>, ImageActivations<F>)> {
        let patches = self.patchify(batch)?;
        let patch_feats = self.patch_embed.forward(&patches);
        let shape = SeqShape {
            batch: batch.batch_size(),
            seq: self.sequence_length(),
        };
        let mut x = self.assemble(&patch_feats, shape.batch);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, shape, false);
            x = next;
            caches.push(cache);
        }
        let (x, final_cache) = self.final_ln.forward(&x);
        let mut pooled = Array2::zeros((shape.batch, self.config.width));
        for b in 0..shape.batch {
            pooled.row_mut(b).assign(&x.row(b * shape.seq));
        }
        let feats = pooled.dot(&self.proj);
        require_finite("image features", &feats)?;
        Ok((
            feats.clone(),
            ImageActivations {
                shape,
                patches,
                blocks: caches,
                final_cache,
                pooled,
                feats,
            },
        ))
    }

    pub fn infer(&self, batch: &ImageBatch<F>) -> Result<Array2<F>> {
        let patches = self.patchify(batch)?;
        let patch_feats = self.patch_embed.forward(&patches);
        let shape = SeqShape {
            batch: batch.batch_size(),
            seq: self.sequence_length(),
        };
        let mut x = self.assemble(&patch_feats, shape.batch);
        for block in &self.blocks {
            x = block.forward_infer(&x, shape, false);
        }
        let (x, _) = self.final_ln.forward(&x);
        let mut pooled = Array2::zeros((shape.batch, self.config.width));
        for b in 0..shape.batch {
            pooled.row_mut(b).assign(&x.row(b * shape.seq));
        }
        let feats = pooled.dot(&self.proj);
        require_finite("image features", &feats)?;
        Ok(feats)
    }

    pub fn backward(
        &self,
        acts: &ImageActivations<F>,
        dfeats: &Array2<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) {
        let shape = acts.shape;
        grads.add2(format!("{prefix}.proj"), &acts.pooled.t().dot(dfeats));
        let dpooled = dfeats.dot(&self.proj.t());

        let mut dx = Array2::zeros((shape.rows(), self.config.width));
        for b in 0..shape.batch {
            dx.row_mut(b * shape.seq).assign(&dpooled.row(b));
        }
        let mut dx = self
            .final_ln
            .backward(&acts.final_cache, &dx, &format!("{prefix}.final_ln"), grads);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(
                &acts.blocks[i],
                &dx,
                shape,
                &format!("{prefix}.blocks.{i}"),
                grads,
            );
        }

        // Split the embedded-stream gradient into class-token rows,
        // positional rows, and patch-projection rows.
        let seq = shape.seq;
        let num_patches = seq - 1;
        let mut dclass = Array1::zeros(self.config.width);
        let mut dpos = Array2::zeros(self.pos_embed.dim());
        let mut dpatch_feats = Array2::zeros((shape.batch * num_patches, self.config.width));
        for b in 0..shape.batch {
            let drow = dx.row(b * seq);
            dclass.zip_mut_with(&drow, |a, &d| *a = *a + d);
            dpos.row_mut(0).zip_mut_with(&drow, |a, &d| *a = *a + d);
            for t in 0..num_patches {
                let drow = dx.row(b * seq + 1 + t);
                dpos.row_mut(1 + t).zip_mut_with(&drow, |a, &d| *a = *a + d);
                dpatch_feats.row_mut(b * num_patches + t).assign(&drow);
            }
        }
        grads.add(
            format!("{prefix}.class_token"),
            &[self.class_token.len()],
            dclass.as_slice().expect("contiguous"),
        );
        grads.add2(format!("{prefix}.pos_embed"), &dpos);
        self.patch_embed.backward(
            &acts.patches,
            &dpatch_feats,
            &format!("{prefix}.patch_embed"),
            grads,
        );
    }

    /// Resamples the positional grid for a new input resolution. The
    /// class-token row is untouched; each width dimension's grid is
    /// resized bicubically. Identical specs return bitwise-unchanged
    /// weights.
    pub fn interpolate_pos_embeddings(&mut self, new_spec: ImageSpec) -> Result<()> {
        if new_spec.patch_size != self.config.spec.patch_size {
            return Err(Error::PatchSizeMismatch {
                old: self.config.spec.patch_size,
                new: new_spec.patch_size,
            });
        }
        if new_spec == self.config.spec {
            return Ok(());
        }
        let old_grid = patch_grid(&self.config.spec)?;
        let new_grid = patch_grid(&new_spec)?;
        let (og, ng) = (old_grid.patches_per_side, new_grid.patches_per_side);
        let width = self.config.width;

        let mut next = Array2::zeros((new_grid.sequence_length, width));
        next.row_mut(0).assign(&self.pos_embed.row(0));
        for w in 0..width {
            let plane =
                Array2::from_shape_fn((og, og), |(y, x)| self.pos_embed[[1 + y * og + x, w]].as_f64());
            let resized = bicubic_resize_plane(&plane.view(), ng, ng);
            for y in 0..ng {
                for x in 0..ng {
                    next[[1 + y * ng + x, w]] = real(resized[[y, x]]);
                }
            }
        }
        self.pos_embed = next;
        self.config.spec = new_spec;
        Ok(())
    }

    pub fn visit(&self, prefix: &str, v: &mut impl Visit<F>) {
        self.patch_embed.visit(&format!("{prefix}.patch_embed"), v);
        v.leaf(
            &format!("{prefix}.class_token"),
            &[self.class_token.len()],
            self.class_token.as_slice().expect("contiguous"),
        );
        v.leaf(
            &format!("{prefix}.pos_embed"),
            &[self.pos_embed.nrows(), self.pos_embed.ncols()],
            self.pos_embed.as_slice().expect("standard layout"),
        );
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.blocks.{i}"), v);
        }
        self.final_ln.visit(&format!("{prefix}.final_ln"), v);
        v.leaf(
            &format!("{prefix}.proj"),
            &[self.proj.nrows(), self.proj.ncols()],
            self.proj.as_slice().expect("standard layout"),
        );
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl VisitMut<F>) {
        self.patch_embed.visit_mut(&format!("{prefix}.patch_embed"), v);
        let len = self.class_token.len();
        v.leaf(
            &format!("{prefix}.class_token"),
            &[len],
            self.class_token.as_slice_mut().expect("contiguous"),
        );
        let shape = [self.pos_embed.nrows(), self.pos_embed.ncols()];
        v.leaf(
            &format!("{prefix}.pos_embed"),
            &shape,
            self.pos_embed.as_slice_mut().expect("standard layout"),
        );
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.blocks.{i}"), v);
        }
        self.final_ln.visit_mut(&format!("{prefix}.final_ln"), v);
        let shape = [self.proj.nrows(), self.proj.ncols()];
        v.leaf(
            &format!("{prefix}.proj"),
            &shape,
            self.proj.as_slice_mut().expect("standard layout"),
        );
    }
}

// ---------------------------------------------------------------------------
// Adapter and the combined dual encoder
// ---------------------------------------------------------------------------

/// Two joint-to-joint linear layers inserted after the image projection
/// and before the final normalization. Identity-initialized so a fresh
/// adapter reproduces the backbone's embeddings exactly.
#[derive(Debug, Clone)]
pub struct Adapter<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct AdapterCache<F> {
    pub x: Array2<F>,
    pub mid: Array2<F>,
}

impl<F: Real> Adapter<F> {
    pub fn identity(joint_dim: usize) -> Self {
        let eye = || Array2::from_shape_fn((joint_dim, joint_dim), |(i, j)| {
            if i == j {
                F::one()
            } else {
                F::zero()
            }
        });
        Adapter {
            fc1: Linear::new(eye(), Some(Array1::zeros(joint_dim))),
            fc2: Linear::new(eye(), Some(Array1::zeros(joint_dim))),
        }
    }

    pub fn param_count(&self) -> usize {
        let count = |l: &Linear<F>| l.weight.len() + l.bias.as_ref().map_or(0, |b| b.len());
        count(&self.fc1) + count(&self.fc2)
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, AdapterCache<F>) {
        let mid = self.fc1.forward(x);
        let y = self.fc2.forward(&mid);
        (
            y,
            AdapterCache {
                x: x.clone(),
                mid,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AdapterCache<F>,
        dy: &Array2<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
    ) -> Array2<F> {
        let dmid = self.fc2.backward(&cache.mid, dy, &format!("{prefix}.fc2"), grads);
        self.fc1.backward(&cache.x, &dmid, &format!("{prefix}.fc1"), grads)
    }

    pub fn visit(&self, prefix: &str, v: &mut impl Visit<F>) {
        self.fc1.visit(&format!("{prefix}.fc1"), v);
        self.fc2.visit(&format!("{prefix}.fc2"), v);
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut impl VisitMut<F>) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), v);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), v);
    }
}

/// Forward state of a full training step, both towers plus head pieces.
pub struct TrainActivations<F> {
    pub text: TextActivations<F>,
    pub image: ImageActivations<F>,
    pub adapter: Option<AdapterCache<F>>,
    /// Image-head features entering the final normalization.
    pub image_pre_norm: Array2<F>,
    pub text_norms: Array1<F>,
    pub image_norms: Array1<F>,
    pub text_emb: Array2<F>,
    pub image_emb: Array2<F>,
}

/// The complete model: both towers, the learnable logit scale, and the
/// optional frozen-regime adapter.
#[derive(Debug, Clone)]
pub struct DualEncoder<F> {
    pub config: ModelConfig,
    pub text: TextTower<F>,
    pub image: ImageTower<F>,
    /// Length-1 tensor named `logit_scale`; similarity multiplier is its exp.
    pub log_scale: Array1<F>,
    pub adapter: Option<Adapter<F>>,
}

impl<F: Real> DualEncoder<F> {
    /// Deterministic initialization: the draw order is text tower, image
    /// tower, then fixed-value scalars, all from one seeded stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut init = Initializer::new(&mut rng);
        let text = TextTower::init(config.text.clone(), config.joint_dim, &mut init);
        let image = ImageTower::init(config.image.clone(), config.joint_dim, &mut init);
        let log_scale = Array1::from_vec(vec![real(LOG_SCALE_INIT)]);
        let adapter = config.adapter.then(|| Adapter::identity(config.joint_dim));
        Ok(DualEncoder {
            config,
            text,
            image,
            log_scale,
            adapter,
        })
    }

    /// Builds the model skeleton with zeroed weights; used by the loader.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        struct Zero;
        impl<F: Real> VisitMut<F> for Zero {
            fn leaf(&mut self, _n: &str, _s: &[usize], data: &mut [F]) {
                data.fill(F::zero());
            }
        }
        model.visit_mut(&mut Zero);
        Ok(model)
    }

    pub fn scale(&self) -> F {
        self.log_scale[0].exp()
    }

    pub fn encode_text(&self, batch: &TokenBatch) -> Result<EmbeddingMatrix<F>> {
        let feats = self.text.infer(batch)?;
        let (emb, _) = l2_normalize_rows(&feats);
        EmbeddingMatrix::normalized(emb)
    }

    pub fn encode_image(&self, batch: &ImageBatch<F>) -> Result<EmbeddingMatrix<F>> {
        let mut feats = self.image.infer(batch)?;
        if let Some(adapter) = &self.adapter {
            let (adapted, _) = adapter.forward(&feats);
            feats = adapted;
        }
        require_finite("image features", &feats)?;
        let (emb, _) = l2_normalize_rows(&feats);
        EmbeddingMatrix::normalized(emb)
    }

    /// Training forward: normalized embeddings for both sides plus every
    /// cache the backward pass needs.
    pub fn forward_train(
        &self,
        images: &ImageBatch<F>,
        tokens: &TokenBatch,
    ) -> Result<TrainActivations<F>> {
        if images.batch_size() != tokens.ids.nrows() {
            return Err(Error::RowCountMismatch {
                left: images.batch_size(),
                right: tokens.ids.nrows(),
            });
        }
        let (text_feats, text_acts) = self.text.forward(tokens)?;
        let (image_feats, image_acts) = self.image.forward(images)?;
        let (image_pre_norm, adapter_cache) = match &self.adapter {
            Some(adapter) => {
                let (y, cache) = adapter.forward(&image_feats);
                (y, Some(cache))
            }
            None => (image_feats, None),
        };
        let (text_emb, text_norms) = l2_normalize_rows(&text_feats);
        let (image_emb, image_norms) = l2_normalize_rows(&image_pre_norm);
        Ok(TrainActivations {
            text: text_acts,
            image: image_acts,
            adapter: adapter_cache,
            image_pre_norm,
            text_norms,
            image_norms,
            text_emb,
            image_emb,
        })
    }

    /// Backward from embedding-space gradients. `trainable` gates which
    /// subtrees receive gradients; frozen subtrees are skipped entirely,
    /// so their gradient norms are exactly zero.
    pub fn backward_train(
        &self,
        acts: &TrainActivations<F>,
        d_image_emb: &Array2<F>,
        d_text_emb: &Array2<F>,
        trainable: &Trainable,
        grads: &mut GradStore<F>,
    ) {
        if trainable.text {
            let d_text_feats =
                l2_normalize_rows_backward(&acts.text_emb, &acts.text_norms, d_text_emb);
            self.text.backward(&acts.text, &d_text_feats, "text", grads);
        }
        if trainable.image || trainable.adapter {
            let mut d_image =
                l2_normalize_rows_backward(&acts.image_emb, &acts.image_norms, d_image_emb);
            if let Some(adapter) = &self.adapter {
                let cache = acts.adapter.as_ref().expect("adapter cache present");
                let d_backbone = adapter.backward(cache, &d_image, "adapter", grads);
                if !trainable.adapter {
                    grads.zero_out("adapter.fc1.weight");
                    grads.zero_out("adapter.fc1.bias");
                    grads.zero_out("adapter.fc2.weight");
                    grads.zero_out("adapter.fc2.bias");
                }
                d_image = d_backbone;
            }
            if trainable.image {
                self.image.backward(&acts.image, &d_image, "image", grads);
            }
        }
    }

    pub fn visit(&self, v: &mut impl Visit<F>) {
        self.text.visit("text", v);
        self.image.visit("image", v);
        v.leaf(
            "logit_scale",
            &[1],
            self.log_scale.as_slice().expect("contiguous"),
        );
        if let Some(adapter) = &self.adapter {
            adapter.visit("adapter", v);
        }
    }

    pub fn visit_mut(&mut self, v: &mut impl VisitMut<F>) {
        self.text.visit_mut("text", v);
        self.image.visit_mut("image", v);
        v.leaf(
            "logit_scale",
            &[1],
            self.log_scale.as_slice_mut().expect("contiguous"),
        );
        if let Some(adapter) = &mut self.adapter {
            adapter.visit_mut("adapter", v);
        }
    }

    /// Attaches an identity adapter to the image head (no-op when one is
    /// already present).
    pub fn attach_adapter(&mut self) {
        if self.adapter.is_none() {
            self.adapter = Some(Adapter::identity(self.config.joint_dim));
            self.config.adapter = true;
        }
    }

    pub fn interpolate_pos_embeddings(&mut self, new_spec: ImageSpec) -> Result<()> {
        self.image.interpolate_pos_embeddings(new_spec.clone())?;
        self.config.image.spec = new_spec;
        Ok(())
    }

    /// Casts every parameter to a different float width, preserving the
    /// visit order. f32→f64 is exact; f64→f32 rounds to nearest.
    pub fn cast<G: Real>(&self) -> DualEncoder<G> {
        struct Collect<F>(Vec<(String, Vec<usize>, Vec<F>)>);
        impl<F: Real> Visit<F> for Collect<F> {
            fn leaf(&mut self, name: &str, shape: &[usize], data: &[F]) {
                self.0.push((name.into(), shape.to_vec(), data.to_vec()));
            }
        }
        let mut collect = Collect(Vec::new());
        self.visit(&mut collect);

        let mut target = DualEncoder::<G>::zeroed(self.config.clone()).expect("same config");
        struct Fill<F> {
            tensors: std::collections::HashMap<String, Vec<F>>,
        }
        impl<F: Real, G: Real> VisitMut<G> for Fill<F> {
            fn leaf(&mut self, name: &str, _shape: &[usize], data: &mut [G]) {
                let src = self.tensors.get(name).expect("same skeleton");
                for (d, s) in data.iter_mut().zip(src) {
                    *d = G::of_f64(s.as_f64());
                }
            }
        }
        let mut fill = Fill {
            tensors: collect
                .0
                .into_iter()
                .map(|(n, _, d)| (n, d))
                .collect(),
        };
        target.visit_mut(&mut fill);
        target
    }

    /// Total parameter count across all visited tensors.
    pub fn param_count(&self) -> usize {
        struct Count(usize);
        impl<F: Real> Visit<F> for Count {
            fn leaf(&mut self, _n: &str, _s: &[usize], data: &[F]) {
                self.0 += data.len();
            }
        }
        let mut count = Count(0);
        self.visit(&mut count);
        count.0
    }
}

/// Which parameter subtrees receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub text: bool,
    pub image: bool,
    pub logit_scale: bool,
    pub adapter: bool,
}

impl Trainable {
    pub fn all() -> Self {
        Trainable {
            text: true,
            image: true,
            logit_scale: true,
            adapter: true,
        }
    }

    /// The frozen-backbone regime: only the adapter learns.
    pub fn adapter_only() -> Self {
        Trainable {
            text: false,
            image: false,
            logit_scale: false,
            adapter: true,
        }
    }

    pub fn includes(&self, name: &str) -> bool {
        if name.starts_with("text.") {
            self.text
        } else if name.starts_with("image.") {
            self.image
        } else if name == "logit_scale" {
            self.logit_scale
        } else if name.starts_with("adapter.") {
            self.adapter
        } else {
            false
        }
    }
}

/// The fixed test-scale configuration: context 16, two layers per tower,
/// width 64, two heads, 32 px resolution with 8 px patches, joint dim 64.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        text: TextTowerConfig {
            context_length: 16,
            layers: 2,
            width: 64,
            heads: 2,
            vocab_size: 512,
        },
        image: ImageTowerConfig {
            spec: ImageSpec::new(32, 8).expect("divisible"),
            layers: 2,
            width: 64,
            heads: 2,
        },
        joint_dim: 64,
        preset_name: "tiny".into(),
        adapter: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_vocab, TokenBatch};
    use crate::vision::ImageBatch;
    use ndarray::{s, Array4};
    use rand::Rng;

    fn tiny_model(seed: u64) -> DualEncoder<f32> {
        DualEncoder::init(tiny_config(), seed).unwrap()
    }

    fn tokens(texts: &[&str]) -> TokenBatch {
        let vocab = build_vocab(&["собака кошка птица рыба dog cat bird fish"], 300).unwrap();
        TokenBatch::encode(texts, &vocab, 16).unwrap()
    }

    fn images(batch: usize, seed: u64) -> ImageBatch<f32> {
        let mut rng = seeded_rng(seed);
        let pixels = Array4::from_shape_fn((batch, 3, 32, 32), |_| rng.gen_range(-1.0..1.0f32));
        ImageBatch::from_pixels(pixels, ImageSpec::new(32, 8).unwrap())
    }

    #[test]
    fn text_embeddings_are_unit_norm_and_deterministic() {
        let model = tiny_model(1);
        let batch = tokens(&["собака", "кошка", "собака"]);
        let a = model.encode_text(&batch).unwrap();
        let b = model.encode_text(&batch).unwrap();
        assert_eq!(a.vectors, b.vectors, "bitwise determinism");
        assert_eq!(a.vectors.row(0), a.vectors.row(2), "identical rows");
        a.require_normalized().unwrap();
    }

    #[test]
    fn image_embeddings_are_unit_norm_with_right_shape() {
        let model = tiny_model(2);
        let batch = images(3, 20);
        let emb = model.encode_image(&batch).unwrap();
        assert_eq!(emb.vectors.dim(), (3, 64));
        emb.require_normalized().unwrap();
    }

    #[test]
    fn permuting_image_batch_permutes_rows() {
        let model = tiny_model(3);
        let batch = images(3, 21);
        let emb = model.encode_image(&batch).unwrap();

        let mut permuted = batch.pixels.clone();
        permuted
            .slice_mut(s![0, .., .., ..])
            .assign(&batch.pixels.slice(s![2, .., .., ..]));
        permuted
            .slice_mut(s![2, .., .., ..])
            .assign(&batch.pixels.slice(s![0, .., .., ..]));
        let emb2 = model
            .encode_image(&ImageBatch::from_pixels(permuted, batch.spec.clone()))
            .unwrap();
        assert_eq!(emb.vectors.row(0), emb2.vectors.row(2));
        assert_eq!(emb.vectors.row(2), emb2.vectors.row(0));
        assert_eq!(emb.vectors.row(1), emb2.vectors.row(1));
    }

    #[test]
    fn padding_and_future_tokens_do_not_leak() {
        let model = tiny_model(4);
        let vocab = build_vocab(&["собака кошка птица"], 300).unwrap();
        // Same leading text; the second row carries extra tokens after
        // position 3's EOT would sit in row one.
        let short = TokenBatch::encode(&["собака"], &vocab, 16).unwrap();
        let mut padded = short.clone();
        // Scribble over pad positions beyond EOT: row 0 length L means
        // ids[L..] are pads; replace them with arbitrary valid ids.
        let len = padded.lengths[0];
        for t in len..16 {
            padded.ids[[0, t]] = 42;
        }
        let a = model.encode_text(&short).unwrap();
        let b = model.encode_text(&padded).unwrap();
        assert_eq!(a.vectors, b.vectors, "causal mask + EOT pooling");
    }

    #[test]
    fn out_of_range_token_id_is_rejected() {
        let model = tiny_model(5);
        let mut batch = tokens(&["собака"]);
        batch.ids[[0, 1]] = 511; // valid
        assert!(model.encode_text(&batch).is_ok());
        batch.ids[[0, 1]] = 512; // one past vocab_size
        assert!(matches!(
            model.encode_text(&batch),
            Err(Error::TokenIdOutOfRange { id: 512, .. })
        ));
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let model = tiny_model(6);
        let mut rng = seeded_rng(22);
        let pixels = Array4::from_shape_fn((1, 3, 64, 64), |_| rng.gen_range(-1.0..1.0f32));
        let batch = ImageBatch::from_pixels(pixels, ImageSpec::new(64, 8).unwrap());
        assert!(matches!(
            model.encode_image(&batch),
            Err(Error::ResolutionMismatch { batch: 64, encoder: 32 })
        ));
    }

    #[test]
    fn identity_adapter_reproduces_backbone_embeddings() {
        let mut model = tiny_model(7);
        let batch = images(4, 23);
        let plain = model.encode_image(&batch).unwrap();
        model.attach_adapter();
        let adapted = model.encode_image(&batch).unwrap();
        assert_eq!(plain.vectors, adapted.vectors, "identity init is exact");
        assert_eq!(model.adapter.as_ref().unwrap().param_count(), 2 * (64 * 64 + 64));
    }

    #[test]
    fn interpolation_identity_at_unchanged_spec() {
        let mut model = tiny_model(8);
        let before = model.image.pos_embed.clone();
        model
            .interpolate_pos_embeddings(ImageSpec::new(32, 8).unwrap())
            .unwrap();
        assert_eq!(model.image.pos_embed, before, "bitwise unchanged");
    }

    #[test]
    fn interpolation_resizes_grid_and_keeps_class_row() {
        let mut model = tiny_model(9);
        let before = model.image.pos_embed.clone();
        model
            .interpolate_pos_embeddings(ImageSpec::new(64, 8).unwrap())
            .unwrap();
        // 32/8 = 4 -> 17 rows; 64/8 = 8 -> 65 rows.
        assert_eq!(model.image.pos_embed.nrows(), 65);
        assert_eq!(model.image.pos_embed.row(0), before.row(0));
        // A constant grid stays constant under interpolation.
        let mut flat = tiny_model(10);
        flat.image.pos_embed.slice_mut(s![1.., ..]).fill(0.25);
        flat.interpolate_pos_embeddings(ImageSpec::new(64, 8).unwrap())
            .unwrap();
        for v in flat.image.pos_embed.slice(s![1.., ..]).iter() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn interpolation_rejects_patch_size_change() {
        let mut model = tiny_model(11);
        assert!(matches!(
            model.interpolate_pos_embeddings(ImageSpec::new(64, 16).unwrap()),
            Err(Error::PatchSizeMismatch { old: 8, new: 16 })
        ));
    }

    #[test]
    fn visit_and_visit_mut_agree_on_names() {
        struct Names(Vec<String>);
        impl Visit<f32> for Names {
            fn leaf(&mut self, n: &str, _s: &[usize], _d: &[f32]) {
                self.0.push(n.into());
            }
        }
        struct NamesMut(Vec<String>);
        impl VisitMut<f32> for NamesMut {
            fn leaf(&mut self, n: &str, _s: &[usize], _d: &mut [f32]) {
                self.0.push(n.into());
            }
        }
        let mut model = tiny_model(12);
        model.attach_adapter();
        let mut a = Names(Vec::new());
        model.visit(&mut a);
        let mut b = NamesMut(Vec::new());
        model.visit_mut(&mut b);
        assert_eq!(a.0, b.0);
        assert!(a.0.contains(&"logit_scale".to_string()));
        assert!(a.0.contains(&"text.blocks.1.attn.wo.weight".to_string()));
        assert!(a.0.contains(&"image.patch_embed.weight".to_string()));
        assert!(a.0.contains(&"adapter.fc2.bias".to_string()));
        // No duplicate names: they key the checkpoint index.
        let mut sorted = a.0.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), a.0.len());
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32_weights() {
        let model = tiny_model(13);
        let double: DualEncoder<f64> = model.cast();
        let back: DualEncoder<f32> = double.cast();
        let batch = tokens(&["кошка"]);
        assert_eq!(
            model.encode_text(&batch).unwrap().vectors,
            back.encode_text(&batch).unwrap().vectors
        );
    }

    #[test]
    fn unnormalized_matrix_is_rejected() {
        let m = EmbeddingMatrix::normalized(Array2::from_shape_vec((1, 2), vec![3.0f32, 4.0]).unwrap());
        assert!(matches!(m, Err(Error::NotNormalized { row: 0, .. })));
    }
}

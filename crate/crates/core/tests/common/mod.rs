//! Straight-line scalar reference implementation of both towers.
//!
//! Everything here is nested loops over f64 scalars: no matrix library,
//! no shared kernels with the crate under test. It reads the model's
//! weight tensors directly and recomputes the forward pass from the
//! block equations, giving an independent oracle for the vectorized
//! implementation.

// Shared by several test binaries; each uses a different subset.
#![allow(dead_code)]

use duoclip_core::encoders::{tiny_config, DualEncoder};
use duoclip_core::tokenizer::{build_vocab, TokenBatch, Vocab};
use duoclip_core::vision::{patch_grid, ImageBatch, ImageSpec};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const LN_EPS: f64 = 1e-5;

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| gamma[i] * (v - mean) * rstd + beta[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// y[r] = x[r] . W + b, scalar loops.
fn linear(x: &[Vec<f64>], w: &ndarray::Array2<f64>, b: Option<&ndarray::Array1<f64>>) -> Vec<Vec<f64>> {
    let (din, dout) = (w.nrows(), w.ncols());
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|j| {
                    let mut acc = match b {
                        Some(bias) => bias[j],
                        None => 0.0,
                    };
                    for i in 0..din {
                        acc += row[i] * w[[i, j]];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// One pre-norm block over a single item's sequence of width-dim rows.
fn block(
    b: &duoclip_core::nn::TransformerBlock<f64>,
    x: &[Vec<f64>],
    heads: usize,
    causal: bool,
) -> Vec<Vec<f64>> {
    let seq = x.len();
    let width = x[0].len();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Attention branch on ln1(x).
    let x1: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            layer_norm(
                row,
                b.ln1.gamma.as_slice().unwrap(),
                b.ln1.beta.as_slice().unwrap(),
            )
        })
        .collect();
    let q = linear(&x1, &b.attn.wq.weight, b.attn.wq.bias.as_ref());
    let k = linear(&x1, &b.attn.wk.weight, b.attn.wk.bias.as_ref());
    let v = linear(&x1, &b.attn.wv.weight, b.attn.wv.bias.as_ref());

    let mut ctx = vec![vec![0.0; width]; seq];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..seq {
            let limit = if causal { i + 1 } else { seq };
            let mut scores = vec![f64::NEG_INFINITY; seq];
            for j in 0..limit {
                let mut dot = 0.0;
                for d in 0..dh {
                    dot += q[i][off + d] * k[j][off + d];
                }
                scores[j] = dot * scale;
            }
            softmax(&mut scores);
            for j in 0..limit {
                for d in 0..dh {
                    ctx[i][off + d] += scores[j] * v[j][off + d];
                }
            }
        }
    }
    let attn_out = linear(&ctx, &b.attn.wo.weight, b.attn.wo.bias.as_ref());
    let y: Vec<Vec<f64>> = x
        .iter()
        .zip(&attn_out)
        .map(|(a, d)| a.iter().zip(d).map(|(p, q)| p + q).collect())
        .collect();

    // MLP branch on ln2(y).
    let y1: Vec<Vec<f64>> = y
        .iter()
        .map(|row| {
            layer_norm(
                row,
                b.ln2.gamma.as_slice().unwrap(),
                b.ln2.beta.as_slice().unwrap(),
            )
        })
        .collect();
    let hidden = linear(&y1, &b.mlp.fc.weight, b.mlp.fc.bias.as_ref());
    let act: Vec<Vec<f64>> = hidden
        .iter()
        .map(|row| row.iter().map(|&v| gelu(v)).collect())
        .collect();
    let mlp_out = linear(&act, &b.mlp.proj.weight, b.mlp.proj.bias.as_ref());
    y.iter()
        .zip(&mlp_out)
        .map(|(a, d)| a.iter().zip(d).map(|(p, q)| p + q).collect())
        .collect()
}

fn project_and_normalize(pooled: &[f64], proj: &ndarray::Array2<f64>) -> Vec<f64> {
    let joint = proj.ncols();
    let mut out = vec![0.0; joint];
    for j in 0..joint {
        for i in 0..pooled.len() {
            out[j] += pooled[i] * proj[[i, j]];
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut out {
        *v /= norm;
    }
    out
}

/// Scalar-loop text tower: embeddings for every batch row.
pub fn scalar_text_embeddings(model: &DualEncoder<f64>, batch: &TokenBatch) -> Vec<Vec<f64>> {
    let tower = &model.text;
    let cfg = &tower.config;
    let mut out = Vec::new();
    for (row_idx, ids) in batch.ids.outer_iter().enumerate() {
        let mut x: Vec<Vec<f64>> = Vec::with_capacity(cfg.context_length);
        for (t, &id) in ids.iter().enumerate() {
            let row: Vec<f64> = (0..cfg.width)
                .map(|w| tower.token_embed[[id as usize, w]] + tower.pos_embed[[t, w]])
                .collect();
            x.push(row);
        }
        for blk in &tower.blocks {
            x = block(blk, &x, cfg.heads, true);
        }
        let eot = batch.lengths[row_idx] - 1;
        let pooled = layer_norm(
            &x[eot],
            tower.final_ln.gamma.as_slice().unwrap(),
            tower.final_ln.beta.as_slice().unwrap(),
        );
        out.push(project_and_normalize(&pooled, &tower.proj));
    }
    out
}

/// Scalar-loop image tower: embeddings for every batch item.
pub fn scalar_image_embeddings(model: &DualEncoder<f64>, batch: &ImageBatch<f64>) -> Vec<Vec<f64>> {
    let tower = &model.image;
    let cfg = &tower.config;
    let spec = &cfg.spec;
    let grid = patch_grid(spec).unwrap();
    let (g, p) = (grid.patches_per_side, spec.patch_size);
    let mut out = Vec::new();
    for b in 0..batch.batch_size() {
        // Class token plus one row per patch, positional added everywhere.
        let mut x: Vec<Vec<f64>> = Vec::with_capacity(grid.sequence_length);
        x.push(
            (0..cfg.width)
                .map(|w| tower.class_token[w] + tower.pos_embed[[0, w]])
                .collect(),
        );
        for py in 0..g {
            for px in 0..g {
                let mut patch = vec![0.0; spec.patch_dim()];
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            patch[c * p * p + dy * p + dx] =
                                batch.pixels[[b, c, py * p + dy, px * p + dx]];
                        }
                    }
                }
                let mut row = vec![0.0; cfg.width];
                for (w, r) in row.iter_mut().enumerate() {
                    for (i, &v) in patch.iter().enumerate() {
                        *r += v * tower.patch_embed.weight[[i, w]];
                    }
                }
                let pos_row = 1 + py * g + px;
                for (w, r) in row.iter_mut().enumerate() {
                    *r += tower.pos_embed[[pos_row, w]];
                }
                x.push(row);
            }
        }
        for blk in &tower.blocks {
            x = block(blk, &x, cfg.heads, false);
        }
        let pooled = layer_norm(
            &x[0],
            tower.final_ln.gamma.as_slice().unwrap(),
            tower.final_ln.beta.as_slice().unwrap(),
        );
        out.push(project_and_normalize(&pooled, &tower.proj));
    }
    out
}

/// Tiny f64 model used by the oracle and gradient-check suites.
pub fn tiny_model(seed: u64) -> DualEncoder<f64> {
    DualEncoder::init(tiny_config(), seed).unwrap()
}

/// Vocab trained on a small bilingual caption corpus.
pub fn fixture_vocab() -> Vocab {
    let corpus = [
        "рыжий кот спит на подоконнике",
        "собака бежит по снегу",
        "чашка кофе на деревянном столе",
        "a striped cat sleeps in the sun",
        "two dogs play near the river",
        "домик у озера ранним утром",
    ];
    build_vocab(&corpus, 300).unwrap()
}

pub fn fixture_tokens(vocab: &Vocab, texts: &[&str], context_length: usize) -> TokenBatch {
    TokenBatch::encode(texts, vocab, context_length).unwrap()
}

/// Random pixel tensor shaped like preprocessed images (values already standardized).
pub fn random_images(spec: ImageSpec, n: usize, seed: u64) -> ImageBatch<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let r = spec.resolution;
    let pixels = Array4::from_shape_simple_fn((n, 3, r, r), || rng.gen_range(-1.5..1.5));
    ImageBatch::from_pixels(pixels, spec)
}

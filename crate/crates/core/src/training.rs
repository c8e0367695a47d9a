//! Symmetric contrastive training: similarity matrix, the two-direction
//! cross-entropy objective, warmup+cosine learning-rate schedule, a
//! decoupled-weight-decay adaptive optimizer, and the step loop with its
//! fine-tuning and frozen-adapter entry points.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{DualEncoder, EmbeddingMatrix, Trainable};
use crate::error::{Error, Result};
use crate::float::{real, Real};
use crate::nn::GradStore;
use crate::tokenizer::TokenBatch;
use crate::util::seeded_rng;
use crate::vision::{ImageBatch, ImageSpec};

/// Learnable logit multiplier, stored as its logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature<F> {
    pub log_scale: F,
}

impl<F: Real> Temperature<F> {
    pub fn from_scale(scale: f64) -> Self {
        Temperature {
            log_scale: real(scale.ln()),
        }
    }

    pub fn scale(&self) -> F {
        self.log_scale.exp()
    }

    /// Keeps the multiplier within (0, max_scale].
    pub fn clamp(&mut self, max_scale: f64) {
        let cap: F = real(max_scale.ln());
        if self.log_scale > cap {
            self.log_scale = cap;
        }
    }
}

/// `S[i][j] = exp(log_scale) * <img_i, txt_j>`. Both inputs must be
/// unit-norm and have the same number of rows.
pub fn similarity_matrix<F: Real>(
    img: &EmbeddingMatrix<F>,
    txt: &EmbeddingMatrix<F>,
    temp: Temperature<F>,
) -> Result<Array2<F>> {
    img.require_normalized()?;
    txt.require_normalized()?;
    if img.len() != txt.len() {
        return Err(Error::RowCountMismatch {
            left: img.len(),
            right: txt.len(),
        });
    }
    if img.dim() != txt.dim() {
        return Err(Error::DimMismatch {
            left: img.dim(),
            right: txt.dim(),
        });
    }
    let mut s = img.vectors.dot(&txt.vectors.t());
    let scale = temp.scale();
    s.map_inplace(|v| *v = *v * scale);
    Ok(s)
}

fn row_softmax_and_lse<F: Real>(s: &Array2<F>) -> (Array2<F>, Vec<F>) {
    let mut probs = s.clone();
    let mut lse = Vec::with_capacity(s.nrows());
    for mut row in probs.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
        lse.push(max + sum.ln());
    }
    (probs, lse)
}

/// Symmetric contrastive objective over a square similarity matrix with
/// matched pairs on the diagonal. Returns the loss and its gradient wrt
/// every entry of `S`:
/// `dS = [(P_row - I) + (P_col - I)] / (2n)`.
pub fn contrastive_loss<F: Real>(s: &Array2<F>) -> Result<(F, Array2<F>)> {
    let n = s.nrows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if s.ncols() != n {
        return Err(Error::RowCountMismatch {
            left: n,
            right: s.ncols(),
        });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "similarity matrix",
            step: None,
        });
    }

    let nf: F = real(n as f64);
    let (p_row, lse_row) = row_softmax_and_lse(s);
    let st = s.t().to_owned();
    let (p_col_t, lse_col) = row_softmax_and_lse(&st);

    let mut loss = F::zero();
    for i in 0..n {
        loss = loss + (lse_row[i] - s[[i, i]]) + (lse_col[i] - s[[i, i]]);
    }
    loss = loss / (real::<F>(2.0) * nf);

    let mut grad = &p_row + &p_col_t.t();
    let two_n = real::<F>(2.0) * nf;
    for i in 0..n {
        grad[[i, i]] = grad[[i, i]] - real::<F>(2.0);
    }
    grad.map_inplace(|v| *v = *v / two_n);
    Ok((loss, grad))
}

/// Linear warmup to `peak_lr` over `warmup_steps`, then cosine decay to
/// zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total_steps: cfg.total_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FromScratch,
    Finetune,
    FrozenAdapter,
}

impl Regime {
    pub fn trainable(self) -> Trainable {
        match self {
            Regime::FrozenAdapter => Trainable::adapter_only(),
            _ => Trainable::all(),
        }
    }
}

pub const DEFAULT_TEMPERATURE_INIT: f64 = 1.0 / 0.07;
pub const DEFAULT_TEMPERATURE_MAX: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub regime: Regime,
    /// Initial logit multiplier; the learnable log-scale starts at its ln.
    pub temperature_init: f64,
    /// Upper clamp on the logit multiplier.
    pub temperature_max: f64,
}

impl TrainConfig {
    /// Defaults sized for small local runs; warmup is 2% of the total.
    pub fn new(batch_size: usize, total_steps: usize, peak_lr: f64, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            total_steps,
            warmup_steps: (total_steps / 50).max(1),
            peak_lr,
            weight_decay: 0.01,
            seed,
            regime: Regime::FromScratch,
            temperature_init: DEFAULT_TEMPERATURE_INIT,
            temperature_max: DEFAULT_TEMPERATURE_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidTrainConfig(msg.into()));
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad("need 1 <= warmup_steps < total_steps");
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr must be positive and finite");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.temperature_init > 0.0 && self.temperature_max > 0.0) {
            return bad("temperatures must be positive");
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-6;

/// Adaptive-moment optimizer with decoupled weight decay. Moments are
/// kept in f64 regardless of the weight precision; decay applies only to
/// tensors of rank >= 2 (matrices), never to biases, gains, or scalars.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update over every trainable parameter that received a
    /// gradient. Frozen or gradient-free tensors are left untouched.
    pub fn update<F: Real>(
        &mut self,
        model: &mut DualEncoder<F>,
        grads: &GradStore<F>,
        lr: f64,
        weight_decay: f64,
        trainable: &Trainable,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        struct Apply<'a, F> {
            grads: &'a GradStore<F>,
            m: &'a mut BTreeMap<String, Vec<f64>>,
            v: &'a mut BTreeMap<String, Vec<f64>>,
            trainable: &'a Trainable,
            beta1: f64,
            beta2: f64,
            eps: f64,
            bc1: f64,
            bc2: f64,
            lr: f64,
            weight_decay: f64,
        }
        impl<F: Real> crate::nn::VisitMut<F> for Apply<'_, F> {
            fn leaf(&mut self, name: &str, shape: &[usize], data: &mut [F]) {
                if !self.trainable.includes(name) {
                    return;
                }
                let Some((_, g)) = self.grads.get(name) else {
                    return;
                };
                let m = self
                    .m
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; data.len()]);
                let v = self
                    .v
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; data.len()]);
                let decay = if shape.len() >= 2 { self.weight_decay } else { 0.0 };
                for i in 0..data.len() {
                    let gi = g[i].as_f64();
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let mhat = m[i] / self.bc1;
                    let vhat = v[i] / self.bc2;
                    let old = data[i].as_f64();
                    let mut new = old - self.lr * mhat / (vhat.sqrt() + self.eps);
                    new -= self.lr * decay * old;
                    data[i] = F::of_f64(new);
                }
            }
        }

        model.visit_mut(&mut Apply {
            grads,
            m: &mut self.m,
            v: &mut self.v,
            trainable,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            bc1,
            bc2,
            lr,
            weight_decay,
        });
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub temperature: f64,
}

/// Writes history as `step,loss,lr,temperature` CSV.
pub fn write_metrics_csv<W: Write>(writer: W, history: &[StepStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "loss", "lr", "temperature"])
        .map_err(csv_err)?;
    for row in history {
        w.write_record([
            row.step.to_string(),
            format!("{:.6}", row.loss),
            format!("{:.8}", row.lr),
            format!("{:.4}", row.temperature),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset("metrics".into(), e.to_string())
}

/// Everything a training run owns: the model, optimizer moments, the
/// step counter, the batch-sampling RNG, and the loss history.
pub struct TrainState<F> {
    pub model: DualEncoder<F>,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub step: usize,
    pub rng: ChaCha12Rng,
    pub history: Vec<StepStats>,
}

impl<F: Real> TrainState<F> {
    /// The model's logit scale is reset to the configured initial
    /// temperature so runs are fully described by (model seed, config).
    pub fn new(mut model: DualEncoder<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.log_scale[0] = real(config.temperature_init.ln());
        let rng = seeded_rng(config.seed);
        Ok(TrainState {
            model,
            optimizer: AdamW::new(),
            config,
            step: 0,
            rng,
            history: Vec::new(),
        })
    }

    pub fn temperature(&self) -> Temperature<F> {
        Temperature {
            log_scale: self.model.log_scale[0],
        }
    }

    /// Computes loss and gradients for one batch without updating
    /// anything. Frozen subtrees (per regime) receive no gradient
    /// entries at all.
    pub fn compute_grads(
        &self,
        images: &ImageBatch<F>,
        tokens: &TokenBatch,
    ) -> Result<(F, GradStore<F>)> {
        let trainable = self.config.regime.trainable();
        let acts = self.model.forward_train(images, tokens)?;
        let img = EmbeddingMatrix {
            vectors: acts.image_emb.clone(),
            normalized: true,
        };
        let txt = EmbeddingMatrix {
            vectors: acts.text_emb.clone(),
            normalized: true,
        };
        let s = similarity_matrix(&img, &txt, self.temperature())?;
        let (loss, ds) = contrastive_loss(&s)?;

        let mut grads = GradStore::new();
        if trainable.logit_scale {
            // dS/d(log_scale) = S, so the scalar gradient is sum(dS * S).
            let g = (&ds * &s).sum();
            grads.add("logit_scale".into(), &[1], &[g]);
        }
        let scale = self.temperature().scale();
        let mut d_img = ds.dot(&acts.text_emb);
        d_img.map_inplace(|v| *v = *v * scale);
        let mut d_txt = ds.t().dot(&acts.image_emb);
        d_txt.map_inplace(|v| *v = *v * scale);
        self.model
            .backward_train(&acts, &d_img, &d_txt, &trainable, &mut grads);
        Ok((loss, grads))
    }

    /// One optimization step on one batch. Appends to the history and
    /// advances the step counter.
    pub fn train_step(&mut self, images: &ImageBatch<F>, tokens: &TokenBatch) -> Result<StepStats> {
        if self.step >= self.config.total_steps {
            return Err(Error::StepOutOfRange {
                step: self.step,
                total_steps: self.config.total_steps,
            });
        }
        let temperature = self.temperature().scale().as_f64();
        let (loss, grads) = self.compute_grads(images, tokens)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                step: Some(self.step),
            });
        }
        let lr = lr_at(self.step, &self.config)?;
        let trainable = self.config.regime.trainable();
        self.optimizer
            .update(&mut self.model, &grads, lr, self.config.weight_decay, &trainable);
        let mut temp = self.temperature();
        temp.clamp(self.config.temperature_max);
        self.model.log_scale[0] = temp.log_scale;

        let stats = StepStats {
            step: self.step,
            loss,
            lr,
            temperature,
        };
        self.step += 1;
        self.history.push(stats);
        Ok(stats)
    }

    /// Gradient accumulation over micro-batches: each micro-batch forms
    /// its own similarity matrix (negatives never cross micro-batches),
    /// gradients are averaged, and a single optimizer step is taken.
    pub fn train_step_accumulated(
        &mut self,
        micro_batches: &[(ImageBatch<F>, TokenBatch)],
    ) -> Result<StepStats> {
        if self.step >= self.config.total_steps {
            return Err(Error::StepOutOfRange {
                step: self.step,
                total_steps: self.config.total_steps,
            });
        }
        if micro_batches.is_empty() {
            return Err(Error::BatchTooSmall(0));
        }
        let temperature = self.temperature().scale().as_f64();
        let mut total = GradStore::new();
        let mut loss_sum = 0.0;
        for (images, tokens) in micro_batches {
            let (loss, grads) = self.compute_grads(images, tokens)?;
            loss_sum += loss.as_f64();
            for (name, shape, data) in grads.iter() {
                total.add(name.to_string(), shape, data);
            }
        }
        let k = micro_batches.len() as f64;
        total.scale(real(1.0 / k));
        let loss = loss_sum / k;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                step: Some(self.step),
            });
        }
        let lr = lr_at(self.step, &self.config)?;
        let trainable = self.config.regime.trainable();
        self.optimizer
            .update(&mut self.model, &total, lr, self.config.weight_decay, &trainable);
        let mut temp = self.temperature();
        temp.clamp(self.config.temperature_max);
        self.model.log_scale[0] = temp.log_scale;

        let stats = StepStats {
            step: self.step,
            loss,
            lr,
            temperature,
        };
        self.step += 1;
        self.history.push(stats);
        Ok(stats)
    }
}

fn select_tokens(batch: &TokenBatch, idx: &[usize]) -> TokenBatch {
    TokenBatch {
        ids: batch.ids.select(Axis(0), idx),
        lengths: idx.iter().map(|&i| batch.lengths[i]).collect(),
        context_length: batch.context_length,
    }
}

fn select_images<F: Real>(batch: &ImageBatch<F>, idx: &[usize]) -> ImageBatch<F> {
    ImageBatch {
        pixels: batch.pixels.select(Axis(0), idx),
        spec: batch.spec.clone(),
    }
}

/// Draws `k` distinct indices from `0..n` (all of them when k == n, in
/// order) using the state's RNG; deterministic in the seed.
fn sample_indices(rng: &mut ChaCha12Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Runs `steps` optimization steps over a fixed in-memory pair set,
/// sampling `batch_size` pairs per step.
pub fn run_training<F: Real>(
    state: &mut TrainState<F>,
    images: &ImageBatch<F>,
    tokens: &TokenBatch,
    steps: usize,
) -> Result<()> {
    let n = images.batch_size();
    if n != tokens.batch_size() {
        return Err(Error::RowCountMismatch {
            left: n,
            right: tokens.batch_size(),
        });
    }
    for _ in 0..steps {
        let idx = sample_indices(&mut state.rng, n, state.config.batch_size);
        let img = select_images(images, &idx);
        let tok = select_tokens(tokens, &idx);
        state.train_step(&img, &tok)?;
    }
    Ok(())
}

/// Resolution fine-tuning: resample the positional grid for the new
/// resolution, then hand back a fresh state (regime `finetune`) ready to
/// continue stepping. Zero further steps leaves exactly the interpolated
/// model.
pub fn finetune_resolution<F: Real>(
    mut model: DualEncoder<F>,
    new_resolution: usize,
    mut config: TrainConfig,
) -> Result<TrainState<F>> {
    let old = model.config.image.spec.clone();
    let new_spec = ImageSpec {
        resolution: new_resolution,
        ..old
    };
    // Validate divisibility before touching the weights.
    ImageSpec::new(new_resolution, old.patch_size)?;
    model.interpolate_pos_embeddings(new_spec)?;
    config.regime = Regime::Finetune;
    TrainState::new(model, config)
}

/// Frozen-backbone regime: attach an identity adapter to the image head
/// and train only its two linear layers.
pub fn build_frozen_adapter<F: Real>(
    mut model: DualEncoder<F>,
    mut config: TrainConfig,
) -> Result<TrainState<F>> {
    model.attach_adapter();
    config.regime = Regime::FrozenAdapter;
    TrainState::new(model, config)
}

/// The full contrastive objective for a fixed batch, as a pure function
/// of the weights. Shared by training and the gradient checker.
pub fn batch_loss<F: Real>(
    model: &DualEncoder<F>,
    images: &ImageBatch<F>,
    tokens: &TokenBatch,
) -> Result<F> {
    let acts = model.forward_train(images, tokens)?;
    let img = EmbeddingMatrix {
        vectors: acts.image_emb,
        normalized: true,
    };
    let txt = EmbeddingMatrix {
        vectors: acts.text_emb,
        normalized: true,
    };
    let s = similarity_matrix(
        &img,
        &txt,
        Temperature {
            log_scale: model.log_scale[0],
        },
    )?;
    Ok(contrastive_loss(&s)?.0)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Tensors carrying an analytic gradient (all of them, for a fully
    /// trainable model).
    pub tensors_checked: usize,
    pub elements_checked: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
}

/// Verifies analytic gradients of the full contrastive objective against
/// central finite differences, sampling `samples_per_tensor` elements of
/// every gradient-bearing tensor. Meant for 64-bit models; in 32-bit the
/// difference quotient drowns in rounding noise.
///
/// Relative error per element is `|ga - gn| / max(|ga|, |gn|)`; elements
/// where both magnitudes sit below 1e-7 count as matching (zero against
/// finite-difference noise).
pub fn gradient_check(
    model: &DualEncoder<f64>,
    images: &ImageBatch<f64>,
    tokens: &TokenBatch,
    samples_per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let acts = model.forward_train(images, tokens)?;
    let img = EmbeddingMatrix {
        vectors: acts.image_emb.clone(),
        normalized: true,
    };
    let txt = EmbeddingMatrix {
        vectors: acts.text_emb.clone(),
        normalized: true,
    };
    let temp = Temperature {
        log_scale: model.log_scale[0],
    };
    let s = similarity_matrix(&img, &txt, temp)?;
    let (_, ds) = contrastive_loss(&s)?;

    let mut grads = GradStore::new();
    grads.add("logit_scale".into(), &[1], &[(&ds * &s).sum()]);
    let scale = temp.scale();
    let mut d_img = ds.dot(&acts.text_emb);
    d_img.map_inplace(|v| *v = *v * scale);
    let mut d_txt = ds.t().dot(&acts.image_emb);
    d_txt.map_inplace(|v| *v = *v * scale);
    model.backward_train(&acts, &d_img, &d_txt, &Trainable::all(), &mut grads);

    struct Perturb<'a> {
        name: &'a str,
        index: usize,
        delta: f64,
    }
    impl crate::nn::VisitMut<f64> for Perturb<'_> {
        fn leaf(&mut self, name: &str, _shape: &[usize], data: &mut [f64]) {
            if name == self.name {
                data[self.index] += self.delta;
            }
        }
    }

    let mut rng = seeded_rng(seed);
    let mut report = GradCheckReport {
        tensors_checked: 0,
        elements_checked: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
    };
    let names: Vec<(String, usize)> = grads
        .iter()
        .map(|(n, _, d)| (n.to_string(), d.len()))
        .collect();
    for (name, len) in names {
        report.tensors_checked += 1;
        for _ in 0..samples_per_tensor.min(len) {
            let index = rng.gen_range(0..len);
            let (_, g) = grads.get(&name).expect("listed");
            let analytic = g[index];

            let mut plus = model.clone();
            plus.visit_mut(&mut Perturb {
                name: &name,
                index,
                delta: h,
            });
            let mut minus = model.clone();
            minus.visit_mut(&mut Perturb {
                name: &name,
                index,
                delta: -h,
            });
            let numeric = (batch_loss(&plus, images, tokens)?
                - batch_loss(&minus, images, tokens)?)
                / (2.0 * h);

            report.elements_checked += 1;
            let magnitude = analytic.abs().max(numeric.abs());
            if magnitude < 1e-7 {
                continue;
            }
            let rel = (analytic - numeric).abs() / magnitude;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = format!("{name}[{index}]");
            }
        }
    }
    Ok(report)
}

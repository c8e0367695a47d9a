//! Few-shot linear probe: freeze the image tower, extract joint-space
//! features, train a multinomial logistic head on k examples per class,
//! and score on the test split.
//!
//! The head optimizer is a deterministic full-batch limited-memory
//! quasi-Newton loop with Armijo backtracking, run entirely in f64: the
//! objective is convex, so every run from the same shots reaches the
//! same solution and the traced objective is monotone non-increasing.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{ClassifyDataset, Split};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::float::Real;
use crate::util::stream_rng;
use crate::zeroshot::{accuracy, encode_image_files, EvalReport, MetricKind, Shots};

pub const DEFAULT_L2_REG: f64 = 1e-3;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_SEEDS: usize = 3;
/// Converged when the gradient infinity norm drops below this.
pub const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Labeled examples per class.
    pub shots: usize,
    /// Coefficient of the (l2/2)·‖W‖² penalty; the bias is unregularized.
    pub l2_reg: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(shots: usize, seed: u64) -> Self {
        ProbeConfig {
            shots,
            l2_reg: DEFAULT_L2_REG,
            max_iter: DEFAULT_MAX_ITER,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::InvalidProbeConfig("shots must be >= 1".into()));
        }
        if !(self.l2_reg.is_finite() && self.l2_reg >= 0.0) {
            return Err(Error::InvalidProbeConfig(
                "l2_reg must be non-negative".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidProbeConfig("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Frozen features with labels; rows are unit-norm joint-space vectors.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Encodes one split of a dataset with the frozen image tower.
/// Features are post-projection, L2-normalized, in manifest order.
pub fn extract_features<F: Real>(
    ds: &ClassifyDataset,
    split: Split,
    model: &DualEncoder<F>,
) -> Result<FeatureSet> {
    let items = ds.split_items(split);
    if items.is_empty() {
        return Err(Error::Dataset(
            ds.name.clone(),
            format!("no items in the {split:?} split"),
        ));
    }
    let paths: Vec<_> = items.iter().map(|it| ds.image_path(it)).collect();
    let emb = encode_image_files(model, &paths)?;
    let features = emb.vectors.mapv(|v| v.as_f64());
    Ok(FeatureSet {
        features,
        labels: items.iter().map(|it| it.label).collect(),
        num_classes: ds.num_classes(),
        split,
    })
}

/// Draws exactly `k` examples per class without replacement. Each class
/// uses its own RNG stream keyed by (seed, class), so the selection for
/// one class is independent of the others and fully seed-deterministic.
pub fn sample_shots(pool: &FeatureSet, k: usize, seed: u64) -> Result<FeatureSet> {
    if k == 0 {
        return Err(Error::InvalidProbeConfig("shots must be >= 1".into()));
    }
    let dim = pool.features.ncols();
    let mut rows: Vec<usize> = Vec::with_capacity(k * pool.num_classes);
    for class in 0..pool.num_classes {
        let mut idx: Vec<usize> = (0..pool.len())
            .filter(|&i| pool.labels[i] == class)
            .collect();
        if idx.len() < k {
            return Err(Error::NotEnoughShots {
                class,
                available: idx.len(),
                requested: k,
            });
        }
        let mut rng = stream_rng(seed, class as u64);
        // Partial Fisher-Yates: the first k slots become the sample.
        for i in 0..k {
            let j = rand::Rng::gen_range(&mut rng, i..idx.len());
            idx.swap(i, j);
        }
        rows.extend_from_slice(&idx[..k]);
    }
    let mut features = Array2::zeros((rows.len(), dim));
    let mut labels = Vec::with_capacity(rows.len());
    for (out, &src) in rows.iter().enumerate() {
        features.row_mut(out).assign(&pool.features.row(src));
        labels.push(pool.labels[src]);
    }
    Ok(FeatureSet {
        features,
        labels,
        num_classes: pool.num_classes,
        split: Split::Train,
    })
}

/// Trained linear head: logits = x · w + b.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearHead {
    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut z = features.dot(&self.w);
        for mut row in z.rows_mut() {
            row += &self.b;
        }
        z
    }

    /// Argmax per row, ties to the lowest class index.
    pub fn predict(&self, features: &Array2<f64>) -> Vec<usize> {
        self.logits(features)
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Mean cross-entropy plus (l2/2)·‖W‖², with its gradient in the flat
/// parameter layout [w row-major | b].
fn objective(
    x: &Array2<f64>,
    labels: &[usize],
    num_classes: usize,
    l2: f64,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let (n, d) = (x.nrows(), x.ncols());
    let c = num_classes;
    let w = ndarray::ArrayView2::from_shape((d, c), &params[..d * c]).unwrap();
    let b = &params[d * c..];

    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    let mut z = x.dot(&w);
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b[j];
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += -(row[labels[i]] / sum).ln();
        // row becomes dL/dz for this example (softmax minus one-hot), /n later.
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v / sum - if j == labels[i] { 1.0 } else { 0.0 };
        }
    }
    loss /= n as f64;
    let inv_n = 1.0 / n as f64;
    // gW = Xᵀ·dZ/n + l2·W; gb = colsum(dZ)/n.
    for i in 0..n {
        for k in 0..d {
            let xv = x[[i, k]] * inv_n;
            for j in 0..c {
                grad[k * c + j] += xv * z[[i, j]];
            }
        }
        for j in 0..c {
            grad[d * c + j] += z[[i, j]] * inv_n;
        }
    }
    for k in 0..d {
        for j in 0..c {
            let wkj = w[[k, j]];
            loss += 0.5 * l2 * wkj * wkj;
            grad[k * c + j] += l2 * wkj;
        }
    }
    (loss, grad)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains the head and returns the per-iteration objective trace
/// (monotone non-increasing thanks to the backtracking line search).
pub fn train_linear_traced(train: &FeatureSet, cfg: &ProbeConfig) -> Result<(LinearHead, Vec<f64>)> {
    cfg.validate()?;
    let distinct = {
        let mut present = vec![false; train.num_classes];
        for &l in &train.labels {
            present[l] = true;
        }
        present.iter().filter(|&&p| p).count()
    };
    if distinct < 2 {
        return Err(Error::SingleClassTrain);
    }
    if train.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "probe features",
            step: None,
        });
    }

    let (d, c) = (train.features.ncols(), train.num_classes);
    let mut x = vec![0.0f64; d * c + c];
    let f = |p: &[f64]| objective(&train.features, &train.labels, c, cfg.l2_reg, p);
    let (mut fx, mut gx) = f(&x);
    let mut trace = vec![fx];

    // Limited-memory curvature pairs for the two-loop direction.
    const MEMORY: usize = 10;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();

    for _ in 0..cfg.max_iter {
        if inf_norm(&gx) < GRAD_TOL {
            break;
        }
        // Two-loop recursion: d = -H·g with H built from recent (s, y).
        let mut dir: Vec<f64> = gx.clone();
        let mut alpha = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            alpha[i] = rho[i] * dot(&s_hist[i], &dir);
            for (dv, yv) in dir.iter_mut().zip(&y_hist[i]) {
                *dv -= alpha[i] * yv;
            }
        }
        if let Some(last) = s_hist.len().checked_sub(1) {
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for dv in dir.iter_mut() {
                *dv *= gamma;
            }
        }
        for i in 0..s_hist.len() {
            let beta = rho[i] * dot(&y_hist[i], &dir);
            for (dv, sv) in dir.iter_mut().zip(&s_hist[i]) {
                *dv += (alpha[i] - beta) * sv;
            }
        }
        for dv in dir.iter_mut() {
            *dv = -*dv;
        }
        let mut slope = dot(&gx, &dir);
        if slope >= 0.0 {
            // Curvature info went stale; fall back to steepest descent.
            dir = gx.iter().map(|&g| -g).collect();
            slope = dot(&gx, &dir);
        }

        // Armijo backtracking.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
            let (fc, gc) = f(&cand);
            if fc <= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break; // step underflow: gradient is numerically flat
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            rho.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }
        x = xn;
        fx = fn_;
        gx = gn;
        trace.push(fx);
    }

    let w = Array2::from_shape_vec((d, c), x[..d * c].to_vec()).expect("w layout");
    let b = Array1::from_vec(x[d * c..].to_vec());
    Ok((LinearHead { w, b }, trace))
}

pub fn train_linear(train: &FeatureSet, cfg: &ProbeConfig) -> Result<LinearHead> {
    train_linear_traced(train, cfg).map(|(head, _)| head)
}

/// One point of the few-shot curve: per-seed reports plus their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePoint {
    pub shots: usize,
    pub per_seed: Vec<EvalReport>,
    pub mean: f64,
}

/// Runs the probe protocol on pre-extracted features: for every k and
/// seed, sample shots, train a head, and score test accuracy.
pub fn probe_curve_features(
    pool: &FeatureSet,
    test: &FeatureSet,
    shot_list: &[usize],
    seeds: usize,
    base: &ProbeConfig,
    dataset: &str,
    model_name: &str,
) -> Result<Vec<ProbePoint>> {
    if shot_list.is_empty() {
        return Err(Error::InvalidProbeConfig("shot list is empty".into()));
    }
    if seeds == 0 {
        return Err(Error::InvalidProbeConfig("need at least one seed".into()));
    }
    let mut points = Vec::with_capacity(shot_list.len());
    for &k in shot_list {
        let mut per_seed = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let seed = base.seed + s as u64;
            let cfg = ProbeConfig {
                shots: k,
                seed,
                ..*base
            };
            let shots = sample_shots(pool, k, seed)?;
            let head = train_linear(&shots, &cfg)?;
            let preds = head.predict(&test.features);
            let value = accuracy(&preds, &test.labels)?;
            let report = EvalReport {
                dataset: dataset.to_string(),
                metric: MetricKind::Accuracy,
                value,
                model: model_name.to_string(),
                shots: Shots::Count(k),
                seed,
            };
            report.validate()?;
            per_seed.push(report);
        }
        let mean = per_seed.iter().map(|r| r.value).sum::<f64>() / seeds as f64;
        points.push(ProbePoint {
            shots: k,
            per_seed,
            mean,
        });
    }
    Ok(points)
}

/// Full pipeline from a dataset directory: extract train-pool and test
/// features once, then run the curve.
pub fn probe_curve<F: Real>(
    ds: &ClassifyDataset,
    model: &DualEncoder<F>,
    shot_list: &[usize],
    seeds: usize,
    base: &ProbeConfig,
) -> Result<Vec<ProbePoint>> {
    let pool = extract_features(ds, Split::Train, model)?;
    let test = extract_features(ds, Split::Test, model)?;
    probe_curve_features(
        &pool,
        &test,
        shot_list,
        seeds,
        base,
        &ds.name,
        &model.config.preset_name,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Unit-norm features around one centroid per class.
    fn synthetic(classes: usize, per_class: usize, dim: usize, noise: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let centroids: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut features = Array2::zeros((classes * per_class, dim));
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let row = c * per_class + i;
                let mut v: Vec<f64> = centroids[c]
                    .iter()
                    .map(|&m| m + noise * rng.gen_range(-1.0..1.0))
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                for (j, &x) in v.iter().enumerate() {
                    features[[row, j]] = x;
                }
                labels.push(c);
            }
        }
        FeatureSet {
            features,
            labels,
            num_classes: classes,
            split: Split::Train,
        }
    }

    #[test]
    fn sample_shots_cardinality_and_determinism() {
        let pool = synthetic(3, 40, 8, 0.3, 1);
        let a = sample_shots(&pool, 4, 9).unwrap();
        let b = sample_shots(&pool, 4, 9).unwrap();
        let c = sample_shots(&pool, 4, 10).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a.labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(a.features, b.features);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn sample_shots_exhaustive_when_k_equals_class_size() {
        let pool = synthetic(2, 5, 4, 0.2, 2);
        let s = sample_shots(&pool, 5, 3).unwrap();
        assert_eq!(s.len(), 10);
        // Every pool row of class 0 appears exactly once.
        for i in 0..5 {
            let row = pool.features.row(i);
            let found = s
                .features
                .rows()
                .into_iter()
                .filter(|r| r.iter().zip(row.iter()).all(|(a, b)| a == b))
                .count();
            assert_eq!(found, 1);
        }
    }

    #[test]
    fn sample_shots_insufficient_pool_names_class() {
        let pool = synthetic(2, 3, 4, 0.2, 4);
        let err = sample_shots(&pool, 4, 0).unwrap_err();
        match err {
            Error::NotEnoughShots {
                class,
                available,
                requested,
            } => {
                assert_eq!(class, 0);
                assert_eq!(available, 3);
                assert_eq!(requested, 4);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn separable_clusters_reach_full_training_accuracy() {
        let train = synthetic(2, 20, 2, 0.05, 5);
        let cfg = ProbeConfig {
            shots: 20,
            l2_reg: 1e-4,
            max_iter: 500,
            seed: 0,
        };
        let head = train_linear(&train, &cfg).unwrap();
        let preds = head.predict(&train.features);
        assert_eq!(accuracy(&preds, &train.labels).unwrap(), 1.0);
    }

    #[test]
    fn objective_trace_is_monotone_non_increasing() {
        let train = synthetic(4, 10, 6, 0.4, 6);
        let (_, trace) = train_linear_traced(&train, &ProbeConfig::new(10, 0)).unwrap();
        assert!(trace.len() > 3);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn duplicated_rows_leave_solution_unchanged() {
        let train = synthetic(3, 8, 5, 0.3, 7);
        let mut doubled_feats = Array2::zeros((train.len() * 2, 5));
        let mut doubled_labels = Vec::new();
        for rep in 0..2 {
            for i in 0..train.len() {
                doubled_feats
                    .row_mut(rep * train.len() + i)
                    .assign(&train.features.row(i));
            }
            doubled_labels.extend_from_slice(&train.labels);
        }
        let doubled = FeatureSet {
            features: doubled_feats,
            labels: doubled_labels,
            num_classes: 3,
            split: Split::Train,
        };
        let cfg = ProbeConfig {
            shots: 8,
            l2_reg: 0.1,
            max_iter: 500,
            seed: 0,
        };
        let a = train_linear(&train, &cfg).unwrap();
        let b = train_linear(&doubled, &cfg).unwrap();
        let dw = (&a.w - &b.w).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let db = (&a.b - &b.b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dw < 1e-4 && db < 1e-4, "dw {dw:e} db {db:e}");
    }

    #[test]
    fn row_order_does_not_change_the_solution() {
        let train = synthetic(3, 10, 4, 0.3, 8);
        let n = train.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut pf = Array2::zeros((n, 4));
        let mut pl = vec![0usize; n];
        for (dst, &src) in perm.iter().enumerate() {
            pf.row_mut(dst).assign(&train.features.row(src));
            pl[dst] = train.labels[src];
        }
        let permuted = FeatureSet {
            features: pf,
            labels: pl,
            num_classes: 3,
            split: Split::Train,
        };
        let cfg = ProbeConfig {
            shots: 10,
            l2_reg: 0.1,
            max_iter: 500,
            seed: 0,
        };
        let a = train_linear(&train, &cfg).unwrap();
        let b = train_linear(&permuted, &cfg).unwrap();
        let dw = (&a.w - &b.w).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dw < 1e-4, "dw {dw:e}");
    }

    #[test]
    fn heavy_regularization_collapses_to_class_prior() {
        let train = {
            // Imbalanced: 15 of class 0, 5 of class 1.
            let base = synthetic(2, 15, 4, 0.3, 9);
            let keep: Vec<usize> = (0..15).chain(15..20).collect();
            let mut f = Array2::zeros((keep.len(), 4));
            let mut l = Vec::new();
            for (dst, &src) in keep.iter().enumerate() {
                f.row_mut(dst).assign(&base.features.row(src));
                l.push(base.labels[src]);
            }
            FeatureSet {
                features: f,
                labels: l,
                num_classes: 2,
                split: Split::Train,
            }
        };
        let cfg = ProbeConfig {
            shots: 5,
            l2_reg: 1e6,
            max_iter: 500,
            seed: 0,
        };
        let head = train_linear(&train, &cfg).unwrap();
        let wmax = head.w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(wmax < 1e-3, "w should collapse, got {wmax:e}");
        // Bias alone now decides: the majority class (0) wins everywhere.
        let preds = head.predict(&train.features);
        assert!(preds.iter().all(|&p| p == 0));
    }

    #[test]
    fn gradient_of_head_objective_matches_finite_differences() {
        let train = synthetic(3, 6, 4, 0.4, 10);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let params: Vec<f64> = (0..4 * 3 + 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (_, grad) = objective(&train.features, &train.labels, 3, 0.01, &params);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let (fp, _) = objective(&train.features, &train.labels, 3, 0.01, &plus);
            let (fm, _) = objective(&train.features, &train.labels, 3, 0.01, &minus);
            let num = (fp - fm) / (2.0 * h);
            assert!(
                (grad[i] - num).abs() < 1e-6,
                "param {i}: analytic {} vs numeric {num}",
                grad[i]
            );
        }
    }

    #[test]
    fn probe_curve_means_are_arithmetic_means() {
        let pool = synthetic(3, 30, 8, 0.2, 12);
        let test = synthetic(3, 10, 8, 0.2, 13);
        let cfg = ProbeConfig::new(1, 100);
        let points =
            probe_curve_features(&pool, &test, &[1, 4], 3, &cfg, "synthetic", "tiny").unwrap();
        assert_eq!(points.len(), 2);
        for p in &points {
            assert_eq!(p.per_seed.len(), 3);
            let mean = p.per_seed.iter().map(|r| r.value).sum::<f64>() / 3.0;
            assert!((p.mean - mean).abs() < 1e-12);
            for (i, r) in p.per_seed.iter().enumerate() {
                assert_eq!(r.seed, 100 + i as u64);
                assert_eq!(r.shots, Shots::Count(p.shots));
            }
        }
        // Deterministic end to end.
        let again =
            probe_curve_features(&pool, &test, &[1, 4], 3, &cfg, "synthetic", "tiny").unwrap();
        for (a, b) in points.iter().zip(&again) {
            assert_eq!(a.mean, b.mean);
        }
    }

    #[test]
    fn accuracy_grows_with_shots_on_clustered_features() {
        let pool = synthetic(4, 40, 16, 0.25, 14);
        let test = synthetic(4, 15, 16, 0.25, 14); // same centroids: same seed stream
        let cfg = ProbeConfig::new(1, 0);
        let pts = probe_curve_features(&pool, &test, &[1, 16], 5, &cfg, "s", "tiny").unwrap();
        assert!(
            pts[1].mean >= pts[0].mean - 0.02,
            "16-shot {} should not trail 1-shot {}",
            pts[1].mean,
            pts[0].mean
        );
    }

    #[test]
    fn single_class_training_is_rejected() {
        let mut pool = synthetic(2, 5, 4, 0.2, 15);
        pool.labels.iter_mut().for_each(|l| *l = 0);
        let err = train_linear(&pool, &ProbeConfig::new(5, 0)).unwrap_err();
        assert!(matches!(err, Error::SingleClassTrain));
    }
}

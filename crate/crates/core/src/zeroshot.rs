//! Zero-shot classification over the joint embedding space.
//!
//! Class embeddings come from prompt templates: every template is filled
//! with the class name, encoded, and the embeddings are averaged and
//! re-normalized. Images are classified by cosine argmax against those
//! class vectors. The metric family covers plain accuracy, mean-per-class
//! accuracy and ROC-AUC; all three are deterministic, with argmax ties
//! broken toward the lowest class index so runs are bit-reproducible.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{load_image_batch, ClassifyDataset, Split};
use crate::encoders::{DualEncoder, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::float::Real;
use crate::tokenizer::{TokenBatch, Vocab};
use crate::vision::ImageBatch;

/// Which score a report carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    MeanPerClass,
    RocAuc,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::MeanPerClass => "mean_per_class",
            MetricKind::RocAuc => "roc_auc",
        };
        f.write_str(s)
    }
}

impl FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "mean_per_class" => Ok(MetricKind::MeanPerClass),
            "roc_auc" => Ok(MetricKind::RocAuc),
            other => Err(Error::Dataset(
                "metric".into(),
                format!("unknown metric {other:?}; expected accuracy, mean_per_class or roc_auc"),
            )),
        }
    }
}

/// Prompt templates, each containing exactly one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::EmptyTemplates);
        }
        for t in &templates {
            if t.matches("{}").count() != 1 {
                return Err(Error::BadTemplate(t.clone()));
            }
        }
        Ok(PromptTemplateSet { templates })
    }

    /// One template per non-blank line.
    pub fn from_lines(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty sets
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// All templates filled with one class name.
    pub fn fill(&self, class: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen("{}", class, 1))
            .collect()
    }
}

/// Ordered class names with one unit-norm embedding per class.
#[derive(Debug, Clone)]
pub struct ClassEmbeddings<F> {
    pub classes: Vec<String>,
    pub matrix: EmbeddingMatrix<F>,
}

/// Encodes every filled template per class, means the embeddings and
/// re-normalizes, yielding one row per class in class order.
pub fn build_class_embeddings<F: Real>(
    classes: &[String],
    templates: &PromptTemplateSet,
    model: &DualEncoder<F>,
    vocab: &Vocab,
) -> Result<ClassEmbeddings<F>> {
    if classes.is_empty() {
        return Err(Error::NoClasses);
    }
    for (i, c) in classes.iter().enumerate() {
        if c.trim().is_empty() {
            return Err(Error::EmptyClassName(i));
        }
    }
    let ctx = model.config.text.context_length;
    let joint = model.config.joint_dim;
    let mut rows = Array2::<F>::zeros((classes.len(), joint));
    for (i, class) in classes.iter().enumerate() {
        let prompts = templates.fill(class);
        let batch = TokenBatch::encode(&prompts, vocab, ctx)?;
        let emb = model.encode_text(&batch)?;
        let mean = emb.vectors.mean_axis(Axis(0)).expect("non-empty templates");
        let norm = mean.iter().map(|&v| (v * v).as_f64()).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::NonFinite {
                what: "class embedding (template mean collapsed to zero)",
                step: None,
            });
        }
        let inv = F::of_f64(1.0 / norm);
        for (j, &v) in mean.iter().enumerate() {
            rows[[i, j]] = v * inv;
        }
    }
    Ok(ClassEmbeddings {
        classes: classes.to_vec(),
        matrix: EmbeddingMatrix::normalized(rows)?,
    })
}

/// Cosine scores and argmax predictions; ties go to the lowest class index.
pub fn classify<F: Real>(
    images: &EmbeddingMatrix<F>,
    classes: &ClassEmbeddings<F>,
) -> Result<(Vec<usize>, Array2<F>)> {
    images.require_normalized()?;
    classes.matrix.require_normalized()?;
    if images.dim() != classes.matrix.dim() {
        return Err(Error::DimMismatch {
            left: images.dim(),
            right: classes.matrix.dim(),
        });
    }
    let scores = images.vectors.dot(&classes.matrix.vectors.t());
    let preds = scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok((preds, scores))
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyEval);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class accuracies; every class must appear in
/// the ground truth.
pub fn mean_per_class_accuracy(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() || num_classes == 0 {
        return Err(Error::EmptyEval);
    }
    let mut total = vec![0usize; num_classes];
    let mut hit = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: t,
                num_classes,
            });
        }
        total[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    for (c, &n) in total.iter().enumerate() {
        if n == 0 {
            return Err(Error::ClassAbsent(c));
        }
    }
    let sum: f64 = (0..num_classes)
        .map(|c| hit[c] as f64 / total[c] as f64)
        .sum();
    Ok(sum / num_classes as f64)
}

/// Probability a random positive outscores a random negative, ties ½.
/// Computed via average ranks, which is exactly the tie-corrected
/// pair-counting definition.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            pred: scores.len(),
            truth: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average rank within each tied run (ranks are 1-based).
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Raw text-image cosine matrix (no temperature), row = text, col = image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub texts: Vec<String>,
    pub images: Vec<String>,
    /// Row-major [texts.len(), images.len()].
    pub matrix: Vec<Vec<f64>>,
}

pub fn similarity_report<F: Real>(
    texts: &[String],
    image_names: &[String],
    images: &ImageBatch<F>,
    model: &DualEncoder<F>,
    vocab: &Vocab,
) -> Result<SimilarityReport> {
    if texts.is_empty() || images.batch_size() == 0 {
        return Err(Error::EmptyEval);
    }
    if image_names.len() != images.batch_size() {
        return Err(Error::RowCountMismatch {
            left: image_names.len(),
            right: images.batch_size(),
        });
    }
    let t = model.encode_text(&TokenBatch::encode(
        texts,
        vocab,
        model.config.text.context_length,
    )?)?;
    let v = model.encode_image(images)?;
    let m = t.vectors.dot(&v.vectors.t());
    let matrix = m
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&x| x.as_f64()).collect())
        .collect();
    Ok(SimilarityReport {
        texts: texts.to_vec(),
        images: image_names.to_vec(),
        matrix,
    })
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("text");
        for name in &self.images {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (text, row) in self.texts.iter().zip(&self.matrix) {
            out.push_str(text);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let label_w = self
            .texts
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(4)
            .max(4);
        let col_w = self
            .images
            .iter()
            .map(|n| n.chars().count().max(7))
            .collect::<Vec<_>>();
        let pad = |s: &str, w: usize| {
            let mut s = s.to_string();
            while s.chars().count() < w {
                s.push(' ');
            }
            s
        };
        let mut out = pad("text", label_w);
        for (name, &w) in self.images.iter().zip(&col_w) {
            out.push_str("  ");
            out.push_str(&pad(name, w));
        }
        out.push('\n');
        for (text, row) in self.texts.iter().zip(&self.matrix) {
            out.push_str(&pad(text, label_w));
            for (v, &w) in row.iter().zip(&col_w) {
                out.push_str("  ");
                out.push_str(&pad(&format!("{v:+.4}"), w));
            }
            out.push('\n');
        }
        out
    }
}

/// How many labeled examples per class a report used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shots {
    Zero,
    Count(usize),
}

impl Serialize for Shots {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shots::Zero => s.serialize_str("zero"),
            Shots::Count(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Shots {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::String(s) if s == "zero" => Ok(Shots::Zero),
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|k| Shots::Count(k as usize))
                .ok_or_else(|| serde::de::Error::custom("shots must be a non-negative integer")),
            other => Err(serde::de::Error::custom(format!(
                "shots must be \"zero\" or an integer, got {other}"
            ))),
        }
    }
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::Zero => f.write_str("zero"),
            Shots::Count(k) => write!(f, "{k}"),
        }
    }
}

/// One evaluation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub metric: MetricKind,
    /// Always in [0, 1].
    pub value: f64,
    pub model: String,
    pub shots: Shots,
    pub seed: u64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::Dataset(
                self.dataset.clone(),
                format!("metric value {} outside [0, 1]", self.value),
            ));
        }
        Ok(())
    }

    /// CSV header matching [`EvalReport::to_csv_row`].
    pub const CSV_HEADER: &'static str = "dataset,metric,value,model,shots,seed";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{}",
            self.dataset, self.metric, self.value, self.model, self.shots, self.seed
        )
    }
}

/// Encodes image files into the joint space in bounded-size chunks.
pub fn encode_image_files<F: Real>(
    model: &DualEncoder<F>,
    paths: &[PathBuf],
) -> Result<EmbeddingMatrix<F>> {
    const CHUNK: usize = 64;
    let spec = &model.config.image.spec;
    let joint = model.config.joint_dim;
    let mut rows = Array2::<F>::zeros((paths.len(), joint));
    let mut done = 0;
    for chunk in paths.chunks(CHUNK) {
        let batch = load_image_batch::<F>(chunk, spec)?;
        let emb = model.encode_image(&batch)?;
        rows.slice_mut(ndarray::s![done..done + chunk.len(), ..])
            .assign(&emb.vectors);
        done += chunk.len();
    }
    EmbeddingMatrix::normalized(rows)
}

/// Full zero-shot evaluation of one dataset: build class embeddings from
/// its templates, classify the test split, and score with its metric.
pub fn evaluate<F: Real>(
    ds: &ClassifyDataset,
    model: &DualEncoder<F>,
    vocab: &Vocab,
    seed: u64,
) -> Result<EvalReport> {
    let templates = PromptTemplateSet::new(ds.templates.clone())?;
    let class_emb = build_class_embeddings(&ds.classes, &templates, model, vocab)?;

    let items = ds.split_items(Split::Test);
    if items.is_empty() {
        return Err(Error::Dataset(
            ds.name.clone(),
            "no test-split items to evaluate".into(),
        ));
    }
    let paths: Vec<PathBuf> = items.iter().map(|it| ds.image_path(it)).collect();
    let truth: Vec<usize> = items.iter().map(|it| it.label).collect();
    let embeddings = encode_image_files(model, &paths)?;
    let (preds, scores) = classify(&embeddings, &class_emb)?;

    let value = match ds.metric {
        MetricKind::Accuracy => accuracy(&preds, &truth)?,
        MetricKind::MeanPerClass => mean_per_class_accuracy(&preds, &truth, ds.num_classes())?,
        MetricKind::RocAuc => {
            if ds.num_classes() != 2 {
                return Err(Error::Dataset(
                    ds.name.clone(),
                    format!(
                        "roc_auc needs a binary dataset; this one has {} classes",
                        ds.num_classes()
                    ),
                ));
            }
            // Positive class is index 1; its cosine column is the score.
            let s: Vec<f64> = scores.column(1).iter().map(|&v| v.as_f64()).collect();
            let l: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            roc_auc(&s, &l)?
        }
    };

    let report = EvalReport {
        dataset: ds.name.clone(),
        metric: ds.metric,
        value,
        model: model.config.preset_name.clone(),
        shots: Shots::Zero,
        seed,
    };
    report.validate()?;
    Ok(report)
}

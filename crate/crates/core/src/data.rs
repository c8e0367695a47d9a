//! Dataset manifests and image loading.
//!
//! Two JSONL manifest shapes, both line-addressable in errors:
//!
//! - training pairs: `{"image": path, "caption": text}` per line
//! - classification items: `{"image": path, "label": int}` per line,
//!   with optional `"split": "train" | "test"` (default `test`)
//!
//! A classification dataset is a directory holding `manifest.jsonl` plus
//! sidecars `classes.txt` (one name per line) and `templates.txt` (one
//! prompt template per line), and optionally `dataset.json` with a
//! display name and the metric to report (default accuracy).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Real;
use crate::util::indexed_map;
use crate::vision::{decode_image, ImageBatch, ImageSpec};
use crate::zeroshot::MetricKind;

/// One training pair: an image file and its caption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPair {
    pub image: PathBuf,
    pub caption: String,
}

/// Which half of a classification dataset an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One labeled image.
#[derive(Debug, Clone)]
pub struct ClassifyItem {
    pub image: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Deserialize)]
struct ClassifyLine {
    image: PathBuf,
    label: i64,
    #[serde(default)]
    split: Option<Split>,
}

#[derive(Deserialize, Default)]
struct DatasetMeta {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    metric: Option<MetricKind>,
}

/// A fully loaded classification dataset description (images stay on disk).
#[derive(Debug, Clone)]
pub struct ClassifyDataset {
    pub name: String,
    pub metric: MetricKind,
    pub classes: Vec<String>,
    pub templates: Vec<String>,
    pub items: Vec<ClassifyItem>,
    /// Directory all relative image paths resolve against.
    pub root: PathBuf,
}

fn manifest_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::ManifestLine {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Reads a training manifest: JSONL of `{"image", "caption"}`.
pub fn read_train_manifest(path: &Path) -> Result<Vec<TrainPair>> {
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: TrainPair = serde_json::from_str(line)
            .map_err(|e| manifest_err(path, i + 1, e.to_string()))?;
        if pair.caption.trim().is_empty() {
            return Err(manifest_err(path, i + 1, "caption is empty"));
        }
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(manifest_err(path, 0, "manifest holds no pairs"));
    }
    Ok(pairs)
}

fn read_lines_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

impl ClassifyDataset {
    /// Loads `manifest.jsonl`, `classes.txt`, `templates.txt` and the
    /// optional `dataset.json` from a dataset directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.jsonl");
        let classes = read_lines_file(&dir.join("classes.txt"))?;
        if classes.is_empty() {
            return Err(Error::Dataset(
                dir.display().to_string(),
                "classes.txt holds no class names".into(),
            ));
        }
        let templates = read_lines_file(&dir.join("templates.txt"))?;

        let meta: DatasetMeta = match fs::read_to_string(dir.join("dataset.json")) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => DatasetMeta::default(),
            Err(e) => return Err(e.into()),
        };
        let name = meta.name.unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });

        let text = fs::read_to_string(&manifest_path)?;
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ClassifyLine = serde_json::from_str(line)
                .map_err(|e| manifest_err(&manifest_path, i + 1, e.to_string()))?;
            if parsed.label < 0 || parsed.label as usize >= classes.len() {
                return Err(manifest_err(
                    &manifest_path,
                    i + 1,
                    format!(
                        "label {} out of range for {} classes",
                        parsed.label,
                        classes.len()
                    ),
                ));
            }
            items.push(ClassifyItem {
                image: parsed.image,
                label: parsed.label as usize,
                split: parsed.split.unwrap_or(Split::Test),
            });
        }
        if items.is_empty() {
            return Err(manifest_err(&manifest_path, 0, "manifest holds no items"));
        }

        Ok(ClassifyDataset {
            name,
            metric: meta.metric.unwrap_or(MetricKind::Accuracy),
            classes,
            templates,
            items,
            root: dir.to_path_buf(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Items of one split, manifest order preserved.
    pub fn split_items(&self, split: Split) -> Vec<&ClassifyItem> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    /// Resolves an item's image path against the dataset root.
    pub fn image_path(&self, item: &ClassifyItem) -> PathBuf {
        if item.image.is_absolute() {
            item.image.clone()
        } else {
            self.root.join(&item.image)
        }
    }
}

/// Decodes and preprocesses a list of image files into one batch,
/// order preserved. Decode failures name the offending path.
pub fn load_image_batch<F: Real>(paths: &[PathBuf], spec: &ImageSpec) -> Result<ImageBatch<F>> {
    let decoded = indexed_map(paths.len(), |i| decode_image(&paths[i]));
    let mut images = Vec::with_capacity(decoded.len());
    for r in decoded {
        images.push(r?);
    }
    ImageBatch::preprocess(&images, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::TempDir;

    fn write_file(dir: &Path, name: &str, content: &str) {
        let mut f = fs::File::create(dir.join(name)).unwrap();
        f.write_all(content.as_bytes()).unwrap();
    }

    #[test]
    fn train_manifest_round_trips() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("train.jsonl");
        fs::write(
            &p,
            "{\"image\":\"a.png\",\"caption\":\"кот\"}\n\n{\"image\":\"b.png\",\"caption\":\"пёс\"}\n",
        )
        .unwrap();
        let pairs = read_train_manifest(&p).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].caption, "пёс");
    }

    #[test]
    fn malformed_train_line_reports_line_number() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("train.jsonl");
        fs::write(&p, "{\"image\":\"a.png\",\"caption\":\"x\"}\nnot json\n").unwrap();
        let err = read_train_manifest(&p).unwrap_err();
        match err {
            Error::ManifestLine { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn dataset_loads_with_defaults() {
        let dir = TempDir::new().unwrap();
        write_file(dir.path(), "classes.txt", "кот\nсобака\n");
        write_file(dir.path(), "templates.txt", "фото {}\n");
        write_file(
            dir.path(),
            "manifest.jsonl",
            "{\"image\":\"0.png\",\"label\":0}\n{\"image\":\"1.png\",\"label\":1,\"split\":\"train\"}\n",
        );
        let ds = ClassifyDataset::load(dir.path()).unwrap();
        assert_eq!(ds.metric, MetricKind::Accuracy);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.split_items(Split::Test).len(), 1);
        assert_eq!(ds.split_items(Split::Train).len(), 1);
    }

    #[test]
    fn dataset_meta_overrides_metric_and_name() {
        let dir = TempDir::new().unwrap();
        write_file(dir.path(), "classes.txt", "a\nb\n");
        write_file(dir.path(), "templates.txt", "{}\n");
        write_file(dir.path(), "manifest.jsonl", "{\"image\":\"0.png\",\"label\":1}\n");
        write_file(
            dir.path(),
            "dataset.json",
            "{\"name\":\"pets\",\"metric\":\"mean_per_class\"}",
        );
        let ds = ClassifyDataset::load(dir.path()).unwrap();
        assert_eq!(ds.name, "pets");
        assert_eq!(ds.metric, MetricKind::MeanPerClass);
    }

    #[test]
    fn out_of_range_label_names_the_line() {
        let dir = TempDir::new().unwrap();
        write_file(dir.path(), "classes.txt", "a\n");
        write_file(dir.path(), "templates.txt", "{}\n");
        write_file(dir.path(), "manifest.jsonl", "{\"image\":\"0.png\",\"label\":3}\n");
        let err = ClassifyDataset::load(dir.path()).unwrap_err();
        match err {
            Error::ManifestLine { line, reason, .. } => {
                assert_eq!(line, 1);
                assert!(reason.contains("label 3"));
            }
            other => panic!("wrong error: {other}"),
        }
    }
}

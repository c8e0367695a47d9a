//! End-to-end dataset paths: manifest loading, feature extraction against
//! the raw encoder, and a full zero-shot evaluation over files on disk.

mod common;

use std::fs;
use std::path::Path;

use common::{fixture_vocab, tiny_model};
use duoclip_core::data::{load_image_batch, ClassifyDataset, Split};
use duoclip_core::probe::{extract_features, probe_curve, ProbeConfig};
use duoclip_core::vision::{write_ppm, RasterImage};
use duoclip_core::zeroshot::{evaluate, MetricKind, Shots};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tempfile::TempDir;

/// Writes a small classification dataset: `per_class` images per class,
/// each class drawing pixels from its own bright color band so classes
/// are visually distinct.
fn write_dataset(dir: &Path, classes: &[&str], per_class: usize, test_per_class: usize) {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let mut manifest = String::new();
    for (label, _) in classes.iter().enumerate() {
        for i in 0..per_class + test_per_class {
            let name = format!("img_{label}_{i}.ppm");
            let base = 40 + 60 * label as i32;
            let data: Vec<u8> = (0..48 * 48 * 3)
                .map(|_| (base + rng.gen_range(-30..30)).clamp(0, 255) as u8)
                .collect();
            let img = RasterImage::new(48, 48, 3, data).unwrap();
            write_ppm(&dir.join(&name), &img).unwrap();
            let split = if i < per_class { "train" } else { "test" };
            manifest.push_str(&format!(
                "{{\"image\":\"{name}\",\"label\":{label},\"split\":\"{split}\"}}\n"
            ));
        }
    }
    fs::write(dir.join("manifest.jsonl"), manifest).unwrap();
    fs::write(dir.join("classes.txt"), classes.join("\n")).unwrap();
    fs::write(dir.join("templates.txt"), "фото {}\nкартинка {}\n").unwrap();
}

#[test]
fn extract_features_equals_direct_encoding() {
    let dir = TempDir::new().unwrap();
    write_dataset(dir.path(), &["кот", "собака"], 2, 1);
    let ds = ClassifyDataset::load(dir.path()).unwrap();
    let model = tiny_model(31);

    let feats = extract_features(&ds, Split::Test, &model).unwrap();
    let items = ds.split_items(Split::Test);
    let paths: Vec<_> = items.iter().map(|it| ds.image_path(it)).collect();
    let batch = load_image_batch::<f64>(&paths, &model.config.image.spec).unwrap();
    let direct = model.encode_image(&batch).unwrap();

    assert_eq!(feats.features, direct.vectors);
    assert_eq!(feats.labels, vec![0, 1]);
    for row in feats.features.rows() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    // Same dataset twice: bitwise identical features.
    let again = extract_features(&ds, Split::Test, &model).unwrap();
    assert_eq!(feats.features, again.features);
}

#[test]
fn zeroshot_evaluation_runs_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    write_dataset(dir.path(), &["кот", "собака", "дом"], 0, 2);
    let ds = ClassifyDataset::load(dir.path()).unwrap();
    let model = tiny_model(32);
    let vocab = fixture_vocab();

    let a = evaluate(&ds, &model, &vocab, 7).unwrap();
    let b = evaluate(&ds, &model, &vocab, 7).unwrap();
    assert_eq!(a.value, b.value);
    assert_eq!(a.metric, MetricKind::Accuracy);
    assert_eq!(a.shots, Shots::Zero);
    assert_eq!(a.model, "tiny");
    assert!((0.0..=1.0).contains(&a.value));
}

#[test]
fn roc_auc_dataset_uses_positive_class_scores() {
    let dir = TempDir::new().unwrap();
    write_dataset(dir.path(), &["обычное", "мем"], 0, 3);
    fs::write(
        dir.path().join("dataset.json"),
        "{\"name\":\"memes\",\"metric\":\"roc_auc\"}",
    )
    .unwrap();
    let ds = ClassifyDataset::load(dir.path()).unwrap();
    assert_eq!(ds.metric, MetricKind::RocAuc);
    let model = tiny_model(33);
    let vocab = fixture_vocab();
    let report = evaluate(&ds, &model, &vocab, 0).unwrap();
    assert_eq!(report.metric, MetricKind::RocAuc);
    assert!((0.0..=1.0).contains(&report.value));
}

#[test]
fn probe_curve_runs_over_files() {
    let dir = TempDir::new().unwrap();
    write_dataset(dir.path(), &["кот", "собака"], 4, 2);
    let ds = ClassifyDataset::load(dir.path()).unwrap();
    let model = tiny_model(34);
    let cfg = ProbeConfig::new(1, 5);
    let points = probe_curve(&ds, &model, &[1, 2], 2, &cfg).unwrap();
    assert_eq!(points.len(), 2);
    for p in &points {
        assert_eq!(p.per_seed.len(), 2);
        assert!((0.0..=1.0).contains(&p.mean));
    }
    // Color-banded classes are trivially separable in pixel space; the
    // random tiny encoder keeps enough of that signal for 2 shots.
    assert!(points[1].mean >= 0.5);
}

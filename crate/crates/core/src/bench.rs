//! Inference throughput measurement for the image tower.
//!
//! The timed region covers `encode_image` forward passes only: no image
//! decoding, no I/O, warmup iterations excluded. Reference throughput
//! numbers from the published GPU runs are stored as a fixture and used
//! purely for ordering assertions, never re-measured.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::{DualEncoder, ModelConfig};
use crate::error::{Error, Result};
use crate::float::Real;
use crate::util::worker_threads;
use crate::vision::{patch_grid, ImageBatch};

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_MEASURED: usize = 100;

/// Published reference throughput (iterations/second) in descending
/// order, measured on datacenter GPUs; desk runs only reuse the ordering.
pub const REFERENCE_THROUGHPUT: [(&str, f64); 4] = [
    ("vit-base-patch32-224", 308.84),
    ("vit-base-patch16-224", 155.35),
    ("vit-large-patch14-224", 49.95),
    ("vit-large-patch14-336", 22.11),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub preset: String,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub iters_per_sec: f64,
    pub wall_seconds: f64,
    pub hardware: String,
}

/// Free-text descriptor of the machine and threading mode the timing ran
/// under; reports from different descriptors are never compared silently.
pub fn hardware_descriptor() -> String {
    format!(
        "cpu/{}, {} thread(s)",
        std::env::consts::ARCH,
        worker_threads()
    )
}

/// Times `measured` forward passes of the image tower over a fixed batch.
pub fn run_bench<F: Real>(
    model: &DualEncoder<F>,
    images: &ImageBatch<F>,
    warmup: usize,
    measured: usize,
    hardware: &str,
) -> Result<BenchReport> {
    if measured == 0 {
        return Err(Error::InvalidBench("measured_iters must be >= 1".into()));
    }
    if images.batch_size() == 0 {
        return Err(Error::InvalidBench("empty image batch".into()));
    }
    for _ in 0..warmup {
        std::hint::black_box(model.encode_image(images)?);
    }
    let start = Instant::now();
    for _ in 0..measured {
        std::hint::black_box(model.encode_image(images)?);
    }
    let wall_seconds = start.elapsed().as_secs_f64().max(1e-12);
    Ok(BenchReport {
        preset: model.config.preset_name.clone(),
        batch_size: images.batch_size(),
        warmup_iters: warmup,
        measured_iters: measured,
        iters_per_sec: measured as f64 / wall_seconds,
        wall_seconds,
        hardware: hardware.to_string(),
    })
}

/// Rough forward FLOP count of one image-tower pass for one item;
/// only ratios between presets are meaningful.
pub fn forward_flops(config: &ModelConfig) -> Result<f64> {
    let spec = &config.image.spec;
    let grid = patch_grid(spec)?;
    let seq = grid.sequence_length as f64;
    let w = config.image.width as f64;
    let layers = config.image.layers as f64;
    let patches = (grid.patches_per_side * grid.patches_per_side) as f64;
    let embed = 2.0 * patches * spec.patch_dim() as f64 * w;
    // Per block: 4 projections, score/context products, 4x-wide MLP.
    let block = 8.0 * seq * w * w + 4.0 * seq * seq * w + 16.0 * seq * w * w;
    let head = 2.0 * w * config.joint_dim as f64;
    Ok(embed + layers * block + head)
}

/// One ranked row of a preset comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedRow {
    pub report: BenchReport,
    /// Fastest throughput divided by this row's; 1.0 for the leader.
    pub slowdown: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresetComparison {
    pub rows: Vec<RankedRow>,
    /// Set when reports came from differing hardware descriptors.
    pub warning: Option<String>,
}

/// Ranks reports by descending throughput (stable: ties keep input
/// order). Mixed batch sizes are an error; mixed hardware only warns.
pub fn compare_presets(reports: &[BenchReport]) -> Result<PresetComparison> {
    let Some(first) = reports.first() else {
        return Err(Error::InvalidBench("no reports to compare".into()));
    };
    if reports.iter().any(|r| r.batch_size != first.batch_size) {
        return Err(Error::InvalidBench(
            "reports mix batch sizes; rankings would be meaningless".into(),
        ));
    }
    let warning = if reports.iter().any(|r| r.hardware != first.hardware) {
        Some("reports come from different hardware descriptors; ranking is indicative only".into())
    } else {
        None
    };
    let mut rows: Vec<&BenchReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        b.iters_per_sec
            .partial_cmp(&a.iters_per_sec)
            .expect("finite throughput")
    });
    let fastest = rows[0].iters_per_sec;
    Ok(PresetComparison {
        rows: rows
            .into_iter()
            .map(|r| RankedRow {
                report: r.clone(),
                slowdown: fastest / r.iters_per_sec,
            })
            .collect(),
        warning,
    })
}

pub const BENCH_CSV_HEADER: &str = "preset,batch,iters_per_sec,wall_seconds,hardware";

impl BenchReport {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.6},{}",
            self.preset, self.batch_size, self.iters_per_sec, self.wall_seconds, self.hardware
        )
    }
}

impl PresetComparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_CSV_HEADER},slowdown\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.3}\n",
                row.report.to_csv_row(),
                row.slowdown
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(w) = &self.warning {
            out.push_str(&format!("warning: {w}\n"));
        }
        let name_w = self
            .rows
            .iter()
            .map(|r| r.report.preset.len())
            .max()
            .unwrap_or(6)
            .max(6);
        out.push_str(&format!(
            "{:name_w$}  {:>10}  {:>12}  {:>8}\n",
            "preset", "iters/sec", "wall_seconds", "slowdown"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:name_w$}  {:>10.2}  {:>12.4}  {:>8.2}\n",
                row.report.preset, row.report.iters_per_sec, row.report.wall_seconds, row.slowdown
            ));
        }
        out
    }
}

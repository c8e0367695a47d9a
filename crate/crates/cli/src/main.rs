//! `duoclip`: command-line entry point for the dual-encoder toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Every run logs
//! its configuration and seed to stderr so results are reproducible.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array4;
use rand::Rng;

use duoclip_core::bench::{hardware_descriptor, run_bench, BenchReport, BENCH_CSV_HEADER};
use duoclip_core::data::{load_image_batch, read_train_manifest, ClassifyDataset};
use duoclip_core::encoders::DualEncoder;
use duoclip_core::nn::Visit;
use duoclip_core::persistence::{load_checkpoint, preset_names, resolve_preset, save_checkpoint};
use duoclip_core::probe::{probe_curve, ProbeConfig, ProbePoint, DEFAULT_L2_REG, DEFAULT_MAX_ITER, DEFAULT_SEEDS};
use duoclip_core::tokenizer::{build_vocab, TokenBatch, Vocab};
use duoclip_core::training::{
    build_frozen_adapter, finetune_resolution, run_training, write_metrics_csv, TrainConfig,
    TrainState,
};
use duoclip_core::util::seeded_rng;
use duoclip_core::vision::ImageBatch;
use duoclip_core::zeroshot::{evaluate, similarity_report, EvalReport, MetricKind};

#[derive(Parser)]
#[command(name = "duoclip", version, about = "Dual-encoder contrastive vision-language toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Vocabulary tools.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Train a model from scratch on an image-caption manifest.
    Train(TrainArgs),
    /// Continue training a checkpoint: resolution change or frozen-backbone adapter.
    Finetune(FinetuneArgs),
    /// Zero-shot classification of a dataset directory.
    Zeroshot(ZeroshotArgs),
    /// Few-shot linear-probe curve over a dataset directory.
    Probe(ProbeArgs),
    /// Measure image-encoder inference throughput.
    Bench(BenchArgs),
    /// Cosine similarities between ad-hoc texts and images.
    Similarity(SimilarityArgs),
    /// Unpack a checkpoint into config, vocabulary, and tensor index.
    Export(ExportArgs),
}

#[derive(Subcommand)]
enum VocabCmd {
    /// Learn a byte-level BPE vocabulary from text.
    Build(VocabBuildArgs),
}

#[derive(clap::Args)]
struct VocabBuildArgs {
    /// Plain-text corpus, one caption per line.
    #[arg(long, conflicts_with = "manifest")]
    corpus: Option<PathBuf>,
    /// Training manifest (JSONL with "caption" fields) to use as corpus.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Target vocabulary size (bytes + specials + learned merges).
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSONL manifest of {"image", "caption"} pairs.
    #[arg(long)]
    manifest: PathBuf,
    /// Preset name; see `duoclip export` or the docs for the list.
    #[arg(long, default_value = "tiny")]
    preset: String,
    /// Vocabulary JSON; built from the manifest captions when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Warmup steps; defaults to 2% of total.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-step loss/lr/temperature CSV here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FinetuneArgs {
    /// Checkpoint to start from.
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// New input resolution; positional embeddings are resampled.
    #[arg(long)]
    resolution: Option<usize>,
    /// Freeze both towers and train only an image-head adapter.
    #[arg(long)]
    adapter: bool,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ZeroshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory: manifest.jsonl + classes.txt + templates.txt.
    #[arg(long)]
    dataset: PathBuf,
    /// Override the dataset's metric: accuracy | mean_per_class | roc_auc.
    #[arg(long, value_parser = parse_metric)]
    metric: Option<MetricKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(clap::Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated shot counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
    shots: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: usize,
    #[arg(long, default_value_t = DEFAULT_L2_REG)]
    l2_reg: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = duoclip_core::bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = duoclip_core::bench::DEFAULT_MEASURED)]
    iters: usize,
    /// Seed for the synthetic pixel batch.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(clap::Args)]
struct SimilarityArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Text prompt; repeat for several.
    #[arg(long = "text", required = true)]
    texts: Vec<String>,
    /// Image file; repeat for several.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for config.json, vocab.json, tensors.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    s.parse().map_err(|e: duoclip_core::Error| e.to_string())
}

/// Errors that already know their exit code: 1 usage, 2 data.
struct AppError {
    code: u8,
    msg: String,
}

impl AppError {
    fn usage(msg: impl Into<String>) -> Self {
        AppError { code: 1, msg: msg.into() }
    }

    fn data(msg: impl Into<String>) -> Self {
        AppError { code: 2, msg: msg.into() }
    }
}

impl From<duoclip_core::Error> for AppError {
    fn from(e: duoclip_core::Error) -> Self {
        AppError::data(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::data(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::data(e.to_string())
    }
}

type AppResult<T> = Result<T, AppError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // Malformed inputs must map to exit codes, never abort the process.
    let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(cli)));
    match run {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> AppResult<()> {
    match cli.cmd {
        Cmd::Vocab(VocabCmd::Build(a)) => vocab_build(a),
        Cmd::Train(a) => train(a),
        Cmd::Finetune(a) => finetune(a),
        Cmd::Zeroshot(a) => zeroshot(a),
        Cmd::Probe(a) => probe(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Similarity(a) => similarity(a),
        Cmd::Export(a) => export(a),
    }
}

/// Reproducibility log line: subcommand, seed, and the configuration
/// that fully determines the run.
fn log_run(cmd: &str, seed: u64, config: &serde_json::Value) {
    eprintln!("duoclip {cmd}: seed={seed} config={config}");
}

fn load_ckpt(path: &Path) -> AppResult<(DualEncoder<f32>, Vocab)> {
    let loaded = load_checkpoint(path)?;
    Ok((loaded.model, loaded.vocab))
}

/// Manifest image paths are relative to the manifest's directory.
fn resolve_pair_paths(manifest: &Path, pairs: &[duoclip_core::data::TrainPair]) -> Vec<PathBuf> {
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    pairs
        .iter()
        .map(|p| {
            if p.image.is_absolute() {
                p.image.clone()
            } else {
                root.join(&p.image)
            }
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> AppResult<()> {
    fs::write(path, text).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

fn vocab_build(a: VocabBuildArgs) -> AppResult<()> {
    let lines: Vec<String> = match (&a.corpus, &a.manifest) {
        (Some(path), None) => fs::read_to_string(path)
            .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        (None, Some(path)) => read_train_manifest(path)?
            .into_iter()
            .map(|p| p.caption)
            .collect(),
        _ => return Err(AppError::usage("pass exactly one of --corpus or --manifest")),
    };
    log_run(
        "vocab build",
        0,
        &serde_json::json!({"size": a.size, "lines": lines.len(), "out": a.out}),
    );
    let vocab = build_vocab(&lines, a.size)?;
    write_text(&a.out, &vocab.to_json())?;
    println!(
        "{}",
        serde_json::json!({
            "tokens": vocab.size(),
            "merges": vocab.merges().len(),
            "out": a.out,
        })
    );
    Ok(())
}

fn load_or_build_vocab(
    vocab: &Option<PathBuf>,
    captions: &[String],
    fallback_size: usize,
) -> AppResult<Vocab> {
    match vocab {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
            Ok(Vocab::from_json(&text)?)
        }
        None => {
            eprintln!("no --vocab given; building one from the manifest captions");
            Ok(build_vocab(captions, fallback_size)?)
        }
    }
}

fn train_config(
    batch: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    warmup: Option<usize>,
    weight_decay: f64,
) -> TrainConfig {
    let mut tc = TrainConfig::new(batch, steps, lr, seed);
    if let Some(w) = warmup {
        tc.warmup_steps = w;
    }
    tc.weight_decay = weight_decay;
    tc
}

/// Shared tail of train/finetune: step, optionally dump metrics, save.
fn run_and_save(
    mut state: TrainState<f32>,
    images: &ImageBatch<f32>,
    tokens: &TokenBatch,
    vocab: &Vocab,
    metrics: &Option<PathBuf>,
    out: &Path,
) -> AppResult<()> {
    let steps = state.config.total_steps;
    run_training(&mut state, images, tokens, steps)?;
    if let Some(path) = metrics {
        let file = fs::File::create(path)
            .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
        write_metrics_csv(file, &state.history)?;
    }
    save_checkpoint(&state.model, vocab, out)?;
    let last = state.history.last();
    println!(
        "{}",
        serde_json::json!({
            "preset": state.model.config.preset_name,
            "steps": steps,
            "final_loss": last.map(|s| s.loss),
            "temperature": last.map(|s| s.temperature),
            "parameters": state.model.param_count(),
            "out": out,
        })
    );
    Ok(())
}

fn train(a: TrainArgs) -> AppResult<()> {
    let pairs = read_train_manifest(&a.manifest)?;
    let captions: Vec<String> = pairs.iter().map(|p| p.caption.clone()).collect();
    let mut config = resolve_preset(&a.preset)?;
    let vocab = load_or_build_vocab(&a.vocab, &captions, config.text.vocab_size.min(512))?;
    // The checkpoint embeds the vocabulary; keep the table exactly as big.
    config.text.vocab_size = vocab.size();

    let tc = train_config(a.batch, a.steps, a.lr, a.seed, a.warmup, a.weight_decay);
    log_run(
        "train",
        a.seed,
        &serde_json::json!({"model": config, "train": tc, "pairs": pairs.len()}),
    );

    let tokens = TokenBatch::encode(&captions, &vocab, config.text.context_length)?;
    let paths = resolve_pair_paths(&a.manifest, &pairs);
    let images = load_image_batch::<f32>(&paths, &config.image.spec)?;
    let model = DualEncoder::<f32>::init(config, a.seed)?;
    let state = TrainState::new(model, tc)?;
    run_and_save(state, &images, &tokens, &vocab, &a.metrics, &a.out)
}

fn finetune(a: FinetuneArgs) -> AppResult<()> {
    let (model, vocab) = load_ckpt(&a.from)?;
    let mut tc = train_config(a.batch, a.steps, a.lr, a.seed, a.warmup, a.weight_decay);
    // Keep the learned logit scale instead of resetting it.
    tc.temperature_init = model.scale() as f64;

    let current = model.config.image.spec.resolution;
    let target = a.resolution.unwrap_or(current);
    let mut state = finetune_resolution(model, target, tc.clone())?;
    if a.adapter {
        state = build_frozen_adapter(state.model, tc)?;
    }
    log_run(
        "finetune",
        a.seed,
        &serde_json::json!({
            "model": state.model.config,
            "train": state.config,
            "from": a.from,
            "resolution": target,
        }),
    );

    let pairs = read_train_manifest(&a.manifest)?;
    let captions: Vec<String> = pairs.iter().map(|p| p.caption.clone()).collect();
    let tokens = TokenBatch::encode(&captions, &vocab, state.model.config.text.context_length)?;
    let paths = resolve_pair_paths(&a.manifest, &pairs);
    let images = load_image_batch::<f32>(&paths, &state.model.config.image.spec)?;
    run_and_save(state, &images, &tokens, &vocab, &a.metrics, &a.out)
}

fn eval_table(reports: &[&EvalReport]) -> String {
    let mut rows = vec![[
        "dataset".to_string(),
        "metric".to_string(),
        "value".to_string(),
        "model".to_string(),
        "shots".to_string(),
        "seed".to_string(),
    ]];
    for r in reports {
        rows.push([
            r.dataset.clone(),
            r.metric.to_string(),
            format!("{:.6}", r.value),
            r.model.clone(),
            r.shots.to_string(),
            r.seed.to_string(),
        ]);
    }
    render_table(&rows)
}

fn render_table<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (cell, w) in row.iter().zip(widths) {
            if !line.is_empty() {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:<w$}"));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn zeroshot(a: ZeroshotArgs) -> AppResult<()> {
    let (model, vocab) = load_ckpt(&a.ckpt)?;
    let mut ds = ClassifyDataset::load(&a.dataset)?;
    if let Some(m) = a.metric {
        ds.metric = m;
    }
    log_run(
        "zeroshot",
        a.seed,
        &serde_json::json!({
            "model": model.config,
            "dataset": ds.name,
            "classes": ds.num_classes(),
            "metric": ds.metric,
        }),
    );
    let report = evaluate(&ds, &model, &vocab, a.seed)?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&vec![&report])?),
        Format::Csv => {
            println!("{}", EvalReport::CSV_HEADER);
            println!("{}", report.to_csv_row());
        }
        Format::Table => print!("{}", eval_table(&[&report])),
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> AppResult<()> {
    let (model, vocab) = load_ckpt(&a.ckpt)?;
    let mut ds = ClassifyDataset::load(&a.dataset)?;
    let base = ProbeConfig {
        shots: a.shots[0],
        l2_reg: a.l2_reg,
        max_iter: a.max_iter,
        seed: a.seed,
    };
    log_run(
        "probe",
        a.seed,
        &serde_json::json!({
            "model": model.config,
            "dataset": ds.name,
            "shots": a.shots,
            "seeds": a.seeds,
            "l2_reg": a.l2_reg,
            "max_iter": a.max_iter,
        }),
    );
    let points = probe_curve(&ds, &model, &a.shots, a.seeds, &base)?;
    // The zero-shot reference row uses the same accuracy scale as the curve.
    let zero_shot: Option<EvalReport> = if ds.templates.is_empty() {
        None
    } else {
        ds.metric = MetricKind::Accuracy;
        Some(evaluate(&ds, &model, &vocab, a.seed)?)
    };
    print_probe(&points, zero_shot.as_ref(), &ds.name, a.format)
}

fn print_probe(
    points: &[ProbePoint],
    zero_shot: Option<&EvalReport>,
    dataset: &str,
    format: Format,
) -> AppResult<()> {
    match format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({
                "dataset": dataset,
                "zero_shot": zero_shot,
                "points": points,
            }))?
        ),
        Format::Csv => {
            println!("{}", EvalReport::CSV_HEADER);
            if let Some(z) = zero_shot {
                println!("{}", z.to_csv_row());
            }
            for p in points {
                for r in &p.per_seed {
                    println!("{}", r.to_csv_row());
                }
            }
        }
        Format::Table => {
            let mut rows = vec![[
                "shots".to_string(),
                "mean".to_string(),
                "per-seed".to_string(),
            ]];
            if let Some(z) = zero_shot {
                rows.push(["* zero".into(), format!("{:.4}", z.value), "-".into()]);
            }
            for p in points {
                let seeds = p
                    .per_seed
                    .iter()
                    .map(|r| format!("{:.4}", r.value))
                    .collect::<Vec<_>>()
                    .join(" ");
                rows.push([p.shots.to_string(), format!("{:.4}", p.mean), seeds]);
            }
            print!("{}", render_table(&rows));
        }
    }
    Ok(())
}

fn bench(a: BenchArgs) -> AppResult<()> {
    let (model, _) = load_ckpt(&a.ckpt)?;
    let spec = model.config.image.spec.clone();
    log_run(
        "bench",
        a.seed,
        &serde_json::json!({
            "model": model.config,
            "batch": a.batch,
            "warmup": a.warmup,
            "iters": a.iters,
        }),
    );
    let mut rng = seeded_rng(a.seed);
    let pixels = Array4::<f32>::from_shape_fn(
        (a.batch, 3, spec.resolution, spec.resolution),
        |_| rng.gen_range(-2.0..2.0),
    );
    let images = ImageBatch::from_pixels(pixels, spec);
    let report = run_bench(&model, &images, a.warmup, a.iters, &hardware_descriptor())?;
    print_bench(&report, a.format)
}

fn print_bench(r: &BenchReport, format: Format) -> AppResult<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(r)?),
        Format::Csv => {
            println!("{BENCH_CSV_HEADER}");
            println!("{}", r.to_csv_row());
        }
        Format::Table => {
            let rows = [
                [
                    "preset".to_string(),
                    "batch".to_string(),
                    "iters_per_sec".to_string(),
                    "wall_seconds".to_string(),
                    "hardware".to_string(),
                ],
                [
                    r.preset.clone(),
                    r.batch_size.to_string(),
                    format!("{:.2}", r.iters_per_sec),
                    format!("{:.4}", r.wall_seconds),
                    r.hardware.clone(),
                ],
            ];
            print!("{}", render_table(&rows));
        }
    }
    Ok(())
}

fn similarity(a: SimilarityArgs) -> AppResult<()> {
    let (model, vocab) = load_ckpt(&a.ckpt)?;
    log_run(
        "similarity",
        0,
        &serde_json::json!({
            "model": model.config,
            "texts": a.texts.len(),
            "images": a.images.len(),
        }),
    );
    let images = load_image_batch::<f32>(&a.images, &model.config.image.spec)?;
    let names: Vec<String> = a
        .images
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    let report = similarity_report(&a.texts, &names, &images, &model, &vocab)?;
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Csv => print!("{}", report.to_csv()),
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

fn export(a: ExportArgs) -> AppResult<()> {
    let (model, vocab) = load_ckpt(&a.ckpt)?;
    log_run(
        "export",
        0,
        &serde_json::json!({"model": model.config, "out": a.out, "presets": preset_names()}),
    );
    fs::create_dir_all(&a.out)
        .map_err(|e| AppError::data(format!("{}: {e}", a.out.display())))?;
    write_text(
        &a.out.join("config.json"),
        &serde_json::to_string_pretty(&model.config)?,
    )?;
    write_text(&a.out.join("vocab.json"), &vocab.to_json())?;

    struct Index {
        rows: String,
        tensors: usize,
        parameters: usize,
    }
    impl Visit<f32> for Index {
        fn leaf(&mut self, name: &str, shape: &[usize], data: &[f32]) {
            let dims = shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            self.rows.push_str(&format!("{name},{dims},{}\n", data.len()));
            self.tensors += 1;
            self.parameters += data.len();
        }
    }
    let mut index = Index {
        rows: String::from("name,shape,elements\n"),
        tensors: 0,
        parameters: 0,
    };
    model.visit(&mut index);
    write_text(&a.out.join("tensors.csv"), &index.rows)?;
    println!(
        "{}",
        serde_json::json!({
            "out": a.out,
            "tensors": index.tensors,
            "parameters": index.parameters,
        })
    );
    Ok(())
}

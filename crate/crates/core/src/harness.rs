//! Experiment driver behind the `man` command line: data generation,
//! multi-seed runs, comparisons, gradient checks and checkpoint evaluation.

use crate::checkpoint::{self, CheckpointError};
use crate::data::{Dataset, MultimodalExample, Splits};
use crate::datagen::{self, dominant_truth, DatagenError, DominantTruth};
use crate::dataio::{self, DataIoError, ExperimentConfig, ReadStatus};
use crate::fusion::{build_variant, FusionError, Variant, VariantPlan};
use crate::layers::Task;
use crate::training::{
    fit, run_pipeline, EpochRecord, Evaluation, MetricName, TrainConfig, TrainError, TrainedModel,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    DataIo(#[from] DataIoError),
    #[error("generation: {0}")]
    Datagen(#[from] DatagenError),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{variant}: every seed diverged")]
    AllDiverged { variant: String },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::DataIo(DataIoError::Io { .. }) | HarnessError::Io { .. } => 1,
            HarnessError::DataIo(_)
            | HarnessError::Datagen(_)
            | HarnessError::Validation(_)
            | HarnessError::Checkpoint(_) => 2,
            HarnessError::Train(TrainError::InvalidConfig { .. })
            | HarnessError::Train(TrainError::InvalidLabel { .. })
            | HarnessError::Train(TrainError::EmptySplit(_)) => 2,
            HarnessError::Train(_) => 1,
            HarnessError::AllDiverged { .. } => 3,
        }
    }
}

impl From<FusionError> for HarnessError {
    fn from(e: FusionError) -> Self {
        HarnessError::Validation(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenFile {
    pub split: String,
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub generator: datagen::GenConfig,
    pub files: Vec<GenFile>,
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub files: [PathBuf; 3],
    pub manifest: PathBuf,
    /// SHA-256 of the manifest bytes.
    pub manifest_hash: String,
}

pub const GEN_MANIFEST_FILE: &str = "manifest.json";

/// Writes the train/val/test files named in `cfg.data` from its `[generate]`
/// section, plus `manifest.json` beside the train file.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<GenOutput> {
    let gen = cfg
        .generate
        .as_ref()
        .ok_or_else(|| HarnessError::Validation("config has no [generate] section".into()))?
        .to_gen_config();
    let splits = datagen::generate(&gen)?;
    let paths = [
        cfg.data.train.clone(),
        cfg.data.val.clone(),
        cfg.data.test.clone(),
    ];
    let mut files = Vec::new();
    for ((name, ds), path) in ["train", "val", "test"]
        .into_iter()
        .zip([&splits.train, &splits.val, &splits.test])
        .zip(&paths)
    {
        let text = dataio::dataset_to_string(ds);
        write_file(path, &text)?;
        files.push(GenFile {
            split: name.into(),
            file: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            records: ds.len(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = GenManifest {
        generator: gen,
        files,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    let manifest_path = paths[0]
        .parent()
        .unwrap_or(Path::new("."))
        .join(GEN_MANIFEST_FILE);
    write_file(&manifest_path, &bytes)?;
    Ok(GenOutput {
        files: paths,
        manifest: manifest_path,
        manifest_hash: sha256_hex(&bytes),
    })
}

// ---------------------------------------------------------------------------
// data loading

/// Loaded splits plus a hash identifying the exact file contents.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub splits: Splits,
    pub hash: String,
    pub warnings: Vec<String>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let mut hasher = Sha256::new();
    let mut sets = Vec::new();
    let mut warnings = Vec::new();
    for (name, path) in [
        ("train", &cfg.data.train),
        ("val", &cfg.data.val),
        ("test", &cfg.data.test),
    ] {
        let bytes = fs::read(path).map_err(io_err(path))?;
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        let text = String::from_utf8(bytes).map_err(|_| DataIoError::Parse {
            path: path.clone(),
            line: 0,
            message: "not UTF-8".into(),
        })?;
        let (ds, status) = dataio::parse_dataset(&text, path)?;
        if status == ReadStatus::Empty {
            warnings.push(format!("{}: no records", path.display()));
        }
        check_dataset(cfg, &ds, path)?;
        sets.push(ds);
    }
    let hash = hex(&hasher.finalize());
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(LoadedData {
        splits: Splits { train, val, test },
        hash,
        warnings,
    })
}

fn check_dataset(cfg: &ExperimentConfig, ds: &Dataset, path: &Path) -> Result<()> {
    if ds.is_empty() {
        return Ok(());
    }
    let bad = |msg: String| HarnessError::Validation(format!("{}: {msg}", path.display()));
    let mut names: Vec<&String> = ds.modality_order.iter().collect();
    let mut want: Vec<&String> = cfg.modalities.iter().map(|m| &m.name).collect();
    names.sort();
    want.sort();
    if names != want {
        return Err(bad(format!(
            "modalities {:?} do not match the config {:?}",
            ds.modality_order,
            cfg.modalities.iter().map(|m| &m.name).collect::<Vec<_>>()
        )));
    }
    for (name, dim) in ds.feature_dims() {
        let m = cfg
            .modalities
            .iter()
            .find(|m| m.name == name)
            .expect("names match");
        if m.input_dim != dim {
            return Err(bad(format!(
                "modality '{name}' has feature_dim {dim}, config says input_dim {}",
                m.input_dim
            )));
        }
    }
    if let Task::Classification { classes } = cfg.training.task {
        for (i, ex) in ds.examples.iter().enumerate() {
            if ex.class_index().is_none_or(|c| c >= classes) {
                return Err(bad(format!(
                    "record {} ('{}'): label {} is not a class index below {classes}",
                    i + 1,
                    ex.id,
                    ex.label
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV

/// `epoch,split,loss,metric_name,metric_value[,w_<modality>...]`.
pub fn epoch_csv(records: &[EpochRecord], attention_modalities: Option<&[String]>) -> String {
    let mut out = String::from("epoch,split,loss,metric_name,metric_value");
    if let Some(names) = attention_modalities {
        for n in names {
            let _ = write!(out, ",w_{n}");
        }
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            r.split.as_str(),
            r.loss,
            r.metric.name.as_str(),
            r.metric.value
        );
        if let Some(names) = attention_modalities {
            match &r.attention_means {
                Some(w) => w.iter().for_each(|v| {
                    let _ = write!(out, ",{v}");
                }),
                None => names.iter().for_each(|_| out.push(',')),
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// timing

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub epoch_seconds: f64,
    pub inference_ms: f64,
    /// Standard deviation of `inference_ms` over the repetitions.
    pub inference_ms_std: f64,
}

pub const TIMING_EPOCHS: usize = 3;
pub const TIMING_REPS: usize = 3;

/// Per-example inference milliseconds over `data`: one warm-up pass, then
/// the mean and standard deviation of [`TIMING_REPS`] timed passes.
pub fn measure_inference(
    model: &TrainedModel,
    data: &[MultimodalExample],
    task: Task,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    model.evaluate(data, task)?;
    let mut reps = Vec::with_capacity(TIMING_REPS);
    for _ in 0..TIMING_REPS {
        let t0 = Instant::now();
        std::hint::black_box(model.evaluate(data, task)?);
        reps.push(t0.elapsed().as_secs_f64() * 1e3 / data.len() as f64);
    }
    Ok(mean_std(&reps))
}

/// Training epoch seconds averaged over [`TIMING_EPOCHS`] epochs run on a
/// copy of `model`, plus [`measure_inference`] on `test`.
pub fn measure_timing(
    model: &TrainedModel,
    train: &[MultimodalExample],
    test: &[MultimodalExample],
    cfg: &TrainConfig,
) -> Result<Timing> {
    let timing_cfg = TrainConfig {
        max_epochs: TIMING_EPOCHS,
        early_stop_patience: TIMING_EPOCHS,
        ..*cfg
    };
    let val = if test.is_empty() { train } else { test };
    let epoch_seconds = match model {
        TrainedModel::Fused(m) => {
            fit(m.clone(), train, val, &timing_cfg, "timing")?.mean_epoch_seconds()
        }
        TrainedModel::Unimodal(n) => fit(
            n.clone(),
            &only(train, &n.modality),
            &only(val, &n.modality),
            &timing_cfg,
            "timing",
        )?
        .mean_epoch_seconds(),
    };
    let (inference_ms, inference_ms_std) = measure_inference(model, test, cfg.task)?;
    Ok(Timing {
        epoch_seconds,
        inference_ms,
        inference_ms_std,
    })
}

fn only(data: &[MultimodalExample], modality: &str) -> Vec<MultimodalExample> {
    data.iter().filter_map(|e| e.only(modality)).collect()
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub metric_name: String,
    pub best_val: f64,
    /// A^C for classification, sign accuracy (A^2) for regression.
    pub test_accuracy: f64,
    pub test_mae: Option<f64>,
    pub mean_epoch_seconds: f64,
    pub inference_ms: f64,
    pub inference_ms_std: f64,
    /// Train-split mean attention per modality at the best epoch.
    pub best_attention: Option<Vec<f64>>,
    /// Share of single-informative-modality test examples whose largest
    /// attention weight falls on that modality.
    pub attention_agreement: Option<f64>,
    pub epochs_csv: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStatus {
    pub seed: u64,
    pub result: Option<RunResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub modality_order: Vec<String>,
    pub dataset_hash: String,
    pub seeds: Vec<SeedStatus>,
}

impl RunSummary {
    pub fn results(&self) -> impl Iterator<Item = &RunResult> {
        self.seeds.iter().filter_map(|s| s.result.as_ref())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(SUMMARY_JSON);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))
    }
}

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Directory name for a variant (`unimodal:text` → `unimodal-text`).
pub fn variant_dir(variant: &Variant) -> String {
    variant.to_string().replace(':', "-")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1 }
    }
}

/// Runs `cfg.variant` for every seed in `cfg.seeds` and writes, under
/// `<output_dir>/<variant>/`: the resolved config, `summary.csv`,
/// `summary.json`, and per seed `seed-<n>/epochs.csv`,
/// `seed-<n>/pretrain-<modality>.csv` and `seed-<n>/model.ckpt`.
///
/// A diverging seed is recorded and the others continue; the call fails
/// only when every seed diverges.
pub fn cmd_run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunSummary> {
    let data = load_data(cfg)?;
    run_loaded(cfg, &data, opts)
}

pub fn run_loaded(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    opts: RunOptions,
) -> Result<RunSummary> {
    let plan = build_variant(
        &cfg.modality_dims(),
        cfg.model.attention_dim,
        cfg.training.task,
        &cfg.variant,
    )?;
    if data.splits.train.is_empty() || data.splits.val.is_empty() {
        return Err(HarnessError::Validation(
            "train and val splits must be non-empty".into(),
        ));
    }
    let dir = cfg.output_dir.join(variant_dir(&cfg.variant));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    dataio::echo_config(cfg, &dir)?;

    let seed_run = |&seed: &u64| match run_seed(cfg, &plan, &data.splits, seed, &dir) {
        Ok(r) => Ok(SeedStatus {
            seed,
            result: Some(r),
            error: None,
        }),
        Err(HarnessError::Train(e @ TrainError::Divergence { .. })) => Ok(SeedStatus {
            seed,
            result: None,
            error: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .expect("thread pool");
    let seeds: Vec<SeedStatus> =
        pool.install(|| cfg.seeds.par_iter().map(seed_run).collect::<Result<_>>())?;

    let summary = RunSummary {
        variant: cfg.variant.to_string(),
        modality_order: plan.modalities.iter().map(|m| m.name.clone()).collect(),
        dataset_hash: data.hash.clone(),
        seeds,
    };
    write_file(
        &dir.join(SUMMARY_JSON),
        serde_json::to_vec_pretty(&summary).expect("summary serialises"),
    )?;
    write_file(&dir.join(SUMMARY_CSV), summary_csv(&summary))?;
    if summary.results().next().is_none() {
        return Err(HarnessError::AllDiverged {
            variant: summary.variant,
        });
    }
    Ok(summary)
}

fn run_seed(
    cfg: &ExperimentConfig,
    plan: &VariantPlan,
    splits: &Splits,
    seed: u64,
    dir: &Path,
) -> Result<RunResult> {
    let seed_dir = dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&seed_dir).map_err(io_err(&seed_dir))?;
    let task = cfg.training.task;
    let train = restrict(plan, &splits.train.examples);
    let val = restrict(plan, &splits.val.examples);
    let test = restrict(plan, &splits.test.examples);
    let out = run_pipeline(plan, &train, &val, &cfg.training, seed)?;

    for (name, stage) in &out.pretrain {
        write_file(
            &seed_dir.join(format!("pretrain-{name}.csv")),
            epoch_csv(&stage.records, None),
        )?;
    }
    let order = out.model.modality_order();
    let attention_names = out.model.has_attention().then_some(order.as_slice());
    let epochs_csv = seed_dir.join(EPOCHS_CSV);
    write_file(&epochs_csv, epoch_csv(&out.records, attention_names))?;
    let ckpt = seed_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, plan, &out.model)?;

    let (test_accuracy, test_mae, agreement) = if test.is_empty() {
        (f64::NAN, None, None)
    } else {
        let ev = out.model.evaluate(&test, task)?;
        let acc = ev.accuracy.or(ev.binary_accuracy).unwrap_or(f64::NAN);
        (acc, ev.mae, attention_agreement(&ev, &test, &order))
    };
    let (inference_ms, inference_ms_std) = measure_inference(&out.model, &test, task)?;
    Ok(RunResult {
        variant: plan.variant.to_string(),
        seed,
        best_epoch: out.best_epoch,
        metric_name: MetricName::for_task(task).as_str().into(),
        best_val: out.best_val.value,
        test_accuracy,
        test_mae,
        mean_epoch_seconds: out.mean_epoch_seconds,
        inference_ms,
        inference_ms_std,
        best_attention: out.best_attention,
        attention_agreement: agreement,
        epochs_csv,
        checkpoint: ckpt,
    })
}

fn restrict(plan: &VariantPlan, data: &[MultimodalExample]) -> Vec<MultimodalExample> {
    match &plan.variant {
        Variant::Unimodal(m) => only(data, m),
        _ => data.to_vec(),
    }
}

/// Fraction of examples with a single informative modality whose attention
/// argmax is that modality. `None` without attention or such examples.
pub fn attention_agreement(
    ev: &Evaluation,
    data: &[MultimodalExample],
    order: &[String],
) -> Option<f64> {
    let att = ev.attention.as_ref()?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (ex, w) in data.iter().zip(att) {
        if let Some(DominantTruth::Single(m)) = dominant_truth(ex) {
            total += 1;
            if order.get(crate::fusion::argmax(w)) == Some(&m) {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// One row per seed, then `mean` and `std` rows over the successful seeds.
pub fn summary_csv(summary: &RunSummary) -> String {
    let mut out = String::from(
        "variant,seed,status,best_epoch,best_val,test_accuracy,test_mae,epoch_seconds,inference_ms,inference_ms_std\n",
    );
    for s in &summary.seeds {
        match &s.result {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{},{},ok,{},{},{},{},{},{},{}",
                    r.variant,
                    r.seed,
                    r.best_epoch,
                    r.best_val,
                    r.test_accuracy,
                    opt(r.test_mae),
                    r.mean_epoch_seconds,
                    r.inference_ms,
                    r.inference_ms_std
                );
            }
            None => {
                let _ = writeln!(out, "{},{},diverged,,,,,,,", summary.variant, s.seed);
            }
        }
    }
    let rows: Vec<&RunResult> = summary.results().collect();
    if rows.is_empty() {
        return out;
    }
    let col =
        |f: &dyn Fn(&RunResult) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    let cols = [
        col(&|r| r.best_epoch as f64),
        col(&|r| r.best_val),
        col(&|r| r.test_accuracy),
        col(&|r| r.test_mae.unwrap_or(f64::NAN)),
        col(&|r| r.mean_epoch_seconds),
        col(&|r| r.inference_ms),
        col(&|r| r.inference_ms_std),
    ];
    let has_mae = rows.iter().all(|r| r.test_mae.is_some());
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let _ = write!(out, "{},{label},", summary.variant);
        for (i, c) in cols.iter().enumerate() {
            let v = if pick == 0 { c.0 } else { c.1 };
            out.push(',');
            if i == 3 && !has_mae {
                continue;
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// compare

/// Published accuracy for a variant, shown for orientation only.
pub fn paper_reference(variant: &str) -> Option<(f64, &'static str)> {
    let v: Variant = variant.parse().ok()?;
    Some(match v {
        Variant::Man => (0.784, "MAN"),
        Variant::ManMinusPretraining => (0.765, "MAN - pre-training"),
        Variant::ManMinusAttention => (0.762, "MAN - Atten."),
        Variant::Unimodal(_) => (0.756, "Text Only"),
        Variant::LfLstm => (0.747, "LF-LSTM w/o pre-training"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub variant: String,
    pub seeds: usize,
    pub accuracy: (f64, f64),
    pub mae: Option<(f64, f64)>,
    pub epoch_seconds: (f64, f64),
    pub inference_ms: (f64, f64),
    pub paper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delta {
    pub from: String,
    pub to: String,
    /// Mean accuracy of `to` minus mean accuracy of `from`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub dataset_hash: String,
    pub rows: Vec<CompareRow>,
    pub deltas: Vec<Delta>,
}

pub fn cmd_compare(summaries: &[RunSummary]) -> Result<CompareReport> {
    if summaries.len() < 2 {
        return Err(HarnessError::Validation(
            "compare needs at least two result sets".into(),
        ));
    }
    let hash = &summaries[0].dataset_hash;
    if let Some(other) = summaries.iter().find(|s| &s.dataset_hash != hash) {
        return Err(HarnessError::Validation(format!(
            "dataset hash mismatch: {} has {}, {} has {}",
            summaries[0].variant, hash, other.variant, other.dataset_hash
        )));
    }
    let rows: Vec<CompareRow> = summaries
        .iter()
        .map(|s| {
            let rs: Vec<&RunResult> = s.results().collect();
            let ms = |f: &dyn Fn(&RunResult) -> f64| {
                mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            CompareRow {
                variant: s.variant.clone(),
                seeds: rs.len(),
                accuracy: ms(&|r| r.test_accuracy),
                mae: rs
                    .iter()
                    .all(|r| r.test_mae.is_some())
                    .then(|| ms(&|r| r.test_mae.unwrap_or(f64::NAN))),
                epoch_seconds: ms(&|r| r.mean_epoch_seconds),
                inference_ms: ms(&|r| r.inference_ms),
                paper: paper_reference(&s.variant).map(|p| p.0),
            }
        })
        .collect();
    let mut deltas = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            deltas.push(Delta {
                from: rows[i].variant.clone(),
                to: rows[j].variant.clone(),
                accuracy: rows[j].accuracy.0 - rows[i].accuracy.0,
            });
        }
    }
    Ok(CompareReport {
        dataset_hash: hash.clone(),
        rows,
        deltas,
    })
}

impl CompareReport {
    pub fn to_markdown(&self) -> String {
        let pm = |(m, s): (f64, f64)| format!("{m:.4} ± {s:.4}");
        let mut out = format!("dataset sha256: {}\n\n", self.dataset_hash);
        out.push_str(
            "| variant | seeds | accuracy | MAE | epoch s | inference ms | paper A² * |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.variant,
                r.seeds,
                pm(r.accuracy),
                r.mae.map_or("-".into(), pm),
                pm(r.epoch_seconds),
                pm(r.inference_ms),
                r.paper.map_or("-".into(), |p| format!("{p:.3}")),
            );
        }
        out.push_str(
            "\n\\* Published CMU-MOSI figures, listed for orientation. Different data and hardware; not reproducible here.\n",
        );
        if !self.deltas.is_empty() {
            out.push_str("\n| from | to | Δ accuracy |\n|---|---|---|\n");
            for d in &self.deltas {
                let _ = writeln!(out, "| {} | {} | {:+.4} |", d.from, d.to, d.accuracy);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// gradcheck / eval

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub ops: Vec<(&'static str, f64)>,
    pub man_forward: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.ops
            .iter()
            .map(|o| o.1)
            .fold(self.man_forward, f64::max)
    }
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        ops: crate::tensor::gradcheck::op_suite(seed, GRADCHECK_EPS),
        man_forward: crate::fusion::man_gradient_check(seed, GRADCHECK_EPS)?,
    })
}

/// Metrics plus one line per example (`id`, label, prediction and, for
/// attention models, one weight per modality).
pub fn cmd_eval(checkpoint_path: &Path, data_path: &Path) -> Result<String> {
    let (manifest, model) = checkpoint::load(checkpoint_path)?;
    let (ds, _) = dataio::read_dataset(data_path)?;
    let order = model.modality_order();
    let data: Vec<MultimodalExample> = match &manifest.variant {
        Variant::Unimodal(m) => only(&ds.examples, m),
        _ => ds.examples.clone(),
    };
    if data.is_empty() {
        return Err(HarnessError::Validation(format!(
            "{}: no usable examples",
            data_path.display()
        )));
    }
    let ev = model.evaluate(&data, manifest.task)?;
    let mut out = format!(
        "variant {}\nexamples {}\nloss {}\n{} {}\n",
        manifest.variant,
        data.len(),
        ev.loss,
        ev.metric.name.as_str(),
        ev.metric.value
    );
    if let Some(b) = ev.binary_accuracy {
        let _ = writeln!(out, "binary_accuracy {b}");
    }
    if let Some(a) = attention_agreement(&ev, &data, &order) {
        let _ = writeln!(out, "attention_agreement {a}");
    }
    out.push_str("\nid,label,prediction");
    if ev.attention.is_some() {
        for m in &order {
            let _ = write!(out, ",w_{m}");
        }
    }
    out.push('\n');
    for (i, ex) in data.iter().enumerate() {
        let _ = write!(out, "{},{},{}", ex.id, ex.label, ev.predictions[i]);
        if let Some(att) = &ev.attention {
            for w in &att[i] {
                let _ = write!(out, ",{w:.4}");
            }
        }
        out.push('\n');
    }
    Ok(out)
}

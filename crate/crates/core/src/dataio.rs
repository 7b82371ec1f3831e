//! Dataset (JSON lines) and experiment config (TOML) files.
//!
//! See `docs/formats.md` for the field tables.

use crate::data::{Dataset, MultimodalExample};
use crate::datagen::{self, GenConfig, LabelSpec, ModalitySpec, DEFAULT_SPLIT};
use crate::fusion::{default_attention_dim, ModalityDims, Variant};
use crate::layers::ModalitySequence;
use crate::training::{TrainConfig, TrainError};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {field}: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },
    #[error("{path}: {message}")]
    ConfigSyntax { path: PathBuf, message: String },
    #[error("{path}: unknown field(s) {}", fields.join(", "))]
    UnknownFields { path: PathBuf, fields: Vec<String> },
    #[error("{path}: {field}: {reason}")]
    Config {
        path: PathBuf,
        field: String,
        reason: String,
    },
}

pub type Result<T, E = DataIoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataIoError + '_ {
    move |source| DataIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: f64,
    modalities: IndexMap<String, Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    informative_set: Option<Vec<String>>,
}

/// Outcome flag for a successful read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadStatus {
    Ok,
    /// The file held no records.
    Empty,
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(Dataset, ReadStatus)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset(&text, path)
}

/// Parses JSON-lines text; `path` is only used in error messages.
pub fn parse_dataset(text: &str, path: &Path) -> Result<(Dataset, ReadStatus)> {
    let mut order: Vec<String> = Vec::new();
    let mut dims: Vec<usize> = Vec::new();
    let mut examples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |field: String, reason: String| DataIoError::Record {
            path: path.to_path_buf(),
            line,
            field,
            reason,
        };
        let rec: Record = serde_json::from_str(raw).map_err(|e| DataIoError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !rec.label.is_finite() {
            return Err(bad("label".into(), "not a finite number".into()));
        }
        if rec.modalities.is_empty() {
            return Err(bad("modalities".into(), "no modalities".into()));
        }
        if examples.is_empty() {
            order = rec.modalities.keys().cloned().collect();
            dims = vec![0; order.len()];
        } else if rec.modalities.len() != order.len()
            || order.iter().any(|m| !rec.modalities.contains_key(m))
        {
            let got: Vec<&str> = rec.modalities.keys().map(String::as_str).collect();
            return Err(bad(
                "modalities".into(),
                format!("modality set {got:?} differs from {order:?}"),
            ));
        }
        let mut modalities = IndexMap::with_capacity(order.len());
        for (slot, name) in order.iter().enumerate() {
            let rows = &rec.modalities[name];
            let field = format!("modalities.{name}");
            if rows.is_empty() {
                return Err(bad(field, "no timesteps".into()));
            }
            let width = rows[0].len();
            if width == 0 {
                return Err(bad(format!("{field}[0]"), "empty feature row".into()));
            }
            for (t, row) in rows.iter().enumerate() {
                if row.len() != width {
                    return Err(bad(
                        format!("{field}[{t}]"),
                        format!("row has {} features, expected {width}", row.len()),
                    ));
                }
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(bad(format!("{field}[{t}][{j}]"), "non-finite value".into()));
                }
            }
            if examples.is_empty() {
                dims[slot] = width;
            } else if width != dims[slot] {
                return Err(bad(
                    field,
                    format!("feature_dim {width}, earlier records have {}", dims[slot]),
                ));
            }
            let seq = ModalitySequence::from_rows(name.clone(), rows)
                .map_err(|e| bad(format!("modalities.{name}"), e.to_string()))?;
            modalities.insert(name.clone(), seq);
        }
        if let Some(set) = &rec.informative_set {
            if let Some(m) = set.iter().find(|m| !order.contains(m)) {
                return Err(bad(
                    "informative_set".into(),
                    format!("unknown modality '{m}'"),
                ));
            }
        }
        examples.push(MultimodalExample {
            id: rec.id,
            label: rec.label,
            modalities,
            informative_set: rec.informative_set,
        });
    }
    let status = if examples.is_empty() {
        ReadStatus::Empty
    } else {
        ReadStatus::Ok
    };
    Ok((Dataset::new(order, examples), status))
}

/// Canonical bytes: one record per line, keys in a fixed order, modalities
/// in dataset order, shortest round-trip float formatting.
pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut out = String::new();
    for ex in &ds.examples {
        let modalities = ds
            .modality_order
            .iter()
            .filter_map(|m| ex.modalities.get(m).map(|s| (m, s)))
            .map(|(m, s)| {
                let rows = (0..s.timesteps()).map(|t| s.step(t).to_vec()).collect();
                (m.clone(), rows)
            })
            .collect();
        let rec = Record {
            id: ex.id.clone(),
            label: ex.label,
            modalities,
            informative_set: ex.informative_set.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialise"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(dataset_to_string(ds).as_bytes())
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Experiment config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub input_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
}

pub const DEFAULT_HIDDEN_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            attention_dim: None,
        }
    }
}

/// Synthetic data section used by `man gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub n_examples: usize,
    pub seed: u64,
    pub split: [f64; 3],
    pub labels: LabelSpec,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub modalities: Vec<ModalitySpec>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            preset: None,
            n_examples: 2000,
            seed: 0,
            split: DEFAULT_SPLIT,
            labels: LabelSpec::Classification { classes: 2 },
            modalities: Vec::new(),
        }
    }
}

impl GenerateConfig {
    pub fn to_gen_config(&self) -> GenConfig {
        GenConfig {
            specs: self.modalities.clone(),
            n_examples: self.n_examples,
            labels: self.labels,
            seed: self.seed,
            split: self.split,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataPaths,
    #[serde(default)]
    pub modalities: Vec<ModalityConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateConfig>,
}

impl ExperimentConfig {
    /// Per-modality dimensions, after defaults are resolved.
    pub fn modality_dims(&self) -> Vec<ModalityDims> {
        self.modalities
            .iter()
            .map(|m| ModalityDims {
                name: m.name.clone(),
                input_dim: m.input_dim,
                hidden_dim: m.hidden_dim.unwrap_or(self.model.hidden_dim),
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Ignore unknown keys instead of failing.
    pub permissive: bool,
    /// Require the dataset files to exist.
    pub check_files: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            permissive: false,
            check_files: true,
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    load_config_with(path, LoadOptions::default())
}

pub fn load_config_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let abs = std::path::absolute(path).map_err(io_err(path))?;
    let base = abs.parent().unwrap_or(Path::new("/"));
    parse_config(&text, path, base, opts)
}

/// Parses and resolves config text. Relative paths are taken against `base`.
pub fn parse_config(
    text: &str,
    path: &Path,
    base: &Path,
    opts: LoadOptions,
) -> Result<ExperimentConfig> {
    let mut unknown = Vec::new();
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_ignored::deserialize(de, |p| unknown.push(p.to_string()))
        .map_err(|e| DataIoError::ConfigSyntax {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if !unknown.is_empty() && !opts.permissive {
        return Err(DataIoError::UnknownFields {
            path: path.to_path_buf(),
            fields: unknown,
        });
    }
    resolve(cfg, path, base, opts)
}

fn resolve(
    mut cfg: ExperimentConfig,
    path: &Path,
    base: &Path,
    opts: LoadOptions,
) -> Result<ExperimentConfig> {
    let invalid = |field: &str, reason: String| DataIoError::Config {
        path: path.to_path_buf(),
        field: field.to_string(),
        reason,
    };
    let abs = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    cfg.data.train = abs(&cfg.data.train);
    cfg.data.val = abs(&cfg.data.val);
    cfg.data.test = abs(&cfg.data.test);
    cfg.output_dir = abs(&cfg.output_dir);

    if let Some(gen) = &mut cfg.generate {
        if let Some(name) = gen.preset.take() {
            if !gen.modalities.is_empty() {
                return Err(invalid(
                    "generate.modalities",
                    "give either a preset or modality specs, not both".into(),
                ));
            }
            gen.modalities =
                datagen::preset(&name).map_err(|e| invalid("generate.preset", e.to_string()))?;
        }
        gen.to_gen_config()
            .validate()
            .map_err(|e| invalid("generate", e.to_string()))?;
        if cfg.modalities.is_empty() {
            cfg.modalities = gen
                .modalities
                .iter()
                .map(|s| ModalityConfig {
                    name: s.name.clone(),
                    input_dim: s.feature_dim,
                    hidden_dim: None,
                })
                .collect();
        }
    }

    if cfg.modalities.is_empty() {
        return Err(invalid(
            "modalities",
            "at least one modality is required".into(),
        ));
    }
    if cfg.model.hidden_dim == 0 {
        return Err(invalid("model.hidden_dim", "must be positive".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for (i, m) in cfg.modalities.iter_mut().enumerate() {
        if !seen.insert(m.name.clone()) {
            return Err(invalid(
                &format!("modalities[{i}].name"),
                format!("duplicate modality '{}'", m.name),
            ));
        }
        if m.input_dim == 0 {
            return Err(invalid(
                &format!("modalities[{i}].input_dim"),
                "must be positive".into(),
            ));
        }
        let h = *m.hidden_dim.get_or_insert(cfg.model.hidden_dim);
        if h == 0 {
            return Err(invalid(
                &format!("modalities[{i}].hidden_dim"),
                "must be positive".into(),
            ));
        }
    }
    let n = 2 * cfg.modalities[0].hidden_dim.unwrap_or(cfg.model.hidden_dim);
    match cfg.model.attention_dim {
        Some(0) => return Err(invalid("model.attention_dim", "must be positive".into())),
        Some(_) => {}
        None => cfg.model.attention_dim = Some(default_attention_dim(n)),
    }
    if cfg.seeds.is_empty() {
        return Err(invalid("seeds", "at least one seed is required".into()));
    }
    if let Variant::Unimodal(m) = &cfg.variant {
        if !cfg.modalities.iter().any(|c| &c.name == m) {
            return Err(invalid("variant", format!("unknown modality '{m}'")));
        }
    }
    cfg.training.validate().map_err(|e| match e {
        TrainError::InvalidConfig { field, reason } => {
            invalid(&format!("training.{field}"), reason)
        }
        other => invalid("training", other.to_string()),
    })?;
    crate::fusion::build_variant(
        &cfg.modality_dims(),
        cfg.model.attention_dim,
        cfg.training.task,
        &cfg.variant,
    )
    .map_err(|e| invalid("modalities", e.to_string()))?;
    if opts.check_files {
        for (field, p) in [
            ("data.train", &cfg.data.train),
            ("data.val", &cfg.data.val),
            ("data.test", &cfg.data.test),
        ] {
            if !p.is_file() {
                return Err(invalid(field, format!("file not found: {}", p.display())));
            }
        }
    }
    Ok(cfg)
}

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Writes the resolved config into `dir` and returns the file path.
pub fn echo_config(cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Task;

    fn seq(name: &str, rows: &[&[f64]]) -> ModalitySequence<f64> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        ModalitySequence::from_rows(name, &rows).unwrap()
    }

    fn small() -> Dataset {
        let ex = |id: &str, label: f64, a: &[&[f64]], v: &[&[f64]]| MultimodalExample {
            id: id.into(),
            label,
            modalities: IndexMap::from([
                ("a".to_string(), seq("a", a)),
                ("v".to_string(), seq("v", v)),
            ]),
            informative_set: Some(vec!["a".into()]),
        };
        Dataset::new(
            vec!["a".into(), "v".into()],
            vec![
                ex("x0", 1.0, &[&[0.1, -2.5], &[1e-300, 3.0]], &[&[7.0]]),
                ex("x1", 0.0, &[&[1.0 / 3.0, 0.0]], &[&[-0.0], &[2.0]]),
            ],
        )
    }

    fn parse(text: &str) -> Result<(Dataset, ReadStatus)> {
        parse_dataset(text, Path::new("mem.jsonl"))
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ds = small();
        let a = dataset_to_string(&ds);
        let (back, status) = parse(&a).unwrap();
        assert_eq!(status, ReadStatus::Ok);
        assert_eq!(back, ds);
        assert_eq!(dataset_to_string(&back), a);
    }

    #[test]
    fn point_one_survives_exactly() {
        let (back, _) = parse(&dataset_to_string(&small())).unwrap();
        assert_eq!(
            back.examples[0].modalities["a"].features()[0].to_bits(),
            0.1f64.to_bits()
        );
        assert_eq!(
            back.examples[1].modalities["a"].features()[0].to_bits(),
            (1.0f64 / 3.0).to_bits()
        );
    }

    #[test]
    fn canonical_line_layout() {
        let text = dataset_to_string(&small());
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"id":"x0","label":1.0,"modalities":{"a":[[0.1,-2.5],[1e-300,3.0]],"v":[[7.0]]},"informative_set":["a"]}"#
        );
    }

    #[test]
    fn empty_file_reads_with_status() {
        let (ds, status) = parse("").unwrap();
        assert!(ds.is_empty());
        assert_eq!(status, ReadStatus::Empty);
        assert_eq!(dataset_to_string(&ds), "");
    }

    #[test]
    fn feature_dim_change_names_line() {
        let text = "{\"id\":\"a\",\"label\":0,\"modalities\":{\"acoustic\":[[1,2,3,4]]}}\n\
                    {\"id\":\"b\",\"label\":1,\"modalities\":{\"acoustic\":[[1,2,3,4,5]]}}\n";
        match parse(text) {
            Err(DataIoError::Record { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "modalities.acoustic");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_errors() {
        let set = "{\"id\":\"a\",\"label\":0,\"modalities\":{\"x\":[[1]]}}\n{\"id\":\"b\",\"label\":0,\"modalities\":{\"y\":[[1]]}}";
        assert!(matches!(
            parse(set),
            Err(DataIoError::Record { line: 2, .. })
        ));
        let ragged = "{\"id\":\"a\",\"label\":0,\"modalities\":{\"x\":[[1,2],[3]]}}";
        match parse(ragged) {
            Err(DataIoError::Record { field, .. }) => assert_eq!(field, "modalities.x[1]"),
            other => panic!("{other:?}"),
        }
        let syntax = "\n{\"id\":\"a\",";
        assert!(matches!(
            parse(syntax),
            Err(DataIoError::Parse { line: 2, .. })
        ));
        let huge = "{\"id\":\"a\",\"label\":0,\"modalities\":{\"x\":[[1e999]]}}";
        assert!(parse(huge).is_err());
        let extra = "{\"id\":\"a\",\"label\":0,\"modalities\":{\"x\":[[1]]},\"note\":1}";
        assert!(matches!(
            parse(extra),
            Err(DataIoError::Parse { line: 1, .. })
        ));
        let informative =
            "{\"id\":\"a\",\"label\":0,\"modalities\":{\"x\":[[1]]},\"informative_set\":[\"z\"]}";
        assert!(matches!(
            parse(informative),
            Err(DataIoError::Record { .. })
        ));
    }

    #[test]
    fn hand_written_fixture() {
        let text = r#"{"id":"r1","label":1,"modalities":{"text":[[0.5,1.0,0.0],[0.25,0.0,1.0]],"audio":[[1.0,2.0]]}}
{"id":"r2","label":0,"modalities":{"text":[[0.0,0.0,0.0]],"audio":[[3.0,4.0],[5.0,6.0],[7.0,8.0]]}}
{"id":"r3","label":2,"modalities":{"audio":[[0.0,1.0]],"text":[[1.0,1.0,1.0],[2.0,2.0,2.0]]},"informative_set":["text"]}
"#;
        let (ds, _) = parse(text).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.modality_order, ["text", "audio"]);
        let shape = |i: usize, m: &str| {
            let s = ds.examples[i].sequence(m).unwrap();
            (s.timesteps(), s.feature_dim())
        };
        assert_eq!(shape(0, "text"), (2, 3));
        assert_eq!(shape(0, "audio"), (1, 2));
        assert_eq!(shape(1, "audio"), (3, 2));
        assert_eq!(shape(2, "text"), (2, 3));
        assert_eq!(ds.examples[2].class_index(), Some(2));
        // r3 is re-emitted in dataset modality order
        let out = dataset_to_string(&ds);
        assert!(out
            .lines()
            .nth(2)
            .unwrap()
            .contains(r#""modalities":{"text""#));
    }

    const MINIMAL: &str = r#"
[data]
train = "train.jsonl"
val = "val.jsonl"
test = "test.jsonl"

[[modalities]]
name = "text"
input_dim = 5

[[modalities]]
name = "audio"
input_dim = 3
"#;

    fn load(text: &str) -> Result<ExperimentConfig> {
        let opts = LoadOptions {
            permissive: false,
            check_files: false,
        };
        parse_config(text, Path::new("cfg.toml"), Path::new("/base"), opts)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = load(MINIMAL).unwrap();
        assert_eq!(cfg.training.learning_rate, 1e-3);
        assert_eq!(cfg.training.early_stop_patience, 10);
        assert_eq!(cfg.training.task, Task::Classification { classes: 2 });
        assert_eq!(cfg.variant, Variant::Man);
        assert_eq!(cfg.seeds, [0]);
        assert_eq!(cfg.data.train, Path::new("/base/train.jsonl"));
        assert_eq!(cfg.output_dir, Path::new("/base/runs"));
        assert_eq!(cfg.modalities[1].hidden_dim, Some(DEFAULT_HIDDEN_DIM));
        // N = 16, k = 8
        assert_eq!(cfg.model.attention_dim, Some(8));
    }

    #[test]
    fn small_embedding_uses_minimum_k() {
        let text = format!("{MINIMAL}\n[model]\nhidden_dim = 2\n");
        assert_eq!(load(&text).unwrap().model.attention_dim, Some(4));
        let text = format!("{MINIMAL}\n[model]\nhidden_dim = 7\n");
        assert_eq!(load(&text).unwrap().model.attention_dim, Some(7));
    }

    #[test]
    fn negative_learning_rate_names_field() {
        let text = format!("{MINIMAL}\n[training]\nlearning_rate = -0.1\n");
        match load(&text) {
            Err(DataIoError::Config { field, .. }) => assert_eq!(field, "training.learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_strict_and_permissive() {
        let text = format!("{MINIMAL}\n[training]\nlerning_rate = 0.1\n");
        match load(&text) {
            Err(DataIoError::UnknownFields { fields, .. }) => {
                assert_eq!(fields, ["training.lerning_rate"])
            }
            other => panic!("{other:?}"),
        }
        let opts = LoadOptions {
            permissive: true,
            check_files: false,
        };
        let cfg = parse_config(&text, Path::new("c"), Path::new("/b"), opts).unwrap();
        assert_eq!(cfg.training.learning_rate, 1e-3);
        let shape = format!("{MINIMAL}\n[model]\nhidden_dim = 0\nextra = 1\n");
        assert!(matches!(
            parse_config(&shape, Path::new("c"), Path::new("/b"), opts),
            Err(DataIoError::Config { .. })
        ));
    }

    #[test]
    fn type_errors_carry_key() {
        let text = format!("{MINIMAL}\n[training]\nbatch_size = \"big\"\n");
        let err = load(&text).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
    }

    #[test]
    fn echo_reloads_equal() {
        let text = format!(
            "variant = \"man-no-pretraining\"\nseeds = [3, 1]\n{MINIMAL}\n[training]\nlearning_rate = 0.003\n\n[training.task]\nkind = \"regression\"\n"
        );
        let cfg = load(&text).unwrap();
        let again = load(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn generate_section_resolves_preset() {
        let text = r#"
[data]
train = "d/train.jsonl"
val = "d/val.jsonl"
test = "d/test.jsonl"

[generate]
preset = "fast_slow"
n_examples = 1000
seed = 7
"#;
        let cfg = load(text).unwrap();
        let gen = cfg.generate.as_ref().unwrap();
        assert!(gen.preset.is_none());
        assert_eq!(gen.modalities, datagen::fast_slow());
        assert_eq!(cfg.modalities.len(), 2);
        assert_eq!(cfg.modalities[0].input_dim, gen.modalities[0].feature_dim);
        assert_eq!(load(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn config_validation() {
        let dup = MINIMAL.replace("\"audio\"", "\"text\"");
        match load(&dup) {
            Err(DataIoError::Config { field, .. }) => assert_eq!(field, "modalities[1].name"),
            other => panic!("{other:?}"),
        }
        let uni = format!("variant = \"unimodal:video\"\n{MINIMAL}");
        assert!(load(&uni).is_err());
        let uneven = MINIMAL.replace("input_dim = 3", "input_dim = 3\nhidden_dim = 2");
        assert!(load(&uneven).is_err());
        assert!(load(&format!("seeds = []\n{MINIMAL}")).is_err());
        let missing = parse_config(
            MINIMAL,
            Path::new("c"),
            Path::new("/nonexistent"),
            LoadOptions::default(),
        );
        match missing {
            Err(DataIoError::Config { field, .. }) => assert_eq!(field, "data.train"),
            other => panic!("{other:?}"),
        }
    }
}

//! Synthetic multimodal datasets with controllable per-modality difficulty.
//!
//! Every (class, modality) pair gets a fixed prototype vector. An example
//! draws a label, then for each modality decides whether it is informative
//! (probability `availability`). Informative modalities add the class
//! prototype, scaled by `signal_gain`, to `⌈fraction·T⌉` randomly chosen
//! timesteps; every timestep of every modality gets Gaussian noise.

use crate::data::{Dataset, MultimodalExample, Splits};
use crate::layers::ModalitySequence;
use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatagenError {
    #[error("modality '{modality}': {field} {reason}")]
    InvalidSpec {
        modality: String,
        field: &'static str,
        reason: String,
    },
    #[error("at least one modality is required")]
    NoModalities,
    #[error("duplicate modality name '{0}'")]
    DuplicateModality(String),
    #[error("n_examples must be at least 10, got {0}")]
    TooFewExamples(usize),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid score range [{0}, {1}]")]
    ScoreRange(f64, f64),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    SplitFractions([f64; 3]),
    #[error("unknown preset '{0}' (expected fast_slow or dominant)")]
    UnknownPreset(String),
}

pub type Result<T, E = DatagenError> = std::result::Result<T, E>;

/// Generation knobs for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub feature_dim: usize,
    pub timesteps: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Scale of the class prototype.
    pub signal_gain: f64,
    /// Fraction of timesteps that carry the prototype.
    pub signal_timestep_fraction: f64,
    /// Probability that the modality is informative on an example.
    pub availability: f64,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(DatagenError::InvalidSpec {
                modality: self.name.clone(),
                field,
                reason: reason.to_string(),
            })
        };
        if self.name.is_empty() {
            return bad("name", "must not be empty");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1");
        }
        if self.timesteps == 0 {
            return bad("timesteps", "must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be a finite number >= 0");
        }
        if !self.signal_gain.is_finite() {
            return bad("signal_gain", "must be finite");
        }
        if !(0.0..=1.0).contains(&self.signal_timestep_fraction) {
            return bad("signal_timestep_fraction", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.availability) {
            return bad("availability", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// Number of timesteps that carry signal on an informative example.
    pub fn signal_steps(&self) -> usize {
        ((self.signal_timestep_fraction * self.timesteps as f64).ceil() as usize)
            .min(self.timesteps)
    }
}

/// Label space of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelSpec {
    Classification {
        classes: usize,
    },
    /// `levels` latent classes mapped to evenly spaced scores in
    /// `[low, high]`, plus N(0, 0.1²) jitter.
    Regression {
        levels: usize,
        low: f64,
        high: f64,
    },
}

impl LabelSpec {
    fn latent_classes(self) -> usize {
        match self {
            LabelSpec::Classification { classes } => classes,
            LabelSpec::Regression { levels, .. } => levels,
        }
    }
}

/// Standard deviation of the regression label jitter.
pub const SCORE_JITTER: f64 = 0.1;

/// Default train / val / test fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub specs: Vec<ModalitySpec>,
    pub n_examples: usize,
    pub labels: LabelSpec,
    pub seed: u64,
    pub split: [f64; 3],
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(DatagenError::NoModalities);
        }
        for (i, s) in self.specs.iter().enumerate() {
            s.validate()?;
            if self.specs[..i].iter().any(|o| o.name == s.name) {
                return Err(DatagenError::DuplicateModality(s.name.clone()));
            }
        }
        if self.n_examples < 10 {
            return Err(DatagenError::TooFewExamples(self.n_examples));
        }
        if self.labels.latent_classes() < 2 {
            return Err(DatagenError::TooFewClasses(self.labels.latent_classes()));
        }
        if let LabelSpec::Regression { low, high, .. } = self.labels {
            if !(low < high && low.is_finite() && high.is_finite()) {
                return Err(DatagenError::ScoreRange(low, high));
            }
        }
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(DatagenError::SplitFractions(self.split));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: floors of the first two fractions, the
    /// remainder to test.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_examples;
        let train = (self.split[0] * n as f64 + 1e-9).floor() as usize;
        let val = (self.split[1] * n as f64 + 1e-9).floor() as usize;
        (train, val, n - train - val)
    }
}

/// Per-(class, modality) prototypes, `[class][modality]`, each of length
/// `feature_dim` and norm `signal_gain · sqrt(feature_dim)`. When there are
/// no more classes than features they are made exactly orthogonal.
fn prototypes(rng: &mut ChaCha8Rng, specs: &[ModalitySpec], classes: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(specs.len()); classes];
    for spec in specs {
        let d = spec.feature_dim;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for _ in 0..classes {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            if classes <= d {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        let scale = spec.signal_gain * (d as f64).sqrt();
        for (c, b) in basis.into_iter().enumerate() {
            out[c].push(b.into_iter().map(|x| x * scale).collect());
        }
    }
    out
}

/// Generates a dataset and splits it. Pure function of `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Splits> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = cfg.labels.latent_classes();
    let protos = prototypes(&mut rng, &cfg.specs, classes);
    let names: Vec<String> = cfg.specs.iter().map(|s| s.name.clone()).collect();
    let jitter = Normal::new(0.0, SCORE_JITTER).expect("jitter");

    let mut examples = Vec::with_capacity(cfg.n_examples);
    for i in 0..cfg.n_examples {
        let class = rng.random_range(0..classes);
        let mut informative: Vec<bool> = cfg
            .specs
            .iter()
            .map(|s| rng.random_bool(s.availability))
            .collect();
        if !informative.iter().any(|&b| b) {
            let j = rng.random_range(0..cfg.specs.len());
            informative[j] = true;
        }
        let mut modalities = IndexMap::with_capacity(cfg.specs.len());
        for (j, spec) in cfg.specs.iter().enumerate() {
            let (t, d) = (spec.timesteps, spec.feature_dim);
            let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
            let mut data: Vec<f64> = (0..t * d).map(|_| noise.sample(&mut rng)).collect();
            if informative[j] {
                for step in sample(&mut rng, t, spec.signal_steps()).into_iter() {
                    for (k, p) in protos[class][j].iter().enumerate() {
                        data[step * d + k] += p;
                    }
                }
            }
            let seq = ModalitySequence::new(spec.name.clone(), t, d, data)
                .expect("finite by construction");
            modalities.insert(spec.name.clone(), seq);
        }
        let label = match cfg.labels {
            LabelSpec::Classification { .. } => class as f64,
            LabelSpec::Regression { levels, low, high } => {
                low + (high - low) * class as f64 / (levels - 1) as f64 + jitter.sample(&mut rng)
            }
        };
        let informative_set = names
            .iter()
            .zip(&informative)
            .filter(|(_, &b)| b)
            .map(|(n, _)| n.clone())
            .collect();
        examples.push(MultimodalExample {
            id: format!("ex{i:06}"),
            label,
            modalities,
            informative_set: Some(informative_set),
        });
    }

    let (n_train, n_val, _) = cfg.split_sizes();
    let test = examples.split_off(n_train + n_val);
    let val = examples.split_off(n_train);
    Ok(Splits {
        train: Dataset::new(names.clone(), examples),
        val: Dataset::new(names.clone(), val),
        test: Dataset::new(names, test),
    })
}

/// Ground-truth salient modality of a generated example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DominantTruth {
    Single(String),
    Tie(Vec<String>),
}

/// The informative set of an example, as a single modality when only one
/// carries signal. `None` for examples without ground truth.
pub fn dominant_truth(example: &MultimodalExample) -> Option<DominantTruth> {
    let set = example.informative_set.as_ref()?;
    Some(match set.as_slice() {
        [one] => DominantTruth::Single(one.clone()),
        many => DominantTruth::Tie(many.to_vec()),
    })
}

/// Named presets.
pub fn preset(name: &str) -> Result<Vec<ModalitySpec>> {
    match name {
        "fast_slow" => Ok(fast_slow()),
        "dominant" => Ok(dominant()),
        other => Err(DatagenError::UnknownPreset(other.to_string())),
    }
}

fn spec(
    name: &str,
    timesteps: usize,
    noise: f64,
    gain: f64,
    fraction: f64,
    availability: f64,
) -> ModalitySpec {
    ModalitySpec {
        name: name.to_string(),
        feature_dim: 4,
        timesteps,
        noise_sigma: noise,
        signal_gain: gain,
        signal_timestep_fraction: fraction,
        availability,
    }
}

/// Two modalities. `fast` carries its pattern on every step of a short
/// sequence and is learned within a few epochs. `slow` is cleaner per step
/// but hides two signal steps in a 20-step sequence, so it takes several
/// times as many epochs and tops out lower.
pub fn fast_slow() -> Vec<ModalitySpec> {
    vec![
        spec("fast", 6, 1.5, 1.0, 1.0, 0.85),
        spec("slow", 20, 1.0, 1.0, 0.1, 0.8),
    ]
}

/// Three modalities, each informative on a minority of examples, so the
/// salient modality varies from example to example. `language` is
/// informative most often.
pub fn dominant() -> Vec<ModalitySpec> {
    vec![
        spec("language", 6, 1.2, 1.0, 1.0, 0.5),
        spec("acoustic", 6, 1.2, 1.0, 1.0, 0.3),
        spec("visual", 6, 1.2, 1.0, 1.0, 0.3),
    ]
}

//! In-memory multimodal examples and datasets.

use crate::layers::ModalitySequence;
use crate::scalar::Scalar;
use indexmap::IndexMap;

/// One labelled bundle of per-modality sequences.
///
/// `label` holds a class index (as an exact integer) for classification and
/// a real score for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample<T = f64> {
    pub id: String,
    pub label: f64,
    pub modalities: IndexMap<String, ModalitySequence<T>>,
    /// Modalities that carry label signal, when known (synthetic data).
    pub informative_set: Option<Vec<String>>,
}

impl<T: Scalar> MultimodalExample<T> {
    pub fn sequence(&self, modality: &str) -> Option<&ModalitySequence<T>> {
        self.modalities.get(modality)
    }

    /// Class index of the label, if it is a non-negative integer.
    pub fn class_index(&self) -> Option<usize> {
        (self.label >= 0.0 && self.label.fract() == 0.0).then_some(self.label as usize)
    }

    pub fn cast<U: Scalar>(&self) -> MultimodalExample<U> {
        MultimodalExample {
            id: self.id.clone(),
            label: self.label,
            modalities: self
                .modalities
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            informative_set: self.informative_set.clone(),
        }
    }

    /// Same example restricted to a single modality.
    pub fn only(&self, modality: &str) -> Option<Self> {
        let seq = self.modalities.get(modality)?.clone();
        Some(Self {
            id: self.id.clone(),
            label: self.label,
            modalities: IndexMap::from([(modality.to_string(), seq)]),
            informative_set: self.informative_set.clone(),
        })
    }
}

/// Ordered examples sharing one modality set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub modality_order: Vec<String>,
    pub examples: Vec<MultimodalExample>,
}

impl Dataset {
    pub fn new(modality_order: Vec<String>, examples: Vec<MultimodalExample>) -> Self {
        Self {
            modality_order,
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Feature width of each modality, taken from the first example.
    pub fn feature_dims(&self) -> Vec<(String, usize)> {
        self.modality_order
            .iter()
            .map(|m| {
                let dim = self
                    .examples
                    .first()
                    .and_then(|e| e.sequence(m))
                    .map_or(0, |s| s.feature_dim());
                (m.clone(), dim)
            })
            .collect()
    }
}

/// Train / validation / test partition of one generated or loaded corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

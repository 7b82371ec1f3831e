//! Modality attention and the fused multimodal model.
//!
//! Each modality is encoded to an `N`-vector; the vectors are stacked into
//! `H` (`m × N`) and scored by
//!
//! ```text
//! weights = softmax( W2 · tanh(W1 · Hᵀ + b1) + b2 )      W1: k×N, W2: 1×k
//! ```
//!
//! giving one weight per modality. The fused vector is the concatenation of
//! `w_i · h_i`, which a dense head maps to logits (or a scalar score).
//!
//! Late fusion ([`Fusion::Concat`]) skips the attention block and feeds the
//! raw concatenation to the head, which is the same as pinning every weight
//! to 1.

use crate::data::MultimodalExample;
use crate::layers::{
    bilstm_encode, bilstm_encode_batch, init_uniform, linear, LayerError, Linear, LinearVars,
    Parameterized, SubNetwork, SubNetworkVars, Task,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("example '{example}' is missing modality '{modality}'")]
    MissingModality { example: String, modality: String },
    #[error("modality '{modality}': embedding dimension {got}, expected {expected}")]
    EmbeddingDim {
        modality: String,
        expected: usize,
        got: usize,
    },
    #[error("attention block expects N={expected}, got {got}")]
    AttentionDim { expected: usize, got: usize },
    #[error("fused head expects input {expected} and output {outputs}, got {got:?}")]
    HeadShape {
        expected: usize,
        outputs: usize,
        got: Vec<usize>,
    },
    #[error("sub-network '{0}' still has its prediction head")]
    HeadPresent(String),
    #[error("a fused model needs at least one modality")]
    NoModalities,
    #[error("{weights} attention weights for {modalities} modalities")]
    WeightCount { weights: usize, modalities: usize },
    #[error("unknown modality '{0}'")]
    UnknownModality(String),
    #[error("unknown variant '{0}' (expected man, man-no-attention, man-no-pretraining, lf-lstm or unimodal:<modality>)")]
    UnknownVariant(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

/// Attention width used when none is configured: `max(⌈N/2⌉, 4)`.
pub fn default_attention_dim(embedding_dim: usize) -> usize {
    embedding_dim.div_ceil(2).max(4)
}

// ---------------------------------------------------------------------------
// Attention block

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock<T> {
    /// `k × N`
    pub w1: Tensor<T>,
    /// `k × 1`, broadcast over the `m` modality columns.
    pub b1: Tensor<T>,
    /// `1 × k`
    pub w2: Tensor<T>,
    /// `1 × 1`, shared by all modality logits.
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<T: Scalar> AttentionBlock<T> {
    /// Random `W1`; `W2` and both biases start at zero, so the initial weights are uniform.
    pub fn new<R: Rng + ?Sized>(embedding_dim: usize, k: usize, rng: &mut R) -> Self {
        assert!(k >= 1, "attention width must be at least 1");
        Self {
            w1: init_uniform(k, embedding_dim, rng),
            b1: Tensor::zeros(&[k, 1]).with_requires_grad(true),
            w2: Tensor::zeros(&[1, k]).with_requires_grad(true),
            b2: Tensor::zeros(&[1, 1]).with_requires_grad(true),
        }
    }

    pub fn zeroed(embedding_dim: usize, k: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[k, embedding_dim]).with_requires_grad(true),
            b1: Tensor::zeros(&[k, 1]).with_requires_grad(true),
            w2: Tensor::zeros(&[1, k]).with_requires_grad(true),
            b2: Tensor::zeros(&[1, 1]).with_requires_grad(true),
        }
    }

    pub fn from_parts(w1: Tensor<T>, b1: Tensor<T>, w2: Tensor<T>, b2: T) -> Result<Self> {
        let (k, n) = match w1.shape() {
            &[k, n] => (k, n),
            s => {
                return Err(TensorError::Rank {
                    op: "attention w1",
                    expected: 2,
                    shape: s.to_vec(),
                }
                .into())
            }
        };
        if b1.shape() != [k, 1] || w2.shape() != [1, k] || k == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention parameters",
                left: vec![k, n],
                right: w2.shape().to_vec(),
            }
            .into());
        }
        Ok(Self {
            w1: w1.with_requires_grad(true),
            b1: b1.with_requires_grad(true),
            w2: w2.with_requires_grad(true),
            b2: Tensor::scalar(b2).with_requires_grad(true),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> AttentionVars {
        AttentionVars {
            w1: g.param(&self.w1),
            b1: g.param(&self.b1),
            w2: g.param(&self.w2),
            b2: g.param(&self.b2),
        }
    }

    /// Weights for a stack of embeddings, outside any training graph.
    pub fn weights(&self, stack: &EmbeddingStack<T>) -> Result<AttentionWeights<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let ht = g.constant(stack.transposed());
        let w = attention_weights(&mut g, &vars, ht)?;
        Ok(AttentionWeights {
            weights: g.value(w).data().to_vec(),
        })
    }

    /// Pre-softmax scores `W2 · tanh(W1 · Hᵀ + b1) + b2`, one per modality.
    pub fn logits(&self, stack: &EmbeddingStack<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let ht = g.constant(stack.transposed());
        let l = attention_logits(&mut g, &vars, ht)?;
        Ok(g.value(l).data().to_vec())
    }
}

impl<T: Scalar> Parameterized<T> for AttentionBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

/// The `m × N` matrix of modality embeddings, rows in `modality_order`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStack<T> {
    pub modality_order: Vec<String>,
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> EmbeddingStack<T> {
    pub fn new(modality_order: Vec<String>, rows: Vec<Vec<T>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(FusionError::NoModalities);
        }
        if modality_order.len() != rows.len() {
            return Err(FusionError::WeightCount {
                weights: rows.len(),
                modalities: modality_order.len(),
            });
        }
        let n = rows[0].len();
        for (name, r) in modality_order.iter().zip(&rows) {
            if r.len() != n {
                return Err(FusionError::EmbeddingDim {
                    modality: name.clone(),
                    expected: n,
                    got: r.len(),
                });
            }
        }
        Ok(Self {
            modality_order,
            rows,
        })
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn n(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i]
    }

    /// `Hᵀ` as an `N × m` tensor.
    pub fn transposed(&self) -> Tensor<T> {
        let (m, n) = (self.m(), self.n());
        let mut data = vec![T::zero(); m * n];
        for (i, r) in self.rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                data[j * m + i] = v;
            }
        }
        Tensor::matrix(n, m, data).expect("stack shape")
    }
}

/// One salience weight per modality; entries in (0, 1) summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub weights: Vec<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }
}

pub(crate) fn argmax<T: PartialOrd>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// `1 × m` pre-softmax attention scores from `Hᵀ` (`N × m`).
pub fn attention_logits<T: Scalar>(g: &mut Graph<T>, att: &AttentionVars, h_t: Var) -> Result<Var> {
    let n = g.shape(att.w1)[1];
    let got = g.shape(h_t)[0];
    if got != n {
        return Err(FusionError::AttentionDim { expected: n, got });
    }
    let proj = g.matmul(att.w1, h_t)?;
    let shifted = g.add(proj, att.b1)?;
    let act = g.tanh(shifted);
    let scores = g.matmul(att.w2, act)?;
    Ok(g.add(scores, att.b2)?)
}

/// `1 × m` attention weights from `Hᵀ` (`N × m`).
pub fn attention_weights<T: Scalar>(
    g: &mut Graph<T>,
    att: &AttentionVars,
    h_t: Var,
) -> Result<Var> {
    let logits = attention_logits(g, att, h_t)?;
    Ok(g.softmax(logits, 1)?)
}

/// `concat(w_1·h_1, …, w_m·h_m)` as an `(m·N) × 1` column.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, embeddings: &[Var], weights: Var) -> Result<Var> {
    let count = g.value(weights).numel();
    if count != embeddings.len() {
        return Err(FusionError::WeightCount {
            weights: count,
            modalities: embeddings.len(),
        });
    }
    let mut parts = Vec::with_capacity(embeddings.len());
    for (i, &h) in embeddings.iter().enumerate() {
        let w = g.element(weights, i)?;
        parts.push(g.mul(h, w)?);
    }
    Ok(g.concat(&parts, 0)?)
}

/// Value-level [`fuse`].
pub fn fuse_values<T: Scalar>(
    stack: &EmbeddingStack<T>,
    weights: &AttentionWeights<T>,
) -> Result<Vec<T>> {
    if weights.weights.len() != stack.m() {
        return Err(FusionError::WeightCount {
            weights: weights.weights.len(),
            modalities: stack.m(),
        });
    }
    let mut g = Graph::new();
    let embs: Vec<Var> = stack
        .rows
        .iter()
        .map(|r| g.constant(Tensor::column(r.clone())))
        .collect();
    let w = g.constant(Tensor::row(weights.weights.clone()));
    let fused = fuse(&mut g, &embs, w)?;
    Ok(g.value(fused).data().to_vec())
}

// ---------------------------------------------------------------------------
// Fused model

#[derive(Debug, Clone, PartialEq)]
pub enum Fusion<T> {
    Attention(AttentionBlock<T>),
    /// Late fusion: raw embeddings concatenated, no weighting.
    Concat,
}

/// Per-modality encoders (heads removed), a fusion rule and a dense head over
/// the `m·N` fused vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ManModel<T> {
    pub subnetworks: Vec<SubNetwork<T>>,
    pub fusion: Fusion<T>,
    pub fused_head: Linear<T>,
    pub task: Task,
}

#[derive(Debug, Clone)]
pub struct ManVars {
    pub subnetworks: Vec<SubNetworkVars>,
    pub attention: Option<AttentionVars>,
    pub head: LinearVars,
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `C × 1` logits or `1 × 1` score.
    pub prediction: Var,
    /// `1 × m` attention weights; `None` for late fusion.
    pub weights: Option<Var>,
}

/// Graph outputs of [`ManModel::forward_batch`].
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `C × B` logits or `1 × B` scores.
    pub prediction: Var,
    /// `m × B` attention weights; `None` for late fusion.
    pub weights: Option<Var>,
}

/// Value-level result of [`ManModel::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub output: Vec<T>,
    pub weights: Option<AttentionWeights<T>>,
}

impl<T: Scalar> ManModel<T> {
    pub fn new(
        subnetworks: Vec<SubNetwork<T>>,
        fusion: Fusion<T>,
        fused_head: Linear<T>,
        task: Task,
    ) -> Result<Self> {
        let first = subnetworks.first().ok_or(FusionError::NoModalities)?;
        let n = first.embedding_dim();
        for s in &subnetworks {
            if s.has_head() {
                return Err(FusionError::HeadPresent(s.modality.clone()));
            }
            if s.embedding_dim() != n {
                return Err(FusionError::EmbeddingDim {
                    modality: s.modality.clone(),
                    expected: n,
                    got: s.embedding_dim(),
                });
            }
        }
        if let Fusion::Attention(att) = &fusion {
            if att.embedding_dim() != n {
                return Err(FusionError::AttentionDim {
                    expected: n,
                    got: att.embedding_dim(),
                });
            }
        }
        let m = subnetworks.len();
        if fused_head.in_dim() != m * n || fused_head.out_dim() != task.output_dim() {
            return Err(FusionError::HeadShape {
                expected: m * n,
                outputs: task.output_dim(),
                got: fused_head.weight.shape().to_vec(),
            });
        }
        Ok(Self {
            subnetworks,
            fusion,
            fused_head,
            task,
        })
    }

    /// Strips the heads of (pre-trained or fresh) sub-networks and attaches a
    /// freshly initialised fusion block and fused head.
    pub fn assemble<R: Rng + ?Sized>(
        mut subnetworks: Vec<SubNetwork<T>>,
        attention_dim: Option<usize>,
        task: Task,
        rng: &mut R,
    ) -> Result<Self> {
        let n = subnetworks
            .first()
            .ok_or(FusionError::NoModalities)?
            .embedding_dim();
        for s in &mut subnetworks {
            if s.embedding_dim() != n {
                return Err(FusionError::EmbeddingDim {
                    modality: s.modality.clone(),
                    expected: n,
                    got: s.embedding_dim(),
                });
            }
            if s.has_head() {
                s.strip_head()?;
            }
        }
        let fusion = match attention_dim {
            Some(k) => Fusion::Attention(AttentionBlock::new(n, k, rng)),
            None => Fusion::Concat,
        };
        let head = Linear::new(subnetworks.len() * n, task.output_dim(), rng);
        Self::new(subnetworks, fusion, head, task)
    }

    pub fn modality_order(&self) -> Vec<String> {
        self.subnetworks
            .iter()
            .map(|s| s.modality.clone())
            .collect()
    }

    pub fn m(&self) -> usize {
        self.subnetworks.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.subnetworks[0].embedding_dim()
    }

    pub fn attention(&self) -> Option<&AttentionBlock<T>> {
        match &self.fusion {
            Fusion::Attention(a) => Some(a),
            Fusion::Concat => None,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ManVars {
        let subnetworks = self.subnetworks.iter().map(|s| s.bind(g)).collect();
        let attention = self.attention().map(|a| a.bind(g));
        let head = self.fused_head.bind(g);
        ManVars {
            subnetworks,
            attention,
            head,
        }
    }

    /// Encodes every modality, fuses and applies the head.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ManVars,
        example: &MultimodalExample<T>,
    ) -> Result<ForwardOutput> {
        let mut embeddings = Vec::with_capacity(self.m());
        for (net, nv) in self.subnetworks.iter().zip(&vars.subnetworks) {
            let seq =
                example
                    .sequence(&net.modality)
                    .ok_or_else(|| FusionError::MissingModality {
                        example: example.id.clone(),
                        modality: net.modality.clone(),
                    })?;
            embeddings.push(bilstm_encode(g, nv, seq)?);
        }
        let (fused, weights) = match &vars.attention {
            Some(att) => {
                let h_t = g.concat(&embeddings, 1)?;
                let w = attention_weights(g, att, h_t)?;
                (fuse(g, &embeddings, w)?, Some(w))
            }
            None => (g.concat(&embeddings, 0)?, None),
        };
        let prediction = linear(g, &vars.head, fused)?;
        Ok(ForwardOutput {
            prediction,
            weights,
        })
    }

    /// [`ManModel::forward`] over a batch in one pass. Within the batch each
    /// modality must have a single sequence length. Column `b` of the
    /// outputs belongs to `examples[b]`.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        vars: &ManVars,
        examples: &[&MultimodalExample<T>],
    ) -> Result<BatchOutput> {
        let mut embeddings = Vec::with_capacity(self.m());
        for (net, nv) in self.subnetworks.iter().zip(&vars.subnetworks) {
            let mut seqs = Vec::with_capacity(examples.len());
            for ex in examples {
                seqs.push(ex.sequence(&net.modality).ok_or_else(|| {
                    FusionError::MissingModality {
                        example: ex.id.clone(),
                        modality: net.modality.clone(),
                    }
                })?);
            }
            embeddings.push(bilstm_encode_batch(g, nv, &seqs)?);
        }
        let (fused, weights) = match &vars.attention {
            Some(att) => {
                let mut logits = Vec::with_capacity(embeddings.len());
                for &e in &embeddings {
                    logits.push(attention_logits(g, att, e)?);
                }
                let stacked = g.concat(&logits, 0)?;
                let w = g.softmax(stacked, 0)?;
                let mut parts = Vec::with_capacity(embeddings.len());
                for (i, &e) in embeddings.iter().enumerate() {
                    let wi = g.rows(w, i, 1)?;
                    parts.push(g.mul(e, wi)?);
                }
                (g.concat(&parts, 0)?, Some(w))
            }
            None => (g.concat(&embeddings, 0)?, None),
        };
        let prediction = linear(g, &vars.head, fused)?;
        Ok(BatchOutput {
            prediction,
            weights,
        })
    }

    /// Prediction and attention weights for one example, outside any
    /// training graph.
    pub fn predict(&self, example: &MultimodalExample<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let out = self.forward(&mut g, &vars, example)?;
        Ok(Prediction {
            output: g.value(out.prediction).data().to_vec(),
            weights: out.weights.map(|w| AttentionWeights {
                weights: g.value(w).data().to_vec(),
            }),
        })
    }

    /// Per-modality embeddings for one example.
    pub fn embed(&self, example: &MultimodalExample<T>) -> Result<EmbeddingStack<T>> {
        let mut rows = Vec::with_capacity(self.m());
        for net in &self.subnetworks {
            let seq =
                example
                    .sequence(&net.modality)
                    .ok_or_else(|| FusionError::MissingModality {
                        example: example.id.clone(),
                        modality: net.modality.clone(),
                    })?;
            rows.push(net.encode(seq)?);
        }
        EmbeddingStack::new(self.modality_order(), rows)
    }

    /// Encoder parameters of every sub-network, flattened in order.
    pub fn encoder_params(&self) -> Vec<T> {
        self.subnetworks
            .iter()
            .flat_map(|s| s.flat_params())
            .collect()
    }
}

impl<T: Scalar> Parameterized<T> for ManModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for s in &self.subnetworks {
            let prefix = s.modality.clone();
            s.visit_params(&mut |n, t| f(&format!("{prefix}.{n}"), t));
        }
        if let Some(a) = self.attention() {
            a.visit_params(&mut |n, t| f(&format!("attention.{n}"), t));
        }
        self.fused_head
            .visit_params(&mut |n, t| f(&format!("fused_head.{n}"), t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for s in &mut self.subnetworks {
            let prefix = s.modality.clone();
            s.visit_params_mut(&mut |n, t| f(&format!("{prefix}.{n}"), t));
        }
        if let Fusion::Attention(a) = &mut self.fusion {
            a.visit_params_mut(&mut |n, t| f(&format!("attention.{n}"), t));
        }
        self.fused_head
            .visit_params_mut(&mut |n, t| f(&format!("fused_head.{n}"), t));
    }
}

// ---------------------------------------------------------------------------
// Variants

/// Model family run by the harness. The ablations mirror the rows of the
/// word-embedding comparison: text only, no attention, no pre-training, full.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Pre-trained encoders, attention fusion, end-to-end fine-tuning.
    #[default]
    Man,
    /// Pre-trained encoders, late (concatenation) fusion.
    ManMinusAttention,
    /// Attention fusion trained from random initialisation.
    ManMinusPretraining,
    /// Late-fusion baseline trained from random initialisation.
    LfLstm,
    /// One sub-network with its head.
    Unimodal(String),
}

impl Variant {
    pub fn uses_attention(&self) -> bool {
        matches!(self, Variant::Man | Variant::ManMinusPretraining)
    }

    pub fn pretrains(&self) -> bool {
        matches!(self, Variant::Man | Variant::ManMinusAttention)
    }

    pub fn is_unimodal(&self) -> bool {
        matches!(self, Variant::Unimodal(_))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Man => f.write_str("man"),
            Variant::ManMinusAttention => f.write_str("man-no-attention"),
            Variant::ManMinusPretraining => f.write_str("man-no-pretraining"),
            Variant::LfLstm => f.write_str("lf-lstm"),
            Variant::Unimodal(m) => write!(f, "unimodal:{m}"),
        }
    }
}

impl FromStr for Variant {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "man" => Ok(Variant::Man),
            "man-no-attention" | "man-minus-attention" => Ok(Variant::ManMinusAttention),
            "man-no-pretraining" | "man-minus-pretraining" => Ok(Variant::ManMinusPretraining),
            "lf-lstm" | "late-fusion" => Ok(Variant::LfLstm),
            _ => match s.trim().split_once(':') {
                Some((kind, m)) if kind.eq_ignore_ascii_case("unimodal") && !m.is_empty() => {
                    Ok(Variant::Unimodal(m.to_string()))
                }
                _ => Err(FusionError::UnknownVariant(s.to_string())),
            },
        }
    }
}

impl TryFrom<String> for Variant {
    type Error = FusionError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.to_string()
    }
}

/// Encoder dimensions of one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// What a variant builds and how it is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantPlan {
    pub variant: Variant,
    /// Modalities the model consumes, in fusion order.
    pub modalities: Vec<ModalityDims>,
    /// `Some(k)` for attention fusion, `None` for concatenation or unimodal.
    pub attention_dim: Option<usize>,
    /// Whether stage-1 pre-training runs before assembly.
    pub pretrain: bool,
    pub task: Task,
}

/// Resolves a variant against the configured modalities.
pub fn build_variant(
    modalities: &[ModalityDims],
    attention_dim: Option<usize>,
    task: Task,
    variant: &Variant,
) -> Result<VariantPlan> {
    let first = modalities.first().ok_or(FusionError::NoModalities)?;
    let n = 2 * first.hidden_dim;
    if let Variant::Unimodal(name) = variant {
        let dims = modalities
            .iter()
            .find(|d| &d.name == name)
            .ok_or_else(|| FusionError::UnknownModality(name.clone()))?;
        return Ok(VariantPlan {
            variant: variant.clone(),
            modalities: vec![dims.clone()],
            attention_dim: None,
            pretrain: false,
            task,
        });
    }
    for d in modalities {
        if 2 * d.hidden_dim != n {
            return Err(FusionError::EmbeddingDim {
                modality: d.name.clone(),
                expected: n,
                got: 2 * d.hidden_dim,
            });
        }
    }
    Ok(VariantPlan {
        variant: variant.clone(),
        modalities: modalities.to_vec(),
        attention_dim: variant
            .uses_attention()
            .then(|| attention_dim.unwrap_or_else(|| default_attention_dim(n))),
        pretrain: variant.pretrains(),
        task,
    })
}

impl VariantPlan {
    pub fn embedding_dim(&self) -> usize {
        2 * self.modalities[0].hidden_dim
    }

    /// Fresh sub-networks in plan order; with heads when `with_heads`.
    pub fn fresh_subnetworks<T: Scalar, R: Rng + ?Sized>(
        &self,
        with_heads: bool,
        rng: &mut R,
    ) -> Vec<SubNetwork<T>> {
        self.modalities
            .iter()
            .map(|d| {
                SubNetwork::new(
                    d.name.clone(),
                    d.input_dim,
                    d.hidden_dim,
                    with_heads.then_some(self.task),
                    rng,
                )
            })
            .collect()
    }

    /// Trainable parameter count of the final model.
    pub fn param_count(&self) -> usize {
        let lstm = |d: &ModalityDims| 4 * d.hidden_dim * (d.input_dim + d.hidden_dim + 1);
        let encoders: usize = self.modalities.iter().map(|d| 2 * lstm(d)).sum();
        let n = self.embedding_dim();
        let c = self.task.output_dim();
        if self.variant.is_unimodal() {
            return encoders + n * c + c;
        }
        let attention = self.attention_dim.map_or(0, |k| k * n + k + k + 1);
        let m = self.modalities.len();
        encoders + attention + m * n * c + c
    }
}

/// Max relative error between analytic and central-difference gradients of
/// cross-entropy through a full MAN forward pass (m=3, N=4, T=3, k=3).
/// All attention parameters, including `W2` and `b2`, are randomised.
pub fn man_gradient_check(seed: u64, eps: f64) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (m, input, hidden, k, steps) = (3, 2, 2, 3, 3);
    let task = Task::Classification { classes: 3 };
    let subs = (0..m)
        .map(|i| SubNetwork::new(format!("m{i}"), input, hidden, None, &mut rng))
        .collect();
    let mut model = ManModel::<f64>::assemble(subs, Some(k), task, &mut rng)?;
    if let Fusion::Attention(att) = &mut model.fusion {
        att.w2 = init_uniform(1, k, &mut rng);
        att.b2.data_mut()[0] = rng.random_range(-0.5..0.5);
        for v in att.b1.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let modalities = (0..m)
        .map(|i| {
            let name = format!("m{i}");
            let feats = (0..steps * input)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let seq = crate::layers::ModalitySequence::new(name.clone(), steps, input, feats)?;
            Ok((name, seq))
        })
        .collect::<Result<_>>()?;
    let ex = MultimodalExample {
        id: "check".into(),
        label: 1.0,
        modalities,
        informative_set: None,
    };
    crate::layers::grad_check_params(
        &model,
        |net: &ManModel<f64>, g| {
            let vars = net.bind(g);
            let out = net.forward(g, &vars, &ex)?;
            let row = g.transpose(out.prediction)?;
            Ok::<_, FusionError>(g.cross_entropy(row, &[1])?)
        },
        eps,
    )
}

//! Recurrent sequence encoders and prediction heads.
//!
//! Every trainable type here stores its weights as [`Tensor`]s and exposes
//! them through [`Parameterized`]. To run a forward pass the parameters are
//! first bound onto a [`Graph`] (`bind`), which copies them onto the tape in
//! exactly the order `visit_params` reports them. That shared order is what
//! lets optimizers and checkpoints treat any model as a flat list of tensors.

use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("modality '{0}': sequence has no timesteps")]
    EmptySequence(String),
    #[error("modality '{0}': sequence contains a non-finite value")]
    NonFinite(String),
    #[error("sub-network '{0}' has no prediction head")]
    MissingHead(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LayerError> = std::result::Result<T, E>;

/// What the model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    /// Width of a prediction head for this task.
    pub fn output_dim(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Regression => 1,
        }
    }
}

/// Uniform access to the trainable tensors of a model, in declaration order.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// Flattened copy of every parameter value.
    fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    /// Adds per-tensor gradients (as returned by [`Graph::param_grads`]).
    fn accumulate_grads(&mut self, grads: &[Vec<T>]) {
        let mut it = grads.iter();
        self.visit_params_mut(&mut |name, t| {
            let g = it
                .next()
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            t.accumulate_grad(g);
        });
        assert!(it.next().is_none(), "more gradients than parameters");
    }
}

/// A bare tensor is a one-parameter model named `value`.
impl<T: Scalar> Parameterized<T> for Tensor<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("value", self);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("value", self);
    }
}

/// Gradient check over every parameter of a model.
///
/// `loss` must bind `model` exactly once on the supplied graph and return a
/// single-element root; analytic gradients are read from
/// [`Graph::param_grads`] and compared with central differences taken by
/// perturbing each parameter in place. Returns the largest
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check_params<T, M, E, F>(model: &M, mut loss: F, eps: T) -> std::result::Result<T, E>
where
    T: Scalar,
    M: Parameterized<T> + Clone,
    E: From<TensorError>,
    F: FnMut(&M, &mut Graph<T>) -> std::result::Result<Var, E>,
{
    let mut g = Graph::new();
    let root = loss(model, &mut g)?;
    g.backward(root)?;
    let analytic: Vec<T> = g.param_grads().into_iter().flatten().collect();
    assert_eq!(
        analytic.len(),
        model.param_count(),
        "loss must bind the model once"
    );

    let mut eval = |m: &M| -> std::result::Result<T, E> {
        let mut g = Graph::new();
        let root = loss(m, &mut g)?;
        Ok(g.value(root).item())
    };
    let two = T::one() + T::one();
    let mut work = model.clone();
    let mut worst = T::zero();
    for idx in 0..analytic.len() {
        let set = |m: &mut M, delta: T| {
            let mut k = 0;
            m.visit_params_mut(&mut |_, t| {
                let n = t.numel();
                if idx >= k && idx < k + n {
                    t.data_mut()[idx - k] += delta;
                }
                k += n;
            });
        };
        let orig = work.flat_params()[idx];
        set(&mut work, eps);
        let plus = eval(&work)?;
        set(&mut work, -eps - eps);
        let minus = eval(&work)?;
        let mut k = 0;
        work.visit_params_mut(&mut |_, t| {
            let n = t.numel();
            if idx >= k && idx < k + n {
                t.data_mut()[idx - k] = orig;
            }
            k += n;
        });
        let numeric = (plus - minus) / (two * eps);
        let err = (analytic[idx] - numeric).abs() / numeric.abs().max(T::one());
        if err > worst || err.is_nan() {
            worst = err;
        }
    }
    Ok(worst)
}

/// Glorot-style uniform initialisation in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn init_uniform<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Tensor<T> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(rng.random_range(-s..=s)))
        .collect();
    Tensor::matrix(rows, cols, data)
        .expect("init shape")
        .with_requires_grad(true)
}

fn trainable_zeros<T: Scalar>(rows: usize, cols: usize) -> Tensor<T> {
    Tensor::zeros(&[rows, cols]).with_requires_grad(true)
}

// ---------------------------------------------------------------------------
// LSTM cell

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<T> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_ii: Tensor<T>,
    pub w_if: Tensor<T>,
    pub w_ig: Tensor<T>,
    pub w_io: Tensor<T>,
    pub w_hi: Tensor<T>,
    pub w_hf: Tensor<T>,
    pub w_hg: Tensor<T>,
    pub w_ho: Tensor<T>,
    pub b_i: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_g: Tensor<T>,
    pub b_o: Tensor<T>,
}

/// Graph handles of a bound [`LstmCell`].
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub hidden_dim: usize,
    pub input_dim: usize,
    w_i: [Var; 4],
    w_h: [Var; 4],
    b: [Var; 4],
}

impl<T: Scalar> LstmCell<T> {
    /// Random weights, forget-gate bias 1, other biases 0.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut wi = || init_uniform(hidden_dim, input_dim, rng);
        let (w_ii, w_if, w_ig, w_io) = (wi(), wi(), wi(), wi());
        let mut wh = || init_uniform(hidden_dim, hidden_dim, rng);
        let (w_hi, w_hf, w_hg, w_ho) = (wh(), wh(), wh(), wh());
        Self {
            input_dim,
            hidden_dim,
            w_ii,
            w_if,
            w_ig,
            w_io,
            w_hi,
            w_hf,
            w_hg,
            w_ho,
            b_i: trainable_zeros(hidden_dim, 1),
            b_f: Tensor::filled(&[hidden_dim, 1], T::one()).with_requires_grad(true),
            b_g: trainable_zeros(hidden_dim, 1),
            b_o: trainable_zeros(hidden_dim, 1),
        }
    }

    /// All weights and biases zero.
    pub fn zeroed(input_dim: usize, hidden_dim: usize) -> Self {
        let wi = || trainable_zeros(hidden_dim, input_dim);
        let wh = || trainable_zeros(hidden_dim, hidden_dim);
        let b = || trainable_zeros(hidden_dim, 1);
        Self {
            input_dim,
            hidden_dim,
            w_ii: wi(),
            w_if: wi(),
            w_ig: wi(),
            w_io: wi(),
            w_hi: wh(),
            w_hf: wh(),
            w_hg: wh(),
            w_ho: wh(),
            b_i: b(),
            b_f: b(),
            b_g: b(),
            b_o: b(),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("w_ii", &self.w_ii),
            ("w_if", &self.w_if),
            ("w_ig", &self.w_ig),
            ("w_io", &self.w_io),
            ("w_hi", &self.w_hi),
            ("w_hf", &self.w_hf),
            ("w_hg", &self.w_hg),
            ("w_ho", &self.w_ho),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_g", &self.b_g),
            ("b_o", &self.b_o),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            ("w_ii", &mut self.w_ii),
            ("w_if", &mut self.w_if),
            ("w_ig", &mut self.w_ig),
            ("w_io", &mut self.w_io),
            ("w_hi", &mut self.w_hi),
            ("w_hf", &mut self.w_hf),
            ("w_hg", &mut self.w_hg),
            ("w_ho", &mut self.w_ho),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_g", &mut self.b_g),
            ("b_o", &mut self.b_o),
        ]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> LstmVars {
        let v: Vec<Var> = self.tensors().iter().map(|(_, t)| g.param(t)).collect();
        LstmVars {
            hidden_dim: self.hidden_dim,
            input_dim: self.input_dim,
            w_i: [v[0], v[1], v[2], v[3]],
            w_h: [v[4], v[5], v[6], v[7]],
            b: [v[8], v[9], v[10], v[11]],
        }
    }

    /// One step on plain vectors, outside any training graph.
    pub fn step(&self, x: &[T], h_prev: &[T], c_prev: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(Tensor::column(x.to_vec()));
        let h = g.constant(Tensor::column(h_prev.to_vec()));
        let c = g.constant(Tensor::column(c_prev.to_vec()));
        let (h, c) = lstm_step(&mut g, &vars, x, h, c)?;
        Ok((g.value(h).data().to_vec(), g.value(c).data().to_vec()))
    }
}

impl<T: Scalar> Parameterized<T> for LstmCell<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, t) in self.tensors() {
            f(name, t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.tensors_mut() {
            f(name, t);
        }
    }
}

/// One LSTM step on column vectors:
///
/// ```text
/// i = σ(W_ii x + W_hi h + b_i)    f = σ(W_if x + W_hf h + b_f)
/// g = tanh(W_ig x + W_hg h + b_g) o = σ(W_io x + W_ho h + b_o)
/// c' = f ⊙ c + i ⊙ g              h' = o ⊙ tanh(c')
/// ```
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    cell: &LstmVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let batch = g.shape(x).get(1).copied().unwrap_or(0);
    let check = |what: &str, expected: usize, got: &[usize]| {
        if got != [expected, batch] {
            Err(LayerError::DimMismatch {
                what: what.to_string(),
                expected: expected * batch.max(1),
                got: got.iter().product(),
            })
        } else {
            Ok(())
        }
    };
    check("lstm input", cell.input_dim, g.shape(x))?;
    check("lstm hidden state", cell.hidden_dim, g.shape(h_prev))?;
    check("lstm cell state", cell.hidden_dim, g.shape(c_prev))?;

    let mut pre = [x; 4];
    for k in 0..4 {
        let wx = g.matmul(cell.w_i[k], x)?;
        let wh = g.matmul(cell.w_h[k], h_prev)?;
        let s = g.add(wx, wh)?;
        pre[k] = g.add(s, cell.b[k])?;
    }
    let i = g.sigmoid(pre[0]);
    let f = g.sigmoid(pre[1]);
    let cand = g.tanh(pre[2]);
    let o = g.sigmoid(pre[3]);
    let fc = g.mul(f, c_prev)?;
    let ig = g.mul(i, cand)?;
    let c = g.add(fc, ig)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

// ---------------------------------------------------------------------------
// Linear layer

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: init_uniform(out_dim, in_dim, rng),
            bias: trainable_zeros(out_dim, 1),
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: trainable_zeros(out_dim, in_dim),
            bias: trainable_zeros(out_dim, 1),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out_dim, _) = matrix_dims(&weight)?;
        if bias.shape() != [out_dim, 1] {
            return Err(LayerError::DimMismatch {
                what: "linear bias".into(),
                expected: out_dim,
                got: bias.numel(),
            });
        }
        Ok(Self {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> LinearVars {
        LinearVars {
            weight: g.param(&self.weight),
            bias: g.param(&self.bias),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(TensorError::Rank {
            op: "linear",
            expected: 2,
            shape: s.to_vec(),
        }
        .into()),
    }
}

/// `W x + b` for a column `x`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, layer: &LinearVars, x: Var) -> Result<Var> {
    let wx = g.matmul(layer.weight, x)?;
    Ok(g.add(wx, layer.bias)?)
}

// ---------------------------------------------------------------------------
// Sequences and sub-networks

/// One modality's feature matrix for one example, `timesteps × feature_dim`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySequence<T> {
    pub modality: String,
    timesteps: usize,
    feature_dim: usize,
    features: Vec<T>,
}

impl<T: Scalar> ModalitySequence<T> {
    pub fn new(
        modality: impl Into<String>,
        timesteps: usize,
        feature_dim: usize,
        features: Vec<T>,
    ) -> Result<Self> {
        let modality = modality.into();
        if features.len() != timesteps * feature_dim {
            return Err(LayerError::DimMismatch {
                what: format!("modality '{modality}' features"),
                expected: timesteps * feature_dim,
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(LayerError::NonFinite(modality));
        }
        Ok(Self {
            modality,
            timesteps,
            feature_dim,
            features,
        })
    }

    pub fn from_rows(modality: impl Into<String>, rows: &[Vec<T>]) -> Result<Self> {
        let modality = modality.into();
        let feature_dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != feature_dim) {
            return Err(LayerError::DimMismatch {
                what: format!("modality '{modality}' row width"),
                expected: feature_dim,
                got: bad.len(),
            });
        }
        let features = rows.iter().flatten().copied().collect();
        Self::new(modality, rows.len(), feature_dim, features)
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn step(&self, t: usize) -> &[T] {
        &self.features[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    /// Same sequence with the time axis reversed.
    pub fn reversed(&self) -> Self {
        let mut features = Vec::with_capacity(self.features.len());
        for t in (0..self.timesteps).rev() {
            features.extend_from_slice(self.step(t));
        }
        Self {
            features,
            ..self.clone()
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModalitySequence<U> {
        ModalitySequence {
            modality: self.modality.clone(),
            timesteps: self.timesteps,
            feature_dim: self.feature_dim,
            features: self
                .features
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// A modality's bidirectional LSTM encoder with an optional prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetwork<T> {
    pub modality: String,
    pub forward_cell: LstmCell<T>,
    pub backward_cell: LstmCell<T>,
    pub head: Option<Linear<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SubNetworkVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
    pub head: Option<LinearVars>,
}

impl<T: Scalar> SubNetwork<T> {
    pub fn new<R: Rng + ?Sized>(
        modality: impl Into<String>,
        input_dim: usize,
        hidden_dim: usize,
        task: Option<Task>,
        rng: &mut R,
    ) -> Self {
        let forward_cell = LstmCell::new(input_dim, hidden_dim, rng);
        let backward_cell = LstmCell::new(input_dim, hidden_dim, rng);
        let head = task.map(|t| Linear::new(2 * hidden_dim, t.output_dim(), rng));
        Self {
            modality: modality.into(),
            forward_cell,
            backward_cell,
            head,
        }
    }

    pub fn zeroed(
        modality: impl Into<String>,
        input_dim: usize,
        hidden_dim: usize,
        task: Option<Task>,
    ) -> Self {
        Self {
            modality: modality.into(),
            forward_cell: LstmCell::zeroed(input_dim, hidden_dim),
            backward_cell: LstmCell::zeroed(input_dim, hidden_dim),
            head: task.map(|t| Linear::zeroed(2 * hidden_dim, t.output_dim())),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward_cell.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward_cell.hidden_dim
    }

    /// Length `N` of the embedding produced by [`bilstm_encode`].
    pub fn embedding_dim(&self) -> usize {
        self.forward_cell.hidden_dim + self.backward_cell.hidden_dim
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Removes and returns the prediction head. Encoder weights are untouched.
    pub fn strip_head(&mut self) -> Result<Linear<T>> {
        self.head
            .take()
            .ok_or_else(|| LayerError::MissingHead(self.modality.clone()))
    }

    pub fn bind(&self, g: &mut Graph<T>) -> SubNetworkVars {
        SubNetworkVars {
            forward: self.forward_cell.bind(g),
            backward: self.backward_cell.bind(g),
            head: self.head.as_ref().map(|h| h.bind(g)),
        }
    }

    /// Encoder parameters only, excluding the head.
    pub fn encoder_param_count(&self) -> usize {
        self.forward_cell.param_count() + self.backward_cell.param_count()
    }
}

impl<T: Scalar> Parameterized<T> for SubNetwork<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.forward_cell
            .visit_params(&mut |n, t| f(&format!("forward.{n}"), t));
        self.backward_cell
            .visit_params(&mut |n, t| f(&format!("backward.{n}"), t));
        if let Some(h) = &self.head {
            h.visit_params(&mut |n, t| f(&format!("head.{n}"), t));
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.forward_cell
            .visit_params_mut(&mut |n, t| f(&format!("forward.{n}"), t));
        self.backward_cell
            .visit_params_mut(&mut |n, t| f(&format!("backward.{n}"), t));
        if let Some(h) = &mut self.head {
            h.visit_params_mut(&mut |n, t| f(&format!("head.{n}"), t));
        }
    }
}

fn run_direction<T: Scalar>(
    g: &mut Graph<T>,
    cell: &LstmVars,
    batch: usize,
    inputs: impl Iterator<Item = Var>,
) -> Result<Var> {
    let mut h = g.constant(Tensor::zeros(&[cell.hidden_dim, batch]));
    let mut c = g.constant(Tensor::zeros(&[cell.hidden_dim, batch]));
    for x in inputs {
        (h, c) = lstm_step(g, cell, x, h, c)?;
    }
    Ok(h)
}

/// Runs both directions from zero state and returns the `N × 1` column
/// `[h_fwd(T); h_bwd(1)]`: each direction's state after its last step.
pub fn bilstm_encode<T: Scalar>(
    g: &mut Graph<T>,
    net: &SubNetworkVars,
    seq: &ModalitySequence<T>,
) -> Result<Var> {
    bilstm_encode_batch(g, net, &[seq])
}

/// [`bilstm_encode`] for several sequences of equal length at once; column
/// `b` of the `N × B` result is the embedding of `seqs[b]`.
pub fn bilstm_encode_batch<T: Scalar>(
    g: &mut Graph<T>,
    net: &SubNetworkVars,
    seqs: &[&ModalitySequence<T>],
) -> Result<Var> {
    let first = seqs
        .first()
        .ok_or_else(|| LayerError::EmptySequence("empty batch".to_string()))?;
    let steps = first.timesteps;
    for seq in seqs {
        if seq.timesteps == 0 {
            return Err(LayerError::EmptySequence(seq.modality.clone()));
        }
        if seq.feature_dim != net.forward.input_dim {
            return Err(LayerError::DimMismatch {
                what: format!("modality '{}' feature_dim", seq.modality),
                expected: net.forward.input_dim,
                got: seq.feature_dim,
            });
        }
        if seq.timesteps != steps {
            return Err(LayerError::DimMismatch {
                what: format!("modality '{}' timesteps within a batch", seq.modality),
                expected: steps,
                got: seq.timesteps,
            });
        }
    }
    let (f, b) = (net.forward.input_dim, seqs.len());
    let xs: Vec<Var> = (0..steps)
        .map(|t| {
            let mut data = vec![T::zero(); f * b];
            for (j, seq) in seqs.iter().enumerate() {
                for (i, &v) in seq.step(t).iter().enumerate() {
                    data[i * b + j] = v;
                }
            }
            g.constant(Tensor::matrix(f, b, data).expect("batch input shape"))
        })
        .collect();
    let fwd = run_direction(g, &net.forward, b, xs.iter().copied())?;
    let bwd = run_direction(g, &net.backward, b, xs.iter().rev().copied())?;
    Ok(g.concat(&[fwd, bwd], 0)?)
}

/// Encoder followed by the head: `C × 1` logits for classification (softmax
/// is left to the loss), `1 × 1` for regression.
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    net: &SubNetworkVars,
    modality: &str,
    seq: &ModalitySequence<T>,
) -> Result<Var> {
    let head = net
        .head
        .as_ref()
        .ok_or_else(|| LayerError::MissingHead(modality.to_string()))?;
    let emb = bilstm_encode(g, net, seq)?;
    linear(g, head, emb)
}

impl<T: Scalar> SubNetwork<T> {
    /// Embedding of one sequence, outside any training graph.
    pub fn encode(&self, seq: &ModalitySequence<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let e = bilstm_encode(&mut g, &vars, seq)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Head output for one sequence, outside any training graph.
    pub fn predict(&self, seq: &ModalitySequence<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let out = head_forward(&mut g, &vars, &self.modality, seq)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check_many;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar transcription of the gate equations, used as an oracle for a
    /// 1-dimensional cell.
    fn scalar_step(w: &[f64; 8], b: &[f64; 4], x: f64, h: f64, c: f64) -> (f64, f64) {
        let i = sig(w[0] * x + w[4] * h + b[0]);
        let f = sig(w[1] * x + w[5] * h + b[1]);
        let g = (w[2] * x + w[6] * h + b[2]).tanh();
        let o = sig(w[3] * x + w[7] * h + b[3]);
        let c2 = f * c + i * g;
        (o * c2.tanh(), c2)
    }

    fn scalar_cell(w: &[f64; 8], b: &[f64; 4]) -> LstmCell<f64> {
        let mut cell = LstmCell::zeroed(1, 1);
        let mut k = 0;
        cell.visit_params_mut(&mut |_, t| {
            t.data_mut()[0] = if k < 8 { w[k] } else { b[k - 8] };
            k += 1;
        });
        cell
    }

    #[test]
    fn zero_cell_gives_zero_state() {
        let cell = LstmCell::<f64>::zeroed(3, 2);
        let (h, c) = cell
            .step(&[1.0, -2.0, 0.5], &[0.0, 0.0], &[0.0, 0.0])
            .unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn unit_cell_matches_closed_form() {
        let cell = scalar_cell(&[1.0; 8], &[0.0; 4]);
        let (h, c) = cell.step(&[1.0], &[0.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(c[0], 0.55677, epsilon = 1e-4);
        // σ(1)·tanh(0.556770) evaluates to 0.369606.
        assert_abs_diff_eq!(h[0], 0.369606, epsilon = 1e-4);
        let (ho, co) = scalar_step(&[1.0; 8], &[0.0; 4], 1.0, 0.0, 0.0);
        assert_abs_diff_eq!(c[0], co, epsilon = 1e-15);
        assert_abs_diff_eq!(h[0], ho, epsilon = 1e-15);
    }

    #[test]
    fn step_rejects_wrong_dims() {
        let cell = LstmCell::<f64>::zeroed(3, 2);
        assert!(matches!(
            cell.step(&[1.0], &[0.0, 0.0], &[0.0, 0.0]),
            Err(LayerError::DimMismatch {
                expected: 3,
                got: 1,
                ..
            })
        ));
    }

    #[test]
    fn forget_bias_initialised_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::<f64>::new(3, 4, &mut rng);
        assert!(cell.b_f.data().iter().all(|&v| v == 1.0));
        assert!(cell.b_i.data().iter().all(|&v| v == 0.0));
        let s = (6.0f64 / 7.0).sqrt();
        assert!(cell.w_ii.data().iter().all(|v| v.abs() <= s));
        assert_eq!(cell.w_hi.shape(), &[4, 4]);
    }

    #[test]
    fn bilstm_two_step_matches_unrolled_oracle() {
        let wf = [0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.6];
        let bf = [0.1, 1.0, -0.1, 0.05];
        let wb = [-0.6, 0.4, 0.3, -0.2, 0.1, 0.25, -0.5, 0.35];
        let bb = [0.0, 1.0, 0.2, -0.3];
        let net = SubNetwork {
            modality: "m".into(),
            forward_cell: scalar_cell(&wf, &bf),
            backward_cell: scalar_cell(&wb, &bb),
            head: None,
        };
        let seq = ModalitySequence::new("m", 2, 1, vec![0.8, -1.1]).unwrap();
        let emb = net.encode(&seq).unwrap();

        let (h1, c1) = scalar_step(&wf, &bf, 0.8, 0.0, 0.0);
        let (h2, _) = scalar_step(&wf, &bf, -1.1, h1, c1);
        let (k1, d1) = scalar_step(&wb, &bb, -1.1, 0.0, 0.0);
        let (k2, _) = scalar_step(&wb, &bb, 0.8, k1, d1);
        assert!((emb[0] - h2).abs() < 1e-12);
        assert!((emb[1] - k2).abs() < 1e-12);
    }

    #[test]
    fn zero_subnetwork_embeds_to_zero() {
        let net = SubNetwork::<f64>::zeroed("a", 2, 3, None);
        let seq = ModalitySequence::new("a", 4, 2, vec![1.0; 8]).unwrap();
        assert_eq!(net.encode(&seq).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn single_step_symmetric_cells_give_equal_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = LstmCell::<f64>::new(2, 3, &mut rng);
        let net = SubNetwork {
            modality: "a".into(),
            forward_cell: cell.clone(),
            backward_cell: cell,
            head: None,
        };
        let seq = ModalitySequence::new("a", 1, 2, vec![0.4, -0.9]).unwrap();
        let e = net.encode(&seq).unwrap();
        assert_eq!(e[..3], e[3..]);
    }

    #[test]
    fn empty_sequence_and_dim_mismatch() {
        let net = SubNetwork::<f64>::zeroed("a", 2, 3, None);
        let empty = ModalitySequence::new("a", 0, 2, vec![]).unwrap();
        assert!(matches!(
            net.encode(&empty),
            Err(LayerError::EmptySequence(_))
        ));
        let wrong = ModalitySequence::new("a", 1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            net.encode(&wrong),
            Err(LayerError::DimMismatch { .. })
        ));
        assert!(matches!(
            ModalitySequence::<f64>::new("a", 1, 2, vec![0.0, f64::NAN]),
            Err(LayerError::NonFinite(_))
        ));
    }

    #[test]
    fn batched_encoding_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = SubNetwork::<f64>::new("a", 3, 2, None, &mut rng);
        let seqs: Vec<ModalitySequence<f64>> = (0..5)
            .map(|_| {
                let data = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
                ModalitySequence::new("a", 4, 3, data).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let refs: Vec<&ModalitySequence<f64>> = seqs.iter().collect();
        let e = bilstm_encode_batch(&mut g, &vars, &refs).unwrap();
        assert_eq!(g.shape(e), &[4, 5]);
        for (b, seq) in seqs.iter().enumerate() {
            let single = net.encode(seq).unwrap();
            for (i, v) in single.iter().enumerate() {
                assert_eq!(g.value(e).at(i, b), *v);
            }
        }
        let short = ModalitySequence::new("a", 2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            bilstm_encode_batch(&mut g, &vars, &[&seqs[0], &short]),
            Err(LayerError::DimMismatch { .. })
        ));
    }

    #[test]
    fn linear_forward() {
        let mut g = Graph::<f64>::new();
        let layer = Linear::from_parts(
            Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            Tensor::column(vec![1.0]),
        )
        .unwrap();
        let vars = layer.bind(&mut g);
        let x = g.constant(Tensor::column(vec![2.0, 3.0]));
        let y = linear(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);

        let id = Linear::from_parts(Tensor::<f64>::identity(3), Tensor::zeros(&[3, 1])).unwrap();
        let vars = id.bind(&mut g);
        let x = g.constant(Tensor::column(vec![0.5, -2.0, 7.0]));
        let y = linear(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0, 7.0]);
        assert!(Linear::from_parts(Tensor::<f64>::identity(3), Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let w = Tensor::<f64>::matrix(2, 3, vec![0.2, -0.5, 1.1, 0.7, 0.3, -0.9]).unwrap();
        let b = Tensor::<f64>::column(vec![0.1, -0.2]);
        let x = Tensor::<f64>::column(vec![1.5, -0.4, 0.8]);
        let err = grad_check_many(
            |g, v| {
                let lv = LinearVars {
                    weight: v[0],
                    bias: v[1],
                };
                let y = linear(g, &lv, v[2])?;
                let t = g.tanh(y);
                Ok::<_, LayerError>(g.sum(t))
            },
            &[w, b, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn zero_heads() {
        let cls = SubNetwork::<f64>::zeroed("t", 2, 2, Some(Task::Classification { classes: 3 }));
        let seq = ModalitySequence::new("t", 2, 2, vec![0.3, 0.1, -0.2, 0.9]).unwrap();
        assert_eq!(cls.predict(&seq).unwrap(), vec![0.0; 3]);
        let reg = SubNetwork::<f64>::zeroed("t", 2, 2, Some(Task::Regression));
        assert_eq!(reg.predict(&seq).unwrap(), vec![0.0]);
    }

    #[test]
    fn strip_head_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let task = Task::Classification { classes: 4 };
        let mut net = SubNetwork::<f64>::new("a", 3, 5, Some(task), &mut rng);
        let seq = ModalitySequence::new("a", 3, 3, (0..9).map(|i| i as f64 * 0.1 - 0.4).collect())
            .unwrap();
        let before = net.encode(&seq).unwrap();
        let count_before = net.param_count();
        let encoder_before = net.flat_params()[..net.encoder_param_count()].to_vec();
        net.strip_head().unwrap();
        assert_eq!(net.encode(&seq).unwrap(), before);
        assert_eq!(net.flat_params(), encoder_before);
        // head: 4 × 10 weights + 4 biases
        assert_eq!(net.param_count(), count_before - (4 * 10 + 4));
        assert!(matches!(net.strip_head(), Err(LayerError::MissingHead(_))));
        assert!(matches!(net.predict(&seq), Err(LayerError::MissingHead(_))));
    }

    #[test]
    fn param_count_from_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SubNetwork::<f64>::new("a", 3, 4, Some(Task::Regression), &mut rng);
        let per_cell = 4 * (4 * 3) + 4 * (4 * 4) + 4 * 4;
        assert_eq!(net.param_count(), 2 * per_cell + (8 + 1));
        assert_eq!(net.embedding_dim(), 8);
    }

    #[test]
    fn same_seed_same_network() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            SubNetwork::<f64>::new("a", 3, 4, Some(Task::Regression), &mut rng)
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn works_in_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = SubNetwork::<f32>::new(
            "a",
            2,
            3,
            Some(Task::Classification { classes: 2 }),
            &mut rng,
        );
        let seq = ModalitySequence::<f32>::new("a", 2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let e = net.encode(&seq).unwrap();
        assert_eq!(e.len(), 6);
        assert!(e.iter().all(|v| v.abs() < 1.0));
    }
}

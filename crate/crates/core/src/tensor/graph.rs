use super::{split_axis, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Tanh,
    Sigmoid,
    Relu,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryFn {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceFn {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropyWithLogits,
    L1,
}

/// How the right operand of a binary op maps onto the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Single-element right operand.
    Scalar,
    /// `p × 1` right operand against a `p × q` left operand.
    Column,
    /// `1 × q` right operand against a `p × q` left operand.
    Row,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Var, UnaryFn),
    Binary(Var, Var, BinaryFn, Broadcast),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Reduce(Var, ReduceFn, Option<usize>),
    Element(Var, usize),
    Rows(Var, usize),
    CrossEntropy(Var, Vec<usize>),
    L1(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Append-only computation tape.
///
/// Not `Sync`-shared: a graph is built and differentiated by one thread, but
/// may be moved between threads as a whole.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op) -> Var {
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape");
        t.requires_grad = requires_grad;
        self.push(t, op)
    }

    /// Records a leaf; it takes part in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copies a trainable tensor onto the tape and remembers it, so that
    /// [`Graph::param_grads`] can hand gradients back in insertion order.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let copy = Tensor::new(t.shape.clone(), t.data.clone())
            .expect("param: consistent shape")
            .with_requires_grad(true);
        let v = self.leaf(copy);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Gradients of every [`Graph::param`] leaf, in insertion order. Leaves
    /// unreachable from the last root get zeros.
    pub fn param_grads(&self) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|&v| {
                let node = &self.nodes[v.0].value;
                node.grad
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); node.numel()])
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ----- ops -----

    pub fn unary(&mut self, x: Var, f: UnaryFn) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv
            .data
            .iter()
            .map(|&a| match f {
                UnaryFn::Tanh => a.tanh(),
                UnaryFn::Sigmoid => sigmoid(a),
                UnaryFn::Relu => a.max(T::zero()),
                UnaryFn::Neg => -a,
            })
            .collect();
        let shape = xv.shape.clone();
        let rg = xv.requires_grad;
        self.derived(shape, data, rg, Op::Unary(x, f))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryFn::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryFn::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryFn::Relu)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryFn::Neg)
    }

    /// Elementwise `a ∘ b`. `b` may also be a single element, or a `p × 1`
    /// column or `1 × q` row when `a` is `p × q`.
    pub fn binary(&mut self, a: Var, b: Var, f: BinaryFn) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = if av.shape == bv.shape {
            Broadcast::None
        } else if bv.numel() == 1 {
            Broadcast::Scalar
        } else if av.rank() == 2 && bv.shape == [av.shape[0], 1] {
            Broadcast::Column
        } else if av.rank() == 2 && bv.shape == [1, av.shape[1]] {
            Broadcast::Row
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        };
        let cols = if av.rank() == 2 { av.shape[1] } else { 1 };
        let apply = |x: T, y: T| match f {
            BinaryFn::Add => x + y,
            BinaryFn::Sub => x - y,
            BinaryFn::Mul => x * y,
        };
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| apply(x, bv.data[bc_index(bc, i, cols)]))
            .collect();
        let shape = av.shape.clone();
        let rg = av.requires_grad || bv.requires_grad;
        Ok(self.derived(shape, data, rg, Op::Binary(a, b, f, bc)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryFn::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryFn::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryFn::Mul)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let (p, q, r) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![T::zero(); p * r];
        matmul_into(&av.data, &bv.data, &mut out, p, q, r);
        let rg = av.requires_grad || bv.requires_grad;
        Ok(self.derived(vec![p, r], out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: xv.shape.clone(),
            });
        }
        let (r, c) = (xv.shape[0], xv.shape[1]);
        let data = transpose_data(&xv.data, r, c);
        let rg = xv.requires_grad;
        Ok(self.derived(vec![c, r], data, rg, Op::Transpose(x)))
    }

    /// Softmax along `axis`; the axis maximum is subtracted before
    /// exponentiating.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_axis("softmax", axis, xv.rank())?;
        let (outer, len, inner) = split_axis(&xv.shape, axis);
        let mut out = vec![T::zero(); xv.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len)
                    .map(|a| xv.data[idx(a)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (xv.data[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] = out[idx(a)] / total;
                }
            }
        }
        let shape = xv.shape.clone();
        let rg = xv.requires_grad;
        Ok(self.derived(shape, out, rg, Op::Softmax(x, axis)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty("concat"))?;
        let base = self.nodes[first.0].value.shape.clone();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].value.shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let pv = &self.nodes[p.0].value;
                let chunk = pv.shape[axis] * inner;
                out.extend_from_slice(&pv.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.derived(shape, out, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Sum or mean along `axis`, or over all elements when `axis` is `None`
    /// (result shape `[1, 1]`).
    pub fn reduce(&mut self, x: Var, f: ReduceFn, axis: Option<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (shape, data) = match axis {
            None => {
                let s: T = xv.data.iter().copied().sum();
                let v = match f {
                    ReduceFn::Sum => s,
                    ReduceFn::Mean => s / T::from_usize(xv.numel()).unwrap(),
                };
                (vec![1, 1], vec![v])
            }
            Some(axis) => {
                check_axis("reduce", axis, xv.rank())?;
                let (outer, len, inner) = split_axis(&xv.shape, axis);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += xv.data[(o * len + a) * inner + i];
                        }
                    }
                }
                if f == ReduceFn::Mean {
                    let n = T::from_usize(len).unwrap();
                    out.iter_mut().for_each(|v| *v = *v / n);
                }
                let mut shape = xv.shape.clone();
                shape[axis] = 1;
                (shape, out)
            }
        };
        let rg = xv.requires_grad;
        Ok(self.derived(shape, data, rg, Op::Reduce(x, f, axis)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceFn::Sum, None).expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceFn::Mean, None)
            .expect("full reduction")
    }

    /// The flat element `index` of `x` as a `1 × 1` tensor.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let len = xv.numel();
        if index >= len {
            return Err(TensorError::IndexOutOfRange {
                op: "element",
                index,
                len,
            });
        }
        let v = xv.data[index];
        let rg = xv.requires_grad;
        Ok(self.derived(vec![1, 1], vec![v], rg, Op::Element(x, index)))
    }

    /// Rows `start .. start + len` of a rank-2 tensor.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(TensorError::Rank {
                op: "rows",
                expected: 2,
                shape: xv.shape.clone(),
            });
        }
        let (r, c) = (xv.shape[0], xv.shape[1]);
        if start + len > r {
            return Err(TensorError::IndexOutOfRange {
                op: "rows",
                index: start + len,
                len: r,
            });
        }
        let data = xv.data[start * c..(start + len) * c].to_vec();
        let rg = xv.requires_grad;
        Ok(self.derived(vec![len, c], data, rg, Op::Rows(x, start)))
    }

    /// Mean cross-entropy of `batch × classes` logits against class indices,
    /// through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() != 2 || lv.shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape.clone(),
                right: vec![targets.len()],
            });
        }
        let (b, c) = (lv.shape[0], lv.shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::ClassOutOfRange {
                index: bad,
                classes: c,
            });
        }
        if b == 0 {
            return Err(TensorError::Empty("cross_entropy"));
        }
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data[r * c..(r + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / T::from_usize(b).unwrap();
        let rg = lv.requires_grad;
        Ok(self.derived(
            vec![1, 1],
            vec![loss],
            rg,
            Op::CrossEntropy(logits, targets.to_vec()),
        ))
    }

    /// Mean absolute error between equally shaped tensors.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if pv.shape != tv.shape {
            return Err(TensorError::ShapeMismatch {
                op: "l1",
                left: pv.shape.clone(),
                right: tv.shape.clone(),
            });
        }
        if pv.numel() == 0 {
            return Err(TensorError::Empty("l1"));
        }
        let total: T = pv
            .data
            .iter()
            .zip(&tv.data)
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let loss = total / T::from_usize(pv.numel()).unwrap();
        let rg = pv.requires_grad || tv.requires_grad;
        Ok(self.derived(vec![1, 1], vec![loss], rg, Op::L1(pred, target)))
    }

    /// Class-index losses go through [`Graph::cross_entropy`]; this entry
    /// point takes targets as a tensor for either kind.
    pub fn loss(&mut self, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
        match kind {
            LossKind::L1 => self.l1(pred, target),
            LossKind::CrossEntropyWithLogits => {
                let tv = &self.nodes[target.0].value;
                let mut idx = Vec::with_capacity(tv.numel());
                for &v in &tv.data {
                    match v.to_usize() {
                        Some(i) if T::from_usize(i) == Some(v) => idx.push(i),
                        _ => return Err(TensorError::InvalidClassLabel(v.to_f64_lossy())),
                    }
                }
                self.cross_entropy(pred, &idx)
            }
        }
    }

    // ----- backward -----

    /// Accumulates `∂root/∂node` into the gradient slot of every node that
    /// requires grad. Repeated calls add up; zero with [`Graph::zero_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, f) => {
                if !self.requires(*x) {
                    return;
                }
                let xv = &self.nodes[x.0].value.data;
                let d: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let y = out.data[i];
                        gi * match f {
                            UnaryFn::Tanh => T::one() - y * y,
                            UnaryFn::Sigmoid => y * (T::one() - y),
                            UnaryFn::Relu => {
                                if xv[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryFn::Neg => -T::one(),
                        }
                    })
                    .collect();
                add_adj(adj, *x, d);
            }
            Op::Binary(a, b, f, bc) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let cols = if av.rank() == 2 { av.shape[1] } else { 1 };
                if self.requires(*a) {
                    let d: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| match f {
                            BinaryFn::Add | BinaryFn::Sub => gi,
                            BinaryFn::Mul => gi * bv.data[bc_index(*bc, i, cols)],
                        })
                        .collect();
                    add_adj(adj, *a, d);
                }
                if self.requires(*b) {
                    let mut d = vec![T::zero(); bv.numel()];
                    for (i, &gi) in g.iter().enumerate() {
                        let contrib = match f {
                            BinaryFn::Add => gi,
                            BinaryFn::Sub => -gi,
                            BinaryFn::Mul => gi * av.data[i],
                        };
                        d[bc_index(*bc, i, cols)] += contrib;
                    }
                    add_adj(adj, *b, d);
                }
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (p, q, r) = (av.shape[0], av.shape[1], bv.shape[1]);
                if self.requires(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_data(&bv.data, q, r);
                    let mut d = vec![T::zero(); p * q];
                    matmul_into(g, &bt, &mut d, p, r, q);
                    add_adj(adj, *a, d);
                }
                if self.requires(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_data(&av.data, p, q);
                    let mut d = vec![T::zero(); q * r];
                    matmul_into(&at, g, &mut d, q, p, r);
                    add_adj(adj, *b, d);
                }
            }
            Op::Transpose(x) => {
                if self.requires(*x) {
                    let (r, c) = (out.shape[0], out.shape[1]);
                    add_adj(adj, *x, transpose_data(g, r, c));
                }
            }
            Op::Softmax(x, axis) => {
                if !self.requires(*x) {
                    return;
                }
                let (outer, len, inner) = split_axis(&out.shape, *axis);
                let y = &out.data;
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            d[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                add_adj(adj, *x, d);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(&out.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    let len = pv.shape[*axis];
                    if self.requires(*p) {
                        let mut d = Vec::with_capacity(pv.numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + len * inner]);
                        }
                        add_adj(adj, *p, d);
                    }
                    offset += len;
                }
            }
            Op::Reduce(x, f, axis) => {
                if !self.requires(*x) {
                    return;
                }
                let xv = &self.nodes[x.0].value;
                let d = match axis {
                    None => {
                        let scale = match f {
                            ReduceFn::Sum => T::one(),
                            ReduceFn::Mean => T::one() / T::from_usize(xv.numel()).unwrap(),
                        };
                        vec![g[0] * scale; xv.numel()]
                    }
                    Some(axis) => {
                        let (outer, len, inner) = split_axis(&xv.shape, *axis);
                        let scale = match f {
                            ReduceFn::Sum => T::one(),
                            ReduceFn::Mean => T::one() / T::from_usize(len).unwrap(),
                        };
                        let mut d = vec![T::zero(); xv.numel()];
                        for o in 0..outer {
                            for a in 0..len {
                                for i in 0..inner {
                                    d[(o * len + a) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        d
                    }
                };
                add_adj(adj, *x, d);
            }
            Op::Element(x, index) => {
                if self.requires(*x) {
                    let mut d = vec![T::zero(); self.nodes[x.0].value.numel()];
                    d[*index] = g[0];
                    add_adj(adj, *x, d);
                }
            }
            Op::Rows(x, start) => {
                if self.requires(*x) {
                    let xv = &self.nodes[x.0].value;
                    let c = xv.shape[1];
                    let mut d = vec![T::zero(); xv.numel()];
                    d[start * c..start * c + g.len()].copy_from_slice(g);
                    add_adj(adj, *x, d);
                }
            }
            Op::CrossEntropy(logits, targets) => {
                if !self.requires(*logits) {
                    return;
                }
                let lv = &self.nodes[logits.0].value;
                let (b, c) = (lv.shape[0], lv.shape[1]);
                let scale = g[0] / T::from_usize(b).unwrap();
                let mut d = vec![T::zero(); b * c];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv.data[r * c..(r + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        let onehot = if j == t { T::one() } else { T::zero() };
                        d[r * c + j] = (p - onehot) * scale;
                    }
                }
                add_adj(adj, *logits, d);
            }
            Op::L1(pred, target) => {
                let pv = &self.nodes[pred.0].value;
                let tv = &self.nodes[target.0].value;
                let scale = g[0] / T::from_usize(pv.numel()).unwrap();
                let signs: Vec<T> = pv
                    .data
                    .iter()
                    .zip(&tv.data)
                    .map(|(&p, &t)| {
                        let diff = p - t;
                        if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.requires(*target) {
                    add_adj(adj, *target, signs.iter().map(|&s| -s).collect());
                }
                if self.requires(*pred) {
                    add_adj(adj, *pred, signs);
                }
            }
        }
    }
}

fn add_adj<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match adj[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &x)| *a += x),
        None => adj[v.0] = Some(d),
    }
}

#[inline]
fn bc_index(bc: Broadcast, i: usize, cols: usize) -> usize {
    match bc {
        Broadcast::None => i,
        Broadcast::Scalar => 0,
        Broadcast::Column => i / cols,
        Broadcast::Row => i % cols,
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// `out (p×r) += a (p×q) · b (q×r)`.
fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn transpose_data<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn col(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.leaf(Tensor::column(v.to_vec()).with_requires_grad(true))
    }

    #[test]
    fn unary_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let t = g.tanh(z);
        let s = g.sigmoid(z);
        assert_eq!(g.value(t).data(), &[0.0]);
        assert_eq!(g.value(s).data(), &[0.5]);
        let one = g.constant(Tensor::vector(vec![1.0]));
        let t1 = g.tanh(one);
        let e2 = (2.0f64).exp();
        assert_abs_diff_eq!(g.value(t1).item(), (e2 - 1.0) / (e2 + 1.0), epsilon = 1e-15);
        let x = g.constant(Tensor::vector(vec![-1.5, 2.0]));
        let r = g.relu(x);
        let n = g.neg(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        assert_eq!(g.value(n).data(), &[1.5, -2.0]);
    }

    #[test]
    fn binary_values_and_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.add(a, z).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0]);
        let x = g.constant(Tensor::vector(vec![2.0, 3.0]));
        let y = g.constant(Tensor::vector(vec![4.0, 5.0]));
        let m = g.mul(x, y).unwrap();
        assert_eq!(g.value(m).data(), &[8.0, 15.0]);

        let mat = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.constant(Tensor::column(vec![10.0, 20.0]));
        let bc = g.add(mat, c).unwrap();
        assert_eq!(g.value(bc).data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let k = g.constant(Tensor::scalar(2.0));
        let sc = g.mul(mat, k).unwrap();
        assert_eq!(g.value(sc).data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn binary_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_values_and_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::column(vec![5.0, 6.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);
        let i = g.constant(Tensor::identity(2));
        let ia = g.matmul(i, a).unwrap();
        assert_eq!(g.value(ia).data(), g.value(a).data());
        let row = g.constant(Tensor::row(vec![1.0, 1.0, 1.0]));
        let m = g.constant(Tensor::zeros(&[3, 4]));
        let rm = g.matmul(row, m).unwrap();
        assert_eq!(g.shape(rm), &[1, 4]);
        assert!(matches!(
            g.matmul(a, m),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.softmax(x, 0).unwrap();
        let expect = [0.09003, 0.24473, 0.66524];
        for (v, e) in g.value(s).data().iter().zip(expect) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-5);
        }
        let x = g.constant(Tensor::vector(vec![500.0, -500.0, 499.0]));
        let s = g.softmax(x, 0).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(matches!(
            g.softmax(x, 1),
            Err(TensorError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn softmax_along_rows_and_columns() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let rows = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(rows).data(), &[0.5, 0.5, 0.5, 0.5]);
        let cols = g.softmax(x, 0).unwrap();
        let v = g.value(cols).data();
        assert_abs_diff_eq!(v[0] + v[2], 1.0, epsilon = 1e-15);
        assert!(v[2] > v[0]);
    }

    #[test]
    fn concat_values_and_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let b = g.constant(Tensor::vector(vec![2.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);

        let m1 = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let m2 = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let h = g.concat(&[m1, m2], 1).unwrap();
        assert_eq!(g.shape(h), &[2, 3]);
        assert_eq!(g.value(h).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert!(matches!(
            g.concat(&[m1, m2], 0),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(g.concat(&[], 0), Err(TensorError::Empty(_))));
    }

    #[test]
    fn reduce_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![2.0, 4.0]));
        let m = g.mean(x);
        assert_eq!(g.value(m).item(), 3.0);
        let z = g.constant(Tensor::zeros(&[3, 2]));
        let s = g.sum(z);
        assert_eq!(g.value(s).item(), 0.0);
        let mat = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let r = g.reduce(mat, ReduceFn::Sum, Some(1)).unwrap();
        assert_eq!(g.shape(r), &[2, 1]);
        assert_eq!(g.value(r).data(), &[6.0, 15.0]);
        let c = g.reduce(mat, ReduceFn::Mean, Some(0)).unwrap();
        assert_eq!(g.value(c).data(), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn losses() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let ce = g.cross_entropy(logits, &[0]).unwrap();
        assert_abs_diff_eq!(g.value(ce).item(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(matches!(
            g.cross_entropy(logits, &[2]),
            Err(TensorError::ClassOutOfRange {
                index: 2,
                classes: 2
            })
        ));

        let p = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let t = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let l = g.l1(p, t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let p = g.constant(Tensor::vector(vec![0.0]));
        let t = g.constant(Tensor::vector(vec![3.0]));
        let l = g.loss(p, t, LossKind::L1).unwrap();
        assert_eq!(g.value(l).item(), 3.0);

        let target = g.constant(Tensor::vector(vec![1.0]));
        let ce = g
            .loss(logits, target, LossKind::CrossEntropyWithLogits)
            .unwrap();
        assert_abs_diff_eq!(g.value(ce).item(), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn l1_tie_has_zero_subgradient() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let t = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = g.l1(p, t).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_leaf_and_square_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);

        let mut g = Graph::<f64>::new();
        let x = col(&mut g, &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = col(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(
            Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.2])
                .unwrap()
                .with_requires_grad(true),
        );
        let x = col(&mut g, &[0.4, -1.3]);
        let y = g.matmul(w, x).unwrap();
        let t = g.tanh(y);
        let s = g.softmax(t, 0).unwrap();
        let e = g.element(s, 1).unwrap();
        g.backward(e).unwrap();
        let once = g.grad(w).unwrap().to_vec();
        g.backward(e).unwrap();
        let twice = g.grad(w).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn broadcast_gradients_sum_over_columns() {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(
            Tensor::matrix(2, 3, vec![1.0; 6])
                .unwrap()
                .with_requires_grad(true),
        );
        let c = col(&mut g, &[2.0, 3.0]);
        let p = g.mul(m, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(c).unwrap(), &[3.0, 3.0]);
        assert_eq!(g.grad(m).unwrap(), &[2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn row_broadcast_and_slicing() {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(
            Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let r = g.leaf(Tensor::row(vec![1.0, 10.0, 100.0]).with_requires_grad(true));
        let p = g.mul(m, r).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 20.0, 300.0, 4.0, 50.0, 600.0]);
        let second = g.rows(p, 1, 1).unwrap();
        assert_eq!(g.value(second).shape(), &[1, 3]);
        let s = g.sum(second);
        g.backward(s).unwrap();
        assert_eq!(g.grad(r).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.grad(m).unwrap(), &[0.0, 0.0, 0.0, 1.0, 10.0, 100.0]);
        assert!(matches!(
            g.rows(p, 1, 2),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn param_grads_follow_insertion_order() {
        let mut g = Graph::<f64>::new();
        let a = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let b = g.param(&Tensor::vector(vec![5.0]));
        let _unused = g.param(&Tensor::vector(vec![7.0, 7.0]));
        let ab = g.mul(a, b).unwrap();
        let s = g.sum(ab);
        g.backward(s).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads, vec![vec![5.0, 5.0], vec![3.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::vector(vec![1.0]));
        let x = g.leaf(Tensor::vector(vec![2.0]).with_requires_grad(true));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }
}

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which side of the divergence the teacher sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`
    Forward,
    /// `KL(student ‖ teacher)`
    Reverse,
}

/// How the inputs of [`Tape::kl_divergence`] are interpreted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KlInput {
    /// Raw logits, normalised with a temperature-scaled log-softmax.
    Logits { temperature: f64 },
    /// Already log-probabilities; used as-is.
    LogProbs,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulBt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    AddRow { a: usize, bias: usize },
    Gelu { a: usize },
    Exp { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: usize, outer: usize, len: usize, inner: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Attention { qkv: usize, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    SumAll { a: usize },
    MeanAll { a: usize },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    KlDiv { student: usize, grad_rows: Vec<f64>, rows: usize },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Records one forward pass for reverse-mode differentiation.
///
/// A tape lives for a single pass and is dropped after [`Tape::backward`].
/// An inference tape ([`Tape::inference`]) computes the same values but never
/// marks anything as requiring a gradient.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that never tracks gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            shape,
            requires_grad: requires_grad && self.record,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        self.record && vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a tensor; it participates in differentiation iff it requires grad.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a tensor with an explicit differentiability flag.
    pub fn leaf_with(&self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.data, t.shape, false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone()).expect("node shape is consistent")
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        dims2(&shape).ok_or(Error::Dimension {
            op,
            left: shape,
            right: vec![],
        })
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            kernels::matmul(&nodes[a.0].value, &nodes[b.0].value, m, k, n)
        };
        Ok(self.push(value, vec![m, n], self.needs(&[a, b]), Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// `[m,k] · [n,k]ᵀ`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_bt")?;
        let (n, k2) = self.matrix(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_bt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            kernels::matmul_bt(&nodes[a.0].value, &nodes[b.0].value, m, k, n)
        };
        Ok(self.push(value, vec![m, n], self.needs(&[a, b]), Op::MatMulBt { a: a.0, b: b.0, m, k, n }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension { op, left: sa, right: sb });
        }
        Ok(sa)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        nodes[a.0].value.iter().zip(&nodes[b.0].value).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.borrow()[a.0].value.iter().map(|x| f(*x)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, shape, self.needs(&[a, b]), Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, shape, self.needs(&[a, b]), Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, shape, self.needs(&[a, b]), Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.map(a, |x| x * factor);
        self.push(value, self.shape(a), self.needs(&[a]), Op::Scale { a: a.0, factor })
    }

    /// `[m,n] + [n]`, broadcasting the bias over rows.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(a);
        let bshape = self.shape(bias);
        if bshape.len() != 1 || shape.last() != bshape.first() {
            return Err(Error::Dimension {
                op: "add_row",
                left: shape,
                right: bshape,
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let mut v = nodes[a.0].value.clone();
            kernels::add_row_bias(&mut v, &nodes[bias.0].value);
            v
        };
        Ok(self.push(value, shape, self.needs(&[a, bias]), Op::AddRow { a: a.0, bias: bias.0 }))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let value = self.map(a, kernels::gelu);
        self.push(value, self.shape(a), self.needs(&[a]), Op::Gelu { a: a.0 })
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.map(a, f64::exp);
        self.push(value, self.shape(a), self.needs(&[a]), Op::Exp { a: a.0 })
    }

    /// Normalises each row of the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain),
            });
        }
        let (value, mean, rstd) = {
            let nodes = self.nodes.borrow();
            kernels::layer_norm(&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value, eps)
        };
        let needs = self.needs(&[x, gain, bias]);
        let (mean, rstd) = if needs { (mean, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(value, shape, needs, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, mean, rstd }))
    }

    fn axis_rows(&self, x: Var, axis: usize, log: bool) -> Result<(Vec<f64>, Vec<usize>, (usize, usize, usize))> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let nodes = self.nodes.borrow();
        let src = &nodes[x.0].value;
        let mut out = vec![0.0; src.len()];
        let mut row = vec![0.0; len];
        let mut dst = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = src[(o * len + j) * inner + i];
                }
                if log {
                    kernels::log_softmax_row(&row, &mut dst);
                } else {
                    dst.copy_from_slice(&row);
                    kernels::softmax_in_place(&mut dst);
                }
                for (j, d) in dst.iter().enumerate() {
                    out[(o * len + j) * inner + i] = *d;
                }
            }
        }
        Ok((out, shape, (outer, len, inner)))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (value, shape, (outer, len, inner)) = self.axis_rows(x, axis, false)?;
        Ok(self.push(value, shape, self.needs(&[x]), Op::Softmax { x: x.0, outer, len, inner }))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (value, shape, (outer, len, inner)) = self.axis_rows(x, axis, true)?;
        Ok(self.push(value, shape, self.needs(&[x]), Op::LogSoftmax { x: x.0, outer, len, inner }))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: rows,
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let mut v = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                v.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
            v
        };
        Ok(self.push(value, vec![ids.len(), d], self.needs(&[table]), Op::Embedding { table: table.0, ids: ids.to_vec() }))
    }

    /// Causal self-attention over packed `[batch*seq, 3*d]` query/key/value rows.
    pub fn causal_attention(&self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.matrix(qkv, "causal_attention")?;
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(Error::Dimension {
                op: "causal_attention",
                left: vec![rows, width],
                right: vec![batch, seq, heads],
            });
        }
        let d = width / 3;
        let needs = self.needs(&[qkv]);
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let packed = &nodes[qkv.0].value;
            let mut out = vec![0.0; rows * d];
            let mut probs = if needs { vec![0.0; batch * seq * heads * seq] } else { Vec::new() };
            let mut p_row = vec![0.0; heads * seq];
            for b in 0..batch {
                let base = &packed[b * seq * width..(b + 1) * seq * width];
                for t in 0..seq {
                    let query = &base[t * width..t * width + d];
                    let dst = &mut out[(b * seq + t) * d..(b * seq + t + 1) * d];
                    let n_keys = t + 1;
                    kernels::attend(query, base, n_keys, heads, dst, needs.then_some(&mut p_row[..heads * n_keys]));
                    if needs {
                        for h in 0..heads {
                            let off = ((b * seq + t) * heads + h) * seq;
                            probs[off..off + n_keys].copy_from_slice(&p_row[h * n_keys..(h + 1) * n_keys]);
                        }
                    }
                }
            }
            (out, probs)
        };
        Ok(self.push(value, vec![rows, d], needs, Op::Attention { qkv: qkv.0, batch, seq, heads, probs }))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.iter().sum();
        self.push(vec![s], vec![1], self.needs(&[a]), Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let (s, n) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.iter().sum::<f64>(), nodes[a.0].value.len())
        };
        self.push(vec![s / n as f64], vec![1], self.needs(&[a]), Op::MeanAll { a: a.0 })
    }

    /// Mean token cross-entropy of `[rows, vocab]` logits; `None` targets are skipped.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![rows, vocab],
                right: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: *bad,
                bound: vocab,
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract("cross_entropy needs at least one target"));
        }
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.0].value;
            let mut probs = vec![0.0; x.len()];
            let mut lp = vec![0.0; vocab];
            let mut total = 0.0;
            for (r, t) in targets.iter().enumerate() {
                let row = &x[r * vocab..(r + 1) * vocab];
                kernels::log_softmax_row(row, &mut lp);
                if let Some(t) = t {
                    total -= lp[*t];
                }
                for (p, l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&lp) {
                    *p = l.exp();
                }
            }
            (total / count as f64, probs)
        };
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            needs,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, count },
        ))
    }

    /// Mean per-row KL divergence between `student` rows and the detached
    /// `teacher` rows (both `[rows, vocab]`).
    pub fn kl_divergence(&self, student: Var, teacher: &[f64], direction: KlDirection, input: KlInput) -> Result<Var> {
        let (rows, vocab) = self.matrix(student, "kl_divergence")?;
        if teacher.len() != rows * vocab {
            return Err(Error::Dimension {
                op: "kl_divergence",
                left: vec![rows, vocab],
                right: vec![teacher.len()],
            });
        }
        let (loss, grad_rows) = {
            let nodes = self.nodes.borrow();
            let s = &nodes[student.0].value;
            let mut ls = vec![0.0; vocab];
            let mut lt = vec![0.0; vocab];
            let mut grad = vec![0.0; rows * vocab];
            let mut total = 0.0;
            for r in 0..rows {
                let srow = &s[r * vocab..(r + 1) * vocab];
                let trow = &teacher[r * vocab..(r + 1) * vocab];
                let g = &mut grad[r * vocab..(r + 1) * vocab];
                match input {
                    KlInput::Logits { temperature } => {
                        let scaled: Vec<f64> = srow.iter().map(|v| v / temperature).collect();
                        kernels::log_softmax_row(&scaled, &mut ls);
                        let scaled: Vec<f64> = trow.iter().map(|v| v / temperature).collect();
                        kernels::log_softmax_row(&scaled, &mut lt);
                        let row_kl = kl_row(&ls, &lt, direction);
                        for j in 0..vocab {
                            let (ps, pt) = (ls[j].exp(), lt[j].exp());
                            g[j] = match direction {
                                KlDirection::Forward => (ps - pt) / temperature,
                                KlDirection::Reverse => ps * ((ls[j] - lt[j]) - row_kl) / temperature,
                            };
                        }
                        total += row_kl;
                    }
                    KlInput::LogProbs => {
                        let row_kl = kl_row(srow, trow, direction);
                        for j in 0..vocab {
                            g[j] = match direction {
                                KlDirection::Forward => -trow[j].exp(),
                                KlDirection::Reverse => srow[j].exp() * (srow[j] - trow[j] + 1.0),
                            };
                        }
                        total += row_kl;
                    }
                }
            }
            (total / rows as f64, grad)
        };
        let needs = self.needs(&[student]);
        let grad_rows = if needs { grad_rows } else { Vec::new() };
        Ok(self.push(vec![loss], vec![1], needs, Op::KlDiv { student: student.0, grad_rows, rows }))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Err(Error::contract("loss is not connected to any tensor that requires grad"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| &nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if rg(a) {
                    let da = acc(grads, a, m * k);
                    gemm(m, n, k, g, n as isize, 1, val(b), 1, n as isize, 1.0, da, k as isize, 1);
                }
                if rg(b) {
                    let db = acc(grads, b, k * n);
                    gemm(k, m, n, val(a), 1, k as isize, g, n as isize, 1, 1.0, db, n as isize, 1);
                }
            }
            &Op::MatMulBt { a, b, m, k, n } => {
                if rg(a) {
                    let da = acc(grads, a, m * k);
                    gemm(m, n, k, g, n as isize, 1, val(b), k as isize, 1, 1.0, da, k as isize, 1);
                }
                if rg(b) {
                    let db = acc(grads, b, n * k);
                    gemm(n, m, k, g, 1, n as isize, val(a), k as isize, 1, 1.0, db, k as isize, 1);
                }
            }
            &Op::Add { a, b } => {
                for (src, sign) in [(a, 1.0), (b, 1.0)] {
                    if rg(src) {
                        acc(grads, src, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (src, sign) in [(a, 1.0), (b, -1.0)] {
                    if rg(src) {
                        acc(grads, src, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if rg(a) {
                    let other = val(b);
                    acc(grads, a, g.len()).iter_mut().zip(g.iter().zip(other)).for_each(|(d, (g, o))| *d += g * o);
                }
                if rg(b) {
                    let other = val(a);
                    acc(grads, b, g.len()).iter_mut().zip(g.iter().zip(other)).for_each(|(d, (g, o))| *d += g * o);
                }
            }
            &Op::Scale { a, factor } => {
                acc(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += factor * g);
            }
            &Op::AddRow { a, bias } => {
                if rg(a) {
                    acc(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if rg(bias) {
                    let n = nodes[bias].value.len();
                    let db = acc(grads, bias, n);
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Gelu { a } => {
                let x = val(a);
                acc(grads, a, g.len())
                    .iter_mut()
                    .zip(g.iter().zip(x))
                    .for_each(|(d, (g, x))| *d += g * kernels::gelu_derivative(*x));
            }
            &Op::Exp { a } => {
                let y = &node.value;
                acc(grads, a, g.len()).iter_mut().zip(g.iter().zip(y)).for_each(|(d, (g, y))| *d += g * y);
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = nodes[gain].value.len();
                let xs = val(x);
                let gw = val(gain);
                let rows = xs.len() / n;
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = if rg(x) { vec![0.0; xs.len()] } else { Vec::new() };
                for r in 0..rows {
                    let row = &xs[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    for i in 0..n {
                        xhat[i] = (row[i] - mean[r]) * rstd[r];
                        dgain[i] += gr[i] * xhat[i];
                        dbias[i] += gr[i];
                        dxhat[i] = gr[i] * gw[i];
                    }
                    if rg(x) {
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for i in 0..n {
                            dx[r * n + i] = rstd[r] * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
                if rg(x) {
                    acc(grads, x, xs.len()).iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
                }
                if rg(gain) {
                    acc(grads, gain, n).iter_mut().zip(&dgain).for_each(|(d, v)| *d += v);
                }
                if rg(bias) {
                    acc(grads, bias, n).iter_mut().zip(&dbias).for_each(|(d, v)| *d += v);
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let dx = acc(grads, x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dotp: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dotp);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, outer, len, inner } => {
                let y = &node.value;
                let dx = acc(grads, x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let gsum: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gsum;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let d = nodes[table].shape[1];
                let dt = acc(grads, table, nodes[table].value.len());
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
            Op::Attention { qkv, batch, seq, heads, probs } => {
                let (qkv, batch, seq, heads) = (*qkv, *batch, *seq, *heads);
                let packed = val(qkv);
                let width = nodes[qkv].shape[1];
                let d = width / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let dp = acc(grads, qkv, packed.len());
                let mut dprob = vec![0.0; seq];
                for b in 0..batch {
                    let row0 = b * seq;
                    for t in 0..seq {
                        for h in 0..heads {
                            let p = &probs[((row0 + t) * heads + h) * seq..][..t + 1];
                            let go = &g[(row0 + t) * d + h * dh..][..dh];
                            let mut s = 0.0;
                            for j in 0..=t {
                                let v = &packed[(row0 + j) * width + 2 * d + h * dh..][..dh];
                                dprob[j] = kernels::dot(go, v);
                                s += p[j] * dprob[j];
                            }
                            for j in 0..=t {
                                let ds = p[j] * (dprob[j] - s) * scale;
                                let qoff = (row0 + t) * width + h * dh;
                                let koff = (row0 + j) * width + d + h * dh;
                                let voff = (row0 + j) * width + 2 * d + h * dh;
                                for c in 0..dh {
                                    dp[qoff + c] += ds * packed[koff + c];
                                    dp[koff + c] += ds * packed[qoff + c];
                                    dp[voff + c] += p[j] * go[c];
                                }
                            }
                        }
                    }
                }
            }
            &Op::SumAll { a } => {
                let n = nodes[a].value.len();
                acc(grads, a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::MeanAll { a } => {
                let n = nodes[a].value.len();
                let s = g[0] / n as f64;
                acc(grads, a, n).iter_mut().for_each(|d| *d += s);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vocab = nodes[*logits].shape[1];
                let s = g[0] / *count as f64;
                let dl = acc(grads, *logits, probs.len());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..vocab {
                            dl[r * vocab + j] += s * probs[r * vocab + j];
                        }
                        dl[r * vocab + t] -= s;
                    }
                }
            }
            Op::KlDiv { student, grad_rows, rows } => {
                let s = g[0] / *rows as f64;
                acc(grads, *student, grad_rows.len()).iter_mut().zip(grad_rows).for_each(|(d, v)| *d += s * v);
            }
        }
    }
}

fn kl_row(student_logp: &[f64], teacher_logp: &[f64], direction: KlDirection) -> f64 {
    let (p, q) = match direction {
        KlDirection::Forward => (teacher_logp, student_logp),
        KlDirection::Reverse => (student_logp, teacher_logp),
    };
    // Zero-probability terms contribute nothing (0 · log 0 = 0).
    p.iter()
        .zip(q)
        .filter(|(lp, _)| **lp != f64::NEG_INFINITY)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

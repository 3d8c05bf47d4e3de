use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag recorded for every node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Hadamard,
    Sigmoid,
    Tanh,
    Relu,
    Affine,
    MatVecT,
    Conv1dRowShared,
    SoftmaxLast,
    ConcatLast,
    CrossEntropy,
    Reparameterize,
    Dropout,
    Stack,
    Reshape,
    Sum,
    Scale,
    SumSquares,
    KldDiagGaussian,
    Clamp,
}

impl OpKind {
    /// Every differentiable operation (leaves excluded).
    pub const DIFFERENTIABLE: [OpKind; 20] = [
        OpKind::Add,
        OpKind::Hadamard,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Affine,
        OpKind::MatVecT,
        OpKind::Conv1dRowShared,
        OpKind::SoftmaxLast,
        OpKind::ConcatLast,
        OpKind::CrossEntropy,
        OpKind::Reparameterize,
        OpKind::Dropout,
        OpKind::Stack,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Scale,
        OpKind::SumSquares,
        OpKind::KldDiagGaussian,
        OpKind::Clamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Hadamard => "hadamard",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Affine => "affine",
            OpKind::MatVecT => "matvec_t",
            OpKind::Conv1dRowShared => "conv1d_row_shared",
            OpKind::SoftmaxLast => "softmax_last",
            OpKind::ConcatLast => "concat_last",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Reparameterize => "reparameterize",
            OpKind::Dropout => "dropout",
            OpKind::Stack => "stack",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
            OpKind::SumSquares => "sum_squares",
            OpKind::KldDiagGaussian => "kld_diag_gaussian",
            OpKind::Clamp => "clamp",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(OpKind::Leaf)
            .chain(OpKind::DIFFERENTIABLE)
            .find(|k| k.name() == s)
            .ok_or_else(|| DiffError::UnknownOp(s.to_string()))
    }
}

/// Kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Hadamard,
    Sigmoid,
    Tanh,
    Relu,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Hadamard)
    }
}

impl FromStr for Elementwise {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "add" => Elementwise::Add,
            "hadamard" => Elementwise::Hadamard,
            "sigmoid" => Elementwise::Sigmoid,
            "tanh" => Elementwise::Tanh,
            "relu" => Elementwise::Relu,
            other => return Err(DiffError::UnknownOp(other.to_string())),
        })
    }
}

/// A 1-D convolution kernel bound to a tape: weights `[width, in, out]`, bias `[out]`.
#[derive(Clone, Copy, Debug)]
pub struct Kernel {
    pub weights: Var,
    pub bias: Var,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Kernel {
    pub fn new(tape: &Tape, weights: Var, bias: Var) -> Result<Self, DiffError> {
        let ws = tape.shape(weights);
        if ws.len() != 3 {
            return Err(DiffError::shape("kernel weights must be [width, in, out]", ws, &[]));
        }
        let (width, cin, cout) = (ws[0], ws[1], ws[2]);
        if width % 2 == 0 {
            return Err(DiffError::EvenKernel(width));
        }
        if tape.shape(bias) != [cout] {
            return Err(DiffError::shape("kernel bias", tape.shape(bias), &[cout]));
        }
        Ok(Self {
            weights,
            bias,
            width,
            in_channels: cin,
            out_channels: cout,
        })
    }
}

/// Log floor inside cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Hadamard(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Affine {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    MatVecT {
        m: Var,
        w: Var,
    },
    Conv {
        input: Var,
        kernel: Kernel,
        rows: usize,
        steps: usize,
    },
    Softmax(Var),
    Concat {
        a: Var,
        b: Var,
        la: usize,
        lb: usize,
    },
    CrossEntropy {
        probs: Var,
        label: usize,
    },
    Reparam {
        mu: Var,
        logvar: Var,
        eps: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Stack(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Scale(Var, f64),
    SumSquares(Var),
    Kld {
        mu_q: Var,
        lv_q: Var,
        mu_p: Var,
        lv_p: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Affine { .. } => OpKind::Affine,
            Op::MatVecT { .. } => OpKind::MatVecT,
            Op::Conv { .. } => OpKind::Conv1dRowShared,
            Op::Softmax(_) => OpKind::SoftmaxLast,
            Op::Concat { .. } => OpKind::ConcatLast,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Reparam { .. } => OpKind::Reparameterize,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Stack(_) => OpKind::Stack,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::SumSquares(_) => OpKind::SumSquares,
            Op::Kld { .. } => OpKind::KldDiagGaussian,
            Op::Clamp { .. } => OpKind::Clamp,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
            Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Scale(a, _)
            | Op::SumSquares(a) => vec![*a],
            Op::Affine { w, x, b } => {
                let mut p = vec![*w, *x];
                p.extend(b);
                p
            }
            Op::MatVecT { m, w } => vec![*m, *w],
            Op::Conv { input, kernel, .. } => vec![*input, kernel.weights, kernel.bias],
            Op::Concat { a, b, .. } => vec![*a, *b],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::Reparam { mu, logvar, .. } => vec![*mu, *logvar],
            Op::Dropout { x, .. } => vec![*x],
            Op::Stack(vs) => vs.clone(),
            Op::Kld {
                mu_q,
                lv_q,
                mu_p,
                lv_p,
            } => vec![*mu_q, *lv_q, *mu_p, *lv_p],
            Op::Clamp { x, .. } => vec![*x],
        }
    }
}

/// Dot product over eight interleaved partial sums, which lets the compiler
/// vectorize; the summation order is fixed, so results stay reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Records operations in creation order and replays them in reverse to
/// accumulate gradients. A tape is used by one thread at a time.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.grads.is_some())
            .finish()
    }
}

fn check_finite(op: OpKind, data: &[f64]) -> Result<(), DiffError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite {
            context: format!("output of {op}"),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
            fault: None,
        }
    }

    /// Mutation-test hook: every backward contribution of `kind` is scaled
    /// by 1.01, so a gradient checker must flag it.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, DiffError> {
        if self.grads.is_some() {
            return Err(DiffError::TapeSealed);
        }
        check_finite(op.kind(), value.data())?;
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.leaf_shared(Arc::new(value))
    }

    /// Registers a shared tensor (typically a model parameter) without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::shape(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var, DiffError> {
        match (kind.is_binary(), b) {
            (true, None) => Err(DiffError::MissingOperand(kind)),
            (false, Some(_)) => Err(DiffError::UnexpectedOperand(kind)),
            (true, Some(b)) => match kind {
                Elementwise::Add => self.add(a, b),
                _ => self.hadamard(a, b),
            },
            (false, None) => match kind {
                Elementwise::Sigmoid => self.sigmoid(a),
                Elementwise::Tanh => self.tanh(a),
                _ => self.relu(a),
            },
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(out, Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("hadamard", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(out, Op::Hadamard(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, DiffError> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    // ---- linear algebra ----------------------------------------------------

    /// `W x + b` for `W: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var, DiffError> {
        self.affine_impl(w, x, Some(b))
    }

    /// `M x` for `M: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var, DiffError> {
        self.affine_impl(m, x, None)
    }

    fn affine_impl(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let ws = self.shape(w);
        let xs = self.shape(x);
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(DiffError::shape("affine W·x", ws, xs));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(DiffError::shape("affine bias", self.shape(b), &[m]));
            }
        }
        let wd = self.data(w);
        let xd = self.data(x);
        let mut out: Vec<f64> = match b {
            Some(b) => self.data(b).to_vec(),
            None => vec![0.0; m],
        };
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            *o += dot(row, xd);
        }
        self.push(Tensor::from_parts(vec![m], out), Op::Affine { w, x, b })
    }

    /// `Mᵀ w` for `M: [n, d]`, `w: [n]`; the weighted sum of the rows of `M`.
    pub fn matvec_t(&mut self, m: Var, w: Var) -> Result<Var, DiffError> {
        let ms = self.shape(m);
        let wsh = self.shape(w);
        if ms.len() != 2 || wsh.len() != 1 || ms[0] != wsh[0] {
            return Err(DiffError::shape("matvec_t Mᵀ·w", ms, wsh));
        }
        let (n, d) = (ms[0], ms[1]);
        let md = self.data(m);
        let wd = self.data(w);
        let mut out = vec![0.0; d];
        for i in 0..n {
            let row = &md[i * d..(i + 1) * d];
            for (o, r) in out.iter_mut().zip(row) {
                *o += wd[i] * r;
            }
        }
        self.push(Tensor::from_parts(vec![d], out), Op::MatVecT { m, w })
    }

    /// Slides `kernel` along the time axis of a `[rows, steps, in]` grid with
    /// zero "same" padding; the same weights apply to every row.
    pub fn conv1d_row_shared(&mut self, input: Var, kernel: &Kernel) -> Result<Var, DiffError> {
        let s = self.shape(input);
        if s.len() != 3 {
            return Err(DiffError::shape("conv input must be [rows, steps, channels]", s, &[]));
        }
        let (rows, steps, cin) = (s[0], s[1], s[2]);
        if cin != kernel.in_channels {
            return Err(DiffError::ChannelMismatch {
                expected: kernel.in_channels,
                got: cin,
            });
        }
        let cout = kernel.out_channels;
        let pad = kernel.width / 2;
        let x = self.data(input);
        let w = self.data(kernel.weights);
        let bias = self.data(kernel.bias);
        let mut out = vec![0.0; rows * steps * cout];
        for f in 0..rows {
            for t in 0..steps {
                let o = &mut out[(f * steps + t) * cout..(f * steps + t + 1) * cout];
                o.copy_from_slice(bias);
                for k in 0..kernel.width {
                    let src = t + k;
                    if src < pad || src - pad >= steps {
                        continue;
                    }
                    let xin = &x[(f * steps + src - pad) * cin..(f * steps + src - pad + 1) * cin];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                        for (ov, wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        let kernel = *kernel;
        self.push(
            Tensor::from_parts(vec![rows, steps, cout], out),
            Op::Conv {
                input,
                kernel,
                rows,
                steps,
            },
        )
    }

    // ---- structure ---------------------------------------------------------

    pub fn softmax_last(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return Err(DiffError::EmptySoftmax);
        }
        let mut out = self.data(x).to_vec();
        for slice in out.chunks_mut(n) {
            let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in slice.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in slice.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(DiffError::shape("concat_last", sa, sb));
        }
        let la = *sa.last().unwrap();
        let lb = *sb.last().unwrap();
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = la + lb;
        let outer: usize = sa[..sa.len() - 1].iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(outer * (la + lb));
        for i in 0..outer {
            out.extend_from_slice(&da[i * la..(i + 1) * la]);
            out.extend_from_slice(&db[i * lb..(i + 1) * lb]);
        }
        self.push(Tensor::from_parts(shape, out), Op::Concat { a, b, la, lb })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var, DiffError> {
        let first = *vars.first().ok_or(DiffError::EmptyStack)?;
        let inner = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(vars.len() * self.value(first).len());
        for &v in vars {
            if self.shape(v) != inner.as_slice() {
                return Err(DiffError::shape("stack", self.shape(v), &inner));
            }
            out.extend_from_slice(self.data(v));
        }
        let mut shape = vec![vars.len()];
        shape.extend(inner);
        self.push(Tensor::from_parts(shape, out), Op::Stack(vars.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(DiffError::shape("reshape", self.shape(x), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.data(x).to_vec());
        self.push(out, Op::Reshape(x))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    // ---- reductions and losses --------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).sum_squares();
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::SumSquares(x))
    }

    /// Sum of scalar nodes, each multiplied by its weight.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, DiffError> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, w)? };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or(DiffError::EmptyStack)
    }

    /// Mean of scalar nodes.
    pub fn mean_of(&mut self, terms: &[Var]) -> Result<Var, DiffError> {
        let w = 1.0 / terms.len().max(1) as f64;
        let weighted: Vec<(Var, f64)> = terms.iter().map(|&v| (v, w)).collect();
        self.weighted_sum(&weighted)
    }

    /// `−ln(max(probs[label], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var, DiffError> {
        let p = self.data(probs);
        if label >= p.len() {
            return Err(DiffError::LabelOutOfRange {
                label,
                classes: p.len(),
            });
        }
        let loss = -p[label].max(CE_FLOOR).ln();
        self.push(Tensor::from_parts(vec![1], vec![loss]), Op::CrossEntropy { probs, label })
    }

    /// `mu + exp(logvar / 2) ⊙ eps`; `eps` is a constant.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var, DiffError> {
        self.same_shape("reparameterize mu/logvar", mu, logvar)?;
        if eps.shape() != self.shape(mu) {
            return Err(DiffError::shape("reparameterize eps", eps.shape(), self.shape(mu)));
        }
        let data = self
            .data(mu)
            .iter()
            .zip(self.data(logvar))
            .zip(eps.data())
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let out = Tensor::from_parts(self.shape(mu).to_vec(), data);
        self.push(
            out,
            Op::Reparam {
                mu,
                logvar,
                eps: eps.data().to_vec(),
            },
        )
    }

    /// Inverted dropout. Identity (no node) when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var, DiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::DropoutRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit mask of multipliers.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, DiffError> {
        if mask.len() != self.value(x).len() {
            return Err(DiffError::shape("dropout mask", &[mask.len()], self.shape(x)));
        }
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(out, Op::Dropout { x, mask })
    }

    /// Closed-form KL(q ‖ p) between diagonal Gaussians given means and log-variances.
    pub fn kld_diag_gaussian(&mut self, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Result<Var, DiffError> {
        self.same_shape("kld q", mu_q, lv_q)?;
        self.same_shape("kld p", mu_p, lv_p)?;
        self.same_shape("kld q/p", mu_q, mu_p)?;
        let (mq, lq, mp, lp) = (self.data(mu_q), self.data(lv_q), self.data(mu_p), self.data(lv_p));
        let mut total = 0.0;
        for i in 0..mq.len() {
            let d = mq[i] - mp[i];
            total += 0.5 * (lp[i] - lq[i]) + (lq[i].exp() + d * d) / (2.0 * lp[i].exp()) - 0.5;
        }
        self.push(
            Tensor::from_parts(vec![1], vec![total]),
            Op::Kld {
                mu_q,
                lv_q,
                mu_p,
                lv_p,
            },
        )
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates `∂loss/∂node` into every node created before `loss`.
    /// May be called once; call [`Tape::reset_grads`] to run it again.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.grads.is_some() {
            return Err(DiffError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads);
            grads[i] = g;
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if g.is_empty() {
                *g = vec![0.0; node.value.len()];
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    pub fn backward_done(&self) -> bool {
        self.grads.is_some()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref().map(|g| g[v.0].as_slice())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let factor = if self.fault == Some(node.op.kind()) { 1.01 } else { 1.0 };
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; self.nodes[v.0].value.len()];
            }
            if factor == 1.0 {
                contrib(slot);
            } else {
                let mut tmp = vec![0.0; slot.len()];
                contrib(&mut tmp);
                for (s, t) in slot.iter_mut().zip(tmp) {
                    *s += factor * t;
                }
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Hadamard(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * db[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * da[k];
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += c * g[k];
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if xd[k] > *lo && xd[k] < *hi {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::Affine { w, x, b } => {
                let (wd, xd) = (self.data(*w), self.data(*x));
                let n = xd.len();
                acc(*w, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (sj, xj) in s[i * n..(i + 1) * n].iter_mut().zip(xd) {
                            *sj += gi * xj;
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (sj, wij) in s.iter_mut().zip(&wd[i * n..(i + 1) * n]) {
                            *sj += gi * wij;
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                }
            }
            Op::MatVecT { m, w } => {
                let (md, wd) = (self.data(*m), self.data(*w));
                let d = g.len();
                acc(*m, &mut |s| {
                    for (i, wi) in wd.iter().enumerate() {
                        for (sj, gj) in s[i * d..(i + 1) * d].iter_mut().zip(g) {
                            *sj += wi * gj;
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += dot(&md[i * d..(i + 1) * d], g);
                    }
                });
            }
            Op::Conv {
                input,
                kernel,
                rows,
                steps,
            } => {
                let (rows, steps) = (*rows, *steps);
                let (cin, cout, width) = (kernel.in_channels, kernel.out_channels, kernel.width);
                let pad = width / 2;
                let x = self.data(*input);
                let w = self.data(kernel.weights);
                let taps = |f: usize, t: usize, k: usize| -> Option<usize> {
                    let src = t + k;
                    (src >= pad && src - pad < steps).then(|| f * steps + src - pad)
                };
                acc(*input, &mut |s| {
                    for f in 0..rows {
                        for t in 0..steps {
                            let go = &g[(f * steps + t) * cout..(f * steps + t + 1) * cout];
                            for k in 0..width {
                                let Some(pos) = taps(f, t, k) else { continue };
                                for ci in 0..cin {
                                    let wrow = &w[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                                    s[pos * cin + ci] += dot(go, wrow);
                                }
                            }
                        }
                    }
                });
                acc(kernel.weights, &mut |s| {
                    for f in 0..rows {
                        for t in 0..steps {
                            let go = &g[(f * steps + t) * cout..(f * steps + t + 1) * cout];
                            for k in 0..width {
                                let Some(pos) = taps(f, t, k) else { continue };
                                for ci in 0..cin {
                                    let xv = x[pos * cin + ci];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let srow = &mut s[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
                                    for (sv, gv) in srow.iter_mut().zip(go) {
                                        *sv += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                });
                acc(kernel.bias, &mut |s| {
                    for chunk in g.chunks(cout) {
                        for (sv, gv) in s.iter_mut().zip(chunk) {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                acc(*x, &mut |s| {
                    for ((sc, yc), gc) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            sc[k] += yc[k] * (gc[k] - dot);
                        }
                    }
                });
            }
            Op::Concat { a, b, la, lb } => {
                let (la, lb) = (*la, *lb);
                let w = la + lb;
                acc(*a, &mut |s| {
                    for (sc, gc) in s.chunks_mut(la.max(1)).zip(g.chunks(w)) {
                        for k in 0..la {
                            sc[k] += gc[k];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for (sc, gc) in s.chunks_mut(lb.max(1)).zip(g.chunks(w)) {
                        for k in 0..lb {
                            sc[k] += gc[la + k];
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, label } => {
                let p = self.data(*probs)[*label];
                acc(*probs, &mut |s| {
                    if p > CE_FLOOR {
                        s[*label] -= g[0] / p;
                    }
                });
            }
            Op::Reparam { mu, logvar, eps } => {
                let lv = self.data(*logvar);
                acc(*mu, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*logvar, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * 0.5 * (0.5 * lv[k]).exp() * eps[k];
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * mask[k];
                }
            }),
            Op::Stack(vs) => {
                let inner = g.len() / vs.len();
                for (j, v) in vs.iter().enumerate() {
                    let gj = &g[j * inner..(j + 1) * inner];
                    acc(*v, &mut |s| s.iter_mut().zip(gj).for_each(|(s, g)| *s += g));
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SumSquares(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += 2.0 * xd[k] * g[0];
                    }
                })
            }
            Op::Kld {
                mu_q,
                lv_q,
                mu_p,
                lv_p,
            } => {
                let (mq, lq, mp, lp) = (self.data(*mu_q), self.data(*lv_q), self.data(*mu_p), self.data(*lv_p));
                let g0 = g[0];
                acc(*mu_q, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g0 * (mq[k] - mp[k]) / lp[k].exp();
                    }
                });
                acc(*mu_p, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= g0 * (mq[k] - mp[k]) / lp[k].exp();
                    }
                });
                acc(*lv_q, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g0 * (-0.5 + 0.5 * (lq[k] - lp[k]).exp());
                    }
                });
                acc(*lv_p, &mut |s| {
                    for k in 0..s.len() {
                        let d = mq[k] - mp[k];
                        s[k] += g0 * (0.5 - 0.5 * (lq[k].exp() + d * d) / lp[k].exp());
                    }
                });
            }
        }
    }
}

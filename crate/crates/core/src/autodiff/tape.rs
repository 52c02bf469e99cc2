//! Wengert tape over dense matrices.
//!
//! Every primitive is evaluated through [`apply`], both while recording and on
//! replay, so a replayed tape reproduces the recorded values bit for bit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use super::params::{GradSet, ParamSet};
use super::scalar::{Dual, Scalar};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed index map for [`Tape::gather`]: output entry `i` (row-major) copies
/// input entry `src[i]`, or is zero when `src[i]` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatherMap {
    pub rows: usize,
    pub cols: usize,
    pub src: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Mask(Var, Arc<Vec<f64>>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowSum(Var),
    L1(Var),
    SqL2(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather(Var, Arc<GatherMap>),
    DivRows(Var, Var),
    MulRows(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Mask(..) => "dropout",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::RowSum(_) => "row_sum",
            Op::L1(_) => "l1",
            Op::SqL2(_) => "sq_l2",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Gather(..) => "gather",
            Op::DivRows(..) => "div_rows",
            Op::MulRows(..) => "mul_rows",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Param | Op::Const)
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op,
    value: Matrix<S>,
}

/// Recorded forward evaluation.
#[derive(Clone, Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    param_names: Vec<String>,
    param_vars: Vec<Var>,
    rng: Option<ChaCha8Rng>,
    output: Option<Var>,
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs, rhs }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Matrix<S>, b: &Matrix<S>) -> Result<(), AutodiffError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, a.shape(), b.shape()))
    }
}

fn scalar_mat<S: Scalar>(v: S) -> Matrix<S> {
    Matrix::from_vec(1, 1, vec![v])
}

fn softmax_rows<S: Scalar>(a: &Matrix<S>) -> Matrix<S> {
    let (r, c) = a.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = a.row(i);
        let max = row.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let shift = S::from_f64(max);
        let exps: Vec<S> = row.iter().map(|&v| (v - shift).exp()).collect();
        let mut total = S::zero();
        for &e in &exps {
            total += e;
        }
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Matrix::from_vec(r, c, out)
}

fn log_softmax_rows<S: Scalar>(a: &Matrix<S>) -> Matrix<S> {
    let (r, c) = a.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = a.row(i);
        let max = row.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let shift = S::from_f64(max);
        let mut total = S::zero();
        for &v in row {
            total += (v - shift).exp();
        }
        let lse = shift + total.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Matrix::from_vec(r, c, out)
}

/// Forward rule shared by recording and replay.
fn apply<S: Scalar>(op: &Op, nodes: &[Node<S>]) -> Result<Matrix<S>, AutodiffError> {
    let v = |x: &Var| &nodes[x.0].value;
    let out = match op {
        Op::Param | Op::Const => unreachable!("leaves are not re-evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.cols() != b.rows() {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            a.matmul(b)
        }
        Op::Add(a, b) => {
            same_shape("add", v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x * y)
        }
        Op::AddRow(a, r) => {
            let (a, r) = (v(a), v(r));
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(shape_err("add_row", a.shape(), r.shape()));
            }
            let mut out = a.clone();
            let c = a.cols();
            for (k, x) in out.as_mut_slice().iter_mut().enumerate() {
                *x += r.as_slice()[k % c];
            }
            out
        }
        Op::Scale(a, k) => v(a).map(|x| x.scale(*k)),
        Op::Relu(a) => v(a).map(|x| if x.re() > 0.0 { x } else { S::zero() }),
        Op::Mask(a, mask) => {
            let a = v(a);
            if mask.len() != a.len() {
                return Err(shape_err("dropout", a.shape(), (1, mask.len())));
            }
            let data = a
                .as_slice()
                .iter()
                .zip(mask.iter())
                .map(|(&x, &m)| x.scale(m))
                .collect();
            Matrix::from_vec(a.rows(), a.cols(), data)
        }
        Op::SoftmaxRows(a) => softmax_rows(v(a)),
        Op::LogSoftmaxRows(a) => log_softmax_rows(v(a)),
        Op::Sum(a) => {
            let mut t = S::zero();
            for &x in v(a).as_slice() {
                t += x;
            }
            scalar_mat(t)
        }
        Op::Mean(a) => {
            let a = v(a);
            if a.is_empty() {
                return Err(shape_err("mean", a.shape(), (1, 1)));
            }
            let mut t = S::zero();
            for &x in a.as_slice() {
                t += x;
            }
            scalar_mat(t.scale(1.0 / a.len() as f64))
        }
        Op::MeanRows(a) => {
            let a = v(a);
            let (r, c) = a.shape();
            if r == 0 {
                return Err(shape_err("mean_rows", a.shape(), (1, c)));
            }
            let mut out = vec![S::zero(); c];
            for i in 0..r {
                for (o, &x) in out.iter_mut().zip(a.row(i)) {
                    *o += x;
                }
            }
            let inv = 1.0 / r as f64;
            Matrix::from_vec(1, c, out.into_iter().map(|x| x.scale(inv)).collect())
        }
        Op::RowSum(a) => {
            let a = v(a);
            let data = (0..a.rows())
                .map(|i| {
                    let mut t = S::zero();
                    for &x in a.row(i) {
                        t += x;
                    }
                    t
                })
                .collect();
            Matrix::from_vec(a.rows(), 1, data)
        }
        Op::L1(a) => {
            let mut t = S::zero();
            for &x in v(a).as_slice() {
                if x.re() >= 0.0 {
                    t += x;
                } else {
                    t -= x;
                }
            }
            scalar_mat(t)
        }
        Op::SqL2(a) => {
            let mut t = S::zero();
            for &x in v(a).as_slice() {
                t += x * x;
            }
            scalar_mat(t)
        }
        Op::ConcatCols(parts) => {
            let rows = v(&parts[0]).rows();
            for p in parts.iter().skip(1) {
                if v(p).rows() != rows {
                    return Err(shape_err("concat_cols", v(&parts[0]).shape(), v(p).shape()));
                }
            }
            let cols: usize = parts.iter().map(|p| v(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(v(p).row(i));
                }
            }
            Matrix::from_vec(rows, cols, data)
        }
        Op::SliceCols(a, start, end) => {
            let a = v(a);
            if start >= end || *end > a.cols() {
                return Err(shape_err("slice_cols", a.shape(), (*start, *end)));
            }
            let mut data = Vec::with_capacity(a.rows() * (end - start));
            for i in 0..a.rows() {
                data.extend_from_slice(&a.row(i)[*start..*end]);
            }
            Matrix::from_vec(a.rows(), end - start, data)
        }
        Op::Gather(a, map) => {
            let a = v(a);
            if map.src.len() != map.rows * map.cols || map.src.iter().flatten().any(|&j| j >= a.len()) {
                return Err(shape_err("gather", a.shape(), (map.rows, map.cols)));
            }
            let src = a.as_slice();
            let data = map.src.iter().map(|j| j.map_or(S::zero(), |j| src[j])).collect();
            Matrix::from_vec(map.rows, map.cols, data)
        }
        Op::DivRows(a, s) | Op::MulRows(a, s) => {
            let (a, s) = (v(a), v(s));
            let div = matches!(op, Op::DivRows(..));
            if s.cols() != 1 || s.rows() != a.rows() {
                return Err(shape_err(op.name(), a.shape(), s.shape()));
            }
            let c = a.cols();
            let mut out = a.clone();
            for (k, x) in out.as_mut_slice().iter_mut().enumerate() {
                let d = s.as_slice()[k / c];
                *x = if div { *x / d } else { *x * d };
            }
            out
        }
    };
    if !out.all_finite() {
        return Err(AutodiffError::NonFinite { op: op.name() });
    }
    Ok(out)
}

impl Tape<f64> {
    /// Fresh tape whose leaves are the entries of `params`.
    pub fn new(params: &ParamSet) -> Self {
        Self::from_leaves(params.iter().map(|(k, m)| (k.to_string(), m.clone())))
    }
}

impl Tape<Dual> {
    /// Leaves carry `params` as primal values and `tangent` as the direction.
    pub fn with_tangent(params: &ParamSet, tangent: &ParamSet) -> Result<Self, AutodiffError> {
        if !params.same_structure(tangent) {
            return Err(AutodiffError::StructureMismatch);
        }
        Ok(Self::from_leaves(params.iter().zip(tangent.iter()).map(
            |((k, p), (_, t))| {
                let data = p
                    .as_slice()
                    .iter()
                    .zip(t.as_slice())
                    .map(|(&a, &b)| Dual::new(a, b))
                    .collect();
                (k.to_string(), Matrix::from_vec(p.rows(), p.cols(), data))
            },
        )))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn from_leaves(leaves: impl IntoIterator<Item = (String, Matrix<S>)>) -> Self {
        let mut tape = Tape {
            nodes: Vec::new(),
            param_names: Vec::new(),
            param_vars: Vec::new(),
            rng: None,
            output: None,
        };
        for (name, value) in leaves {
            tape.param_vars.push(Var(tape.nodes.len()));
            tape.nodes.push(Node { op: Op::Param, value });
            tape.param_names.push(name);
        }
        tape
    }

    /// Enables stochastic dropout masks drawn from a stream seeded by `seed`.
    /// Without a seed every dropout call is the identity.
    pub fn with_dropout_seed(mut self, seed: Option<u64>) -> Self {
        self.rng = seed.map(ChaCha8Rng::seed_from_u64);
        self
    }

    pub fn is_stochastic(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&self, name: &str) -> Result<Var, AutodiffError> {
        self.param_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.param_vars[i])
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn constant(&mut self, value: &Matrix<f64>) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Const,
            value: value.lift(),
        });
        id
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    /// Number of non-leaf operations recorded.
    pub fn num_primitives(&self) -> usize {
        self.nodes.iter().filter(|n| !n.op.is_leaf()).count()
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    /// Marks `v` as the scalar output of the evaluation.
    pub fn set_output(&mut self, v: Var) -> Result<S, AutodiffError> {
        let value = self.value(v);
        if value.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarOutput(value.shape()));
        }
        let s = value.as_slice()[0];
        self.output = Some(v);
        Ok(s)
    }

    fn push(&mut self, op: Op) -> Result<Var, AutodiffError> {
        let value = apply(&op, &self.nodes)?;
        let id = Var(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Sub(a, b))
    }
    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Mul(a, b))
    }
    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.push(Op::AddRow(a, row))
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, AutodiffError> {
        self.push(Op::Scale(a, k))
    }
    /// ReLU with derivative 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Relu(a))
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::SoftmaxRows(a))
    }
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::LogSoftmaxRows(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Mean(a))
    }
    /// Column-wise mean, `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::MeanRows(a))
    }
    /// Row sums, `r × c → r × 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::RowSum(a))
    }
    pub fn l1(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::L1(a))
    }
    pub fn sq_l2(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::SqL2(a))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", (0, 0), (0, 0)));
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        self.push(Op::SliceCols(a, start, end))
    }
    pub fn gather(&mut self, a: Var, map: Arc<GatherMap>) -> Result<Var, AutodiffError> {
        self.push(Op::Gather(a, map))
    }
    /// Divides row `i` of `a` by `s[i]` (`s` is `r × 1`).
    pub fn div_rows(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        self.push(Op::DivRows(a, s))
    }
    /// Multiplies row `i` of `a` by `s[i]` (`s` is `r × 1`).
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        self.push(Op::MulRows(a, s))
    }

    /// Inverted dropout. Identity when the tape is deterministic or `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var, AutodiffError> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(a);
        };
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.push(Op::Mask(a, Arc::new(mask)))
    }

    /// Recomputes every non-leaf node from the stored leaves and returns the
    /// output scalar.
    pub fn replay(&self) -> Result<S, AutodiffError> {
        let out = self.output.ok_or(AutodiffError::NoOutput)?;
        let mut nodes: Vec<Node<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = if node.op.is_leaf() {
                node.value.clone()
            } else {
                apply(&node.op, &nodes)?
            };
            nodes.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(nodes[out.0].value.as_slice()[0])
    }

    /// Reverse sweep from the output; one adjoint per parameter leaf, in
    /// parameter order.
    pub fn backward(&self) -> Result<Vec<Matrix<S>>, AutodiffError> {
        let out = self.output.ok_or(AutodiffError::NoOutput)?;
        let mut adj: Vec<Option<Matrix<S>>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(Matrix::filled(1, 1, S::one()));

        fn acc<S: Scalar>(adj: &mut [Option<Matrix<S>>], v: Var, g: Matrix<S>) {
            match &mut adj[v.0] {
                Some(m) => m.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Param | Op::Const => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(val(b));
                    let gb = val(a).t_matmul(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(b), |x, y| x * y);
                    let gb = g.zip_map(val(a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let c = g.cols();
                    let mut gr = vec![S::zero(); c];
                    for (k, &x) in g.as_slice().iter().enumerate() {
                        gr[k % c] += x;
                    }
                    acc(&mut adj, *r, Matrix::from_vec(1, c, gr));
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, k) => acc(&mut adj, *a, g.map(|x| x.scale(*k))),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(a), |x, y| if y.re() > 0.0 { x } else { S::zero() });
                    acc(&mut adj, *a, ga);
                }
                Op::Mask(a, mask) => {
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(mask.iter())
                        .map(|(&x, &m)| x.scale(m))
                        .collect();
                    acc(&mut adj, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let mut dot = S::zero();
                        for j in 0..c {
                            dot += g.get(i, j) * y.get(i, j);
                        }
                        for j in 0..c {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let mut total = S::zero();
                        for j in 0..c {
                            total += g.get(i, j);
                        }
                        for j in 0..c {
                            ga.set(i, j, g.get(i, j) - y.get(i, j).exp() * total);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    acc(&mut adj, *a, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(a).shape();
                    let s = g.as_slice()[0].scale(1.0 / (r * c) as f64);
                    acc(&mut adj, *a, Matrix::filled(r, c, s));
                }
                Op::MeanRows(a) => {
                    let (r, c) = val(a).shape();
                    let inv = 1.0 / r as f64;
                    let row: Vec<S> = g.as_slice().iter().map(|x| x.scale(inv)).collect();
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        data.extend_from_slice(&row);
                    }
                    acc(&mut adj, *a, Matrix::from_vec(r, c, data));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(a).shape();
                    let data = (0..r * c).map(|k| g.as_slice()[k / c]).collect();
                    acc(&mut adj, *a, Matrix::from_vec(r, c, data));
                }
                Op::L1(a) => {
                    let s = g.as_slice()[0];
                    let ga = val(a).map(|x| {
                        let r = x.re();
                        if r > 0.0 {
                            s
                        } else if r < 0.0 {
                            -s
                        } else {
                            S::zero()
                        }
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::SqL2(a) => {
                    let s = g.as_slice()[0].scale(2.0);
                    acc(&mut adj, *a, val(a).map(|x| x * s));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = val(p).shape();
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        acc(&mut adj, *p, Matrix::from_vec(r, c, data));
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = val(a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in *start..*end {
                            ga.set(i, j, g.get(i, j - start));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Gather(a, map) => {
                    let (r, c) = val(a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    let slot = ga.as_mut_slice();
                    for (k, j) in map.src.iter().enumerate() {
                        if let Some(j) = j {
                            slot[*j] += g.as_slice()[k];
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::DivRows(a, s) => {
                    let (av, sv) = (val(a), val(s));
                    let (r, c) = av.shape();
                    let mut ga = Matrix::zeros(r, c);
                    let mut gs = Matrix::zeros(r, 1);
                    for i in 0..r {
                        let d = sv.as_slice()[i];
                        let mut t = S::zero();
                        for j in 0..c {
                            ga.set(i, j, g.get(i, j) / d);
                            t += g.get(i, j) * av.get(i, j);
                        }
                        gs.set(i, 0, -(t / (d * d)));
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *s, gs);
                }
                Op::MulRows(a, s) => {
                    let (av, sv) = (val(a), val(s));
                    let (r, c) = av.shape();
                    let mut ga = Matrix::zeros(r, c);
                    let mut gs = Matrix::zeros(r, 1);
                    for i in 0..r {
                        let d = sv.as_slice()[i];
                        let mut t = S::zero();
                        for j in 0..c {
                            ga.set(i, j, g.get(i, j) * d);
                            t += g.get(i, j) * av.get(i, j);
                        }
                        gs.set(i, 0, t);
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *s, gs);
                }
            }
        }

        let grads: Vec<Matrix<S>> = self
            .param_vars
            .iter()
            .map(|v| {
                adj[v.0].take().unwrap_or_else(|| {
                    let (r, c) = self.nodes[v.0].value.shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect();
        if grads.iter().any(|m| !m.all_finite()) {
            return Err(AutodiffError::NonFinite { op: "backward" });
        }
        Ok(grads)
    }

    /// Packs per-leaf matrices (e.g. from [`Tape::backward`]) into a keyed set,
    /// keeping only the real parts.
    pub fn to_grad_set(&self, grads: &[Matrix<S>]) -> Result<GradSet, AutodiffError> {
        let mut out = GradSet::new();
        for (name, g) in self.param_names.iter().zip(grads) {
            out.insert(name.clone(), g.to_real())?;
        }
        Ok(out)
    }
}

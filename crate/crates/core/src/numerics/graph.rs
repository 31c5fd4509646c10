//! Reverse-mode tape over 2-D values.
//!
//! Every value recorded on the tape is a `rows x cols` matrix; vectors are a
//! single row and scalars are `1 x 1`. Nodes are appended in evaluation order,
//! so the node list is already topologically sorted and `backward` is a single
//! reverse sweep.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm, sigmoid};
use super::tensor::{ModelParams, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    EmbeddingBag(Var, Vec<Vec<usize>>),
    PairwiseAdd(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    PickSum(Var, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

/// A single forward computation and its reverse sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph whose dropout masks come from `(seed, stream)`.
    pub fn training(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            train: true,
            rng,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let n = self.node(v);
        &n.value[r * n.cols..(r + 1) * n.cols]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        Error::Shape {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![value.len()],
            });
        }
        Ok(self.push(rows, cols, value, Op::Constant, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, t.data().to_vec(), Op::Constant, false)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = params.get(name)?;
        let (r, c) = t.matrix_dims();
        let v = self.push(r, c, t.data().to_vec(), Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(op, a, b));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let (r, c) = self.dims(a);
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let (r, c) = self.dims(a);
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let (r, c) = self.dims(a);
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    /// Adds the single-row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(self.shape_err("add_row", a, row));
        }
        let rv = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let ng = self.needs(&[a, row]);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, Op::AddScalar(a, s), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.needs(&[a]);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: vec![r, c],
                rhs: vec![rows, cols],
            });
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(rows, cols, out, Op::Reshape(a), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).0 != rows) {
            return Err(self.shape_err("concat_cols", parts[0], *bad));
        }
        let cols: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.row(*p, r));
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0]).1;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).1 != cols) {
            return Err(self.shape_err("concat_rows", parts[0], *bad));
        }
        let rows: usize = parts.iter().map(|p| self.dims(*p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let ng = self.needs(parts);
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if width == 0 || start + width > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, width],
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let ng = self.needs(&[a]);
        Ok(self.push(r, width, out, Op::SliceCols(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: vec![r, c],
                rhs: idx.to_vec(),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(a, i));
        }
        let ng = self.needs(&[a]);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Embedding lookup: one output row per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Each output row is the mean of the table rows named by its bag.
    pub fn embedding_bag(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if bags.is_empty() || bags.iter().any(|b| b.is_empty() || b.iter().any(|&i| i >= r)) {
            return Err(Error::Shape {
                op: "embedding_bag",
                lhs: vec![r, c],
                rhs: bags.iter().map(Vec::len).collect(),
            });
        }
        let tv = self.value(table);
        let mut out = vec![0.0; bags.len() * c];
        for (o, bag) in out.chunks_mut(c).zip(bags) {
            let w = 1.0 / bag.len() as f64;
            for &i in bag {
                for (x, t) in o.iter_mut().zip(&tv[i * c..(i + 1) * c]) {
                    *x += w * t;
                }
            }
        }
        let ng = self.needs(&[table]);
        Ok(self.push(bags.len(), c, out, Op::EmbeddingBag(table, bags.to_vec()), ng))
    }

    /// `[m, d] (+) [k, d] -> [m*k, d]`, row `i*k + j` is `a[i] + b[j]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.dims(a);
        let (k, d2) = self.dims(b);
        if d != d2 {
            return Err(self.shape_err("pairwise_add", a, b));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(m * k * d);
        for i in 0..m {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..k {
                out.extend(ar.iter().zip(&bv[j * d..(j + 1) * d]).map(|(x, y)| x + y));
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(m * k, d, out, Op::PairwiseAdd(a, b), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm_rows(self.value(x), self.value(gain), self.value(bias), r, c);
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            r,
            c,
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Inverted dropout; identity on evaluation graphs or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let (r, c) = self.dims(x);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.needs(&[x]);
        self.push(r, c, out, Op::Dropout(x, mask), ng)
    }

    /// Row-wise softmax of `x + mask`; `mask` is additive (0 or [`super::BLOCK`])
    /// and either full-size or a single broadcast row.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = mask {
            kernels::check_mask(m, r, c)?;
        }
        let out = kernels::softmax_rows(self.value(x), mask, r, c);
        let ng = self.needs(&[x]);
        Ok(self.push(r, c, out, Op::Softmax(x), ng))
    }

    pub fn masked_log_softmax(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(m) = mask {
            kernels::check_mask(m, r, c)?;
        }
        let out = kernels::log_softmax_rows(self.value(x), mask, r, c);
        let ng = self.needs(&[x]);
        Ok(self.push(r, c, out, Op::LogSoftmax(x), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    /// Cross-entropy from log-probabilities: `-sum_r logp[r, target_r]`.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logp);
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::Shape {
                op: "nll",
                lhs: vec![r, c],
                rhs: targets.to_vec(),
            });
        }
        let picks: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
        let v = self.value(logp);
        let s = -picks.iter().map(|&(i, j)| v[i * c + j]).sum::<f64>();
        let ng = self.needs(&[logp]);
        Ok(self.push(1, 1, vec![s], Op::PickSum(logp, picks), ng))
    }

    /// Splits the scalar `v` into additive terms by walking back through
    /// scalar sums, scalings, constant offsets and reductions. The terms sum
    /// to `v` up to rounding; each is far smaller than `v` when `v`
    /// accumulates many contributions.
    pub fn additive_terms(&self, v: Var) -> Vec<f64> {
        let mut out = Vec::new();
        self.collect_terms(v, 1.0, &mut out);
        out
    }

    fn collect_terms(&self, v: Var, scale: f64, out: &mut Vec<f64>) {
        let node = &self.nodes[v.0];
        let scalar = |a: &Var| self.dims(*a) == (1, 1);
        match &node.op {
            Op::Add(a, b) if node.value.len() == 1 => {
                self.collect_terms(*a, scale, out);
                self.collect_terms(*b, scale, out);
            }
            Op::Scale(a, s) if scalar(a) => self.collect_terms(*a, scale * s, out),
            Op::AddScalar(a, c) if scalar(a) => {
                self.collect_terms(*a, scale, out);
                out.push(scale * c);
            }
            Op::Sum(a) => out.extend(self.value(*a).iter().map(|x| scale * x)),
            Op::PickSum(a, picks) => {
                let (_, c) = self.dims(*a);
                let vals = self.value(*a);
                out.extend(picks.iter().map(|&(i, j)| -scale * vals[i * c + j]));
            }
            _ => out.push(scale * node.value[0]),
        }
    }

    /// Reverse sweep from the scalar `loss`; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::Shape {
                op: "backward",
                lhs: vec![r, c],
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = ParamGrads::new();

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (rows, cols) = (node.rows, node.cols);
            let acc = |v: Var, g: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.insert(name.clone(), gout);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = cols;
                    if self.node(*a).needs_grad {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &gout, false, self.value(*b), true, &mut ga, 0.0);
                        acc(*a, ga, &mut grads);
                    }
                    if self.node(*b).needs_grad {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, self.value(*a), true, &gout, false, &mut gb, 0.0);
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, gout.clone(), &mut grads);
                    acc(*b, gout, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, gout.iter().map(|g| -g).collect(), &mut grads);
                    acc(*a, gout, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = gout.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    let gb = gout.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; cols];
                    for chunk in gout.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                    acc(*row, gr, &mut grads);
                    acc(*a, gout, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, gout.iter().map(|g| g * s).collect(), &mut grads),
                Op::AddScalar(a, _) | Op::Reshape(a) => acc(*a, gout, &mut grads),
                Op::Sigmoid(a) => {
                    let g = gout
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    acc(*a, g, &mut grads);
                }
                Op::Tanh(a) => {
                    let g = gout
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    acc(*a, g, &mut grads);
                }
                Op::Relu(a) => {
                    let g = gout
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(*a, g, &mut grads);
                }
                Op::Transpose(a) => {
                    let mut g = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j * rows + i] = gout[i * cols + j];
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.dims(*p).1;
                        let g: Vec<f64> = gout
                            .chunks(cols)
                            .flat_map(|r| r[offset..offset + w].iter().copied())
                            .collect();
                        acc(*p, g, &mut grads);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.node(*p).value.len();
                        acc(*p, gout[offset..offset + len].to_vec(), &mut grads);
                        offset += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.dims(*a);
                    let mut g = vec![0.0; ar * ac];
                    for r in 0..ar {
                        g[r * ac + start..r * ac + start + cols]
                            .copy_from_slice(&gout[r * cols..(r + 1) * cols]);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::GatherRows(a, idx) => {
                    let (ar, ac) = self.dims(*a);
                    let mut g = vec![0.0; ar * ac];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..ac {
                            g[i * ac + j] += gout[r * ac + j];
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::EmbeddingBag(table, bags) => {
                    let (tr, tc) = self.dims(*table);
                    let mut g = vec![0.0; tr * tc];
                    for (r, bag) in bags.iter().enumerate() {
                        let w = 1.0 / bag.len() as f64;
                        for &i in bag {
                            for j in 0..tc {
                                g[i * tc + j] += w * gout[r * tc + j];
                            }
                        }
                    }
                    acc(*table, g, &mut grads);
                }
                Op::PairwiseAdd(a, b) => {
                    let (m, d) = self.dims(*a);
                    let k = self.dims(*b).0;
                    let mut ga = vec![0.0; m * d];
                    let mut gb = vec![0.0; k * d];
                    for i in 0..m {
                        for j in 0..k {
                            let row = &gout[(i * k + j) * d..(i * k + j + 1) * d];
                            for t in 0..d {
                                ga[i * d + t] += row[t];
                                gb[j * d + t] += row[t];
                            }
                        }
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let mut gx = vec![0.0; rows * cols];
                    let mut gg = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    for r in 0..rows {
                        let go = &gout[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let d = go[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                            gg[j] += go[j] * xh[j];
                            gbias[j] += go[j];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for j in 0..cols {
                            let d = go[j] * gv[j];
                            gx[r * cols + j] = rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(*x, gx, &mut grads);
                    acc(*gain, gg, &mut grads);
                    acc(*bias, gbias, &mut grads);
                }
                Op::Dropout(a, mask) => {
                    acc(*a, gout.iter().zip(mask).map(|(g, m)| g * m).collect(), &mut grads)
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut g = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            g[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut g = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let total: f64 = gr.iter().sum();
                        for j in 0..cols {
                            g[r * cols + j] = gr[j] - y[r * cols + j].exp() * total;
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Sum(a) => {
                    let len = self.node(*a).value.len();
                    acc(*a, vec![gout[0]; len], &mut grads);
                }
                Op::PickSum(a, picks) => {
                    let (ar, ac) = self.dims(*a);
                    let mut g = vec![0.0; ar * ac];
                    for &(i, j) in picks {
                        g[i * ac + j] -= gout[0];
                    }
                    acc(*a, g, &mut grads);
                }
            }
        }
        Ok(out)
    }
}

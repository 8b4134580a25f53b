use std::collections::HashMap;

use thiserror::Error;

use super::params::{ParamId, ParamStore};

/// Floor applied inside `log` so attention entries that underflow keep the
/// losses finite.
pub(crate) const LOG_FLOOR: f64 = 1e-30;

/// Row sums below this make a row-stochastic renormalization degenerate.
pub(crate) const ROW_SUM_FLOOR: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("backward requires a scalar loss, got a tensor of {0} elements")]
    NotScalar(usize),
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("softmax temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("row {row} sums below 1e-30; the row cannot be renormalized")]
    DegenerateRowSum { row: usize },
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Reduction over the neighborhood axis of an `(m, k, d)` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Max,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    AddScalar { a: TensorId, offset: f64 },
    AddBias { a: TensorId, bias: TensorId },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    Log { a: TensorId },
    SoftmaxRows { a: TensorId, temperature: f64 },
    SoftmaxCols { a: TensorId, temperature: f64 },
    L2NormalizeRows { a: TensorId, eps: f64 },
    DivRowSums { a: TensorId },
    ConcatCols { a: TensorId, b: TensorId },
    GatherRows { a: TensorId, indices: Vec<usize>, rows: usize, cols: usize },
    GatherEntries { a: TensorId, pairs: Vec<(usize, usize)> },
    Reduce { a: TensorId, mode: ReduceMode },
    InstanceNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Reshape { a: TensorId },
    SumAll { a: TensorId },
    RowNorms { a: TensorId },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    /// Op-specific cached statistics (softmax outputs are read from
    /// `values`; instance norm keeps mean and inverse stddev here, row
    /// normalizations keep norms/sums, max reductions keep argmax slots).
    aux: Vec<f64>,
    aux_idx: Vec<usize>,
}

/// A single forward/backward recording. Values are dense row-major f64;
/// every op validates shapes and rejects non-finite results.
///
/// The tape owns one computation graph and is confined to one thread for
/// the duration of a forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, TensorId>,
    param_order: Vec<(ParamId, TensorId)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
        aux: Vec<f64>,
        aux_idx: Vec<usize>,
    ) -> Result<TensorId, TensorError> {
        debug_assert_eq!(numel(&shape), values.len());
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node { shape, values, grad, op, aux, aux_idx });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// A leaf holding fixed data; gradients accumulate but nothing flows
    /// further back.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorId, TensorError> {
        if numel(shape) != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                detail: format!("shape {:?} does not hold {} values", shape, values.len()),
            });
        }
        self.push("constant", shape.to_vec(), values, Op::Leaf, vec![], vec![])
    }

    pub fn scalar(&mut self, value: f64) -> Result<TensorId, TensorError> {
        self.constant(&[1], vec![value])
    }

    /// Injects a parameter as a leaf, memoized so that repeated use of the
    /// same parameter shares one leaf and its gradient accumulates.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<TensorId, TensorError> {
        if let Some(t) = self.param_leaves.get(&id) {
            return Ok(*t);
        }
        let entry = store.entry(id);
        let t = self.constant(&entry.shape.clone(), entry.values.clone())?;
        self.param_leaves.insert(id, t);
        self.param_order.push((id, t));
        Ok(t)
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn grad(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].grad
    }

    /// Parameter leaves touched by this tape, in first-use order.
    pub fn touched_params(&self) -> impl Iterator<Item = (ParamId, TensorId)> + '_ {
        self.param_order.iter().copied()
    }

    fn dims2(&self, t: TensorId, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.nodes[t.0].shape[..] {
            [n, m] => Ok((n, m)),
            ref s => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got shape {:?}", s),
            }),
        }
    }

    // ---- differentiable operations -------------------------------------

    /// Matrix product `(n x k) (k x m) -> (n x m)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (n, ka) = self.dims2(a, "matmul")?;
        let (kb, m) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions {ka} vs {kb}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &av[i * ka..(i + 1) * ka];
            let orow = &mut out[i * m..(i + 1) * m];
            for (kk, &x) in arow.iter().enumerate() {
                let brow = &bv[kk * m..(kk + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push("matmul", vec![n, m], out, Op::Matmul { a, b }, vec![], vec![])
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (n, m) = self.dims2(a, "transpose")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        self.push("transpose", vec![m, n], out, Op::Transpose { a }, vec![], vec![])
    }

    fn zip_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(op_name, shape, out, op, vec![], vec![])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn map_unary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let out = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(op_name, shape, out, op, vec![], vec![])
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId, TensorError> {
        self.map_unary("scale", a, |x| x * factor, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: TensorId, offset: f64) -> Result<TensorId, TensorError> {
        self.map_unary("add_scalar", a, |x| x + offset, Op::AddScalar { a, offset })
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.map_unary("relu", a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.map_unary("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    /// Natural log with the argument floored at 1e-30.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.map_unary("log", a, |x| x.max(LOG_FLOOR).ln(), Op::Log { a })
    }

    /// Adds a length-d bias vector to every row of an `(n, d)` matrix.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (n, d) = self.dims2(a, "add_bias")?;
        if self.nodes[bias.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias shape {:?}, expected [{d}]", self.nodes[bias.0].shape),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(av[i * d + j] + bv[j]);
            }
        }
        self.push("add_bias", vec![n, d], out, Op::AddBias { a, bias }, vec![], vec![])
    }

    /// Row-wise softmax with temperature: `y_ij = exp(a_ij/s) / sum_k
    /// exp(a_ik/s)`, with the row max subtracted before exponentiation.
    pub fn softmax_rows(&mut self, a: TensorId, temperature: f64) -> Result<TensorId, TensorError> {
        if !(temperature > 0.0) {
            return Err(TensorError::InvalidTemperature(temperature));
        }
        let (n, m) = self.dims2(a, "softmax_rows")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * m..(i + 1) * m];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = ((x - max) / temperature).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push("softmax_rows", vec![n, m], out, Op::SoftmaxRows { a, temperature }, vec![], vec![])
    }

    /// Column-wise softmax with temperature, the transpose counterpart of
    /// [`Tape::softmax_rows`].
    pub fn softmax_cols(&mut self, a: TensorId, temperature: f64) -> Result<TensorId, TensorError> {
        if !(temperature > 0.0) {
            return Err(TensorError::InvalidTemperature(temperature));
        }
        let (n, m) = self.dims2(a, "softmax_cols")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; n * m];
        for j in 0..m {
            let mut max = f64::NEG_INFINITY;
            for i in 0..n {
                max = max.max(av[i * m + j]);
            }
            let mut sum = 0.0;
            for i in 0..n {
                let e = ((av[i * m + j] - max) / temperature).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for i in 0..n {
                out[i * m + j] /= sum;
            }
        }
        self.push("softmax_cols", vec![n, m], out, Op::SoftmaxCols { a, temperature }, vec![], vec![])
    }

    /// Divides each row by `max(||row||_2, eps)`; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: TensorId, eps: f64) -> Result<TensorId, TensorError> {
        let (n, d) = self.dims2(a, "l2_normalize_rows")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &av[i * d..(i + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = norm;
            let denom = norm.max(eps);
            for (o, &x) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = x / denom;
            }
        }
        self.push(
            "l2_normalize_rows",
            vec![n, d],
            out,
            Op::L2NormalizeRows { a, eps },
            norms,
            vec![],
        )
    }

    /// Renormalizes each row to sum 1. Rows whose sum falls below 1e-30 are
    /// numerically degenerate and rejected.
    pub fn div_row_sums(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (n, m) = self.dims2(a, "div_row_sums")?;
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; n * m];
        let mut sums = vec![0.0; n];
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let sum: f64 = row.iter().sum();
            if sum < ROW_SUM_FLOOR {
                return Err(TensorError::DegenerateRowSum { row: i });
            }
            sums[i] = sum;
            for (o, &x) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = x / sum;
            }
        }
        self.push("div_row_sums", vec![n, m], out, Op::DivRowSums { a }, sums, vec![])
    }

    /// Column-wise concatenation `(n, c1) ++ (n, c2) -> (n, c1 + c2)`.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (na, c1) = self.dims2(a, "concat_cols")?;
        let (nb, c2) = self.dims2(b, "concat_cols")?;
        if na != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts {na} vs {nb}"),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(na * (c1 + c2));
        for i in 0..na {
            out.extend_from_slice(&av[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&bv[i * c2..(i + 1) * c2]);
        }
        self.push("concat_cols", vec![na, c1 + c2], out, Op::ConcatCols { a, b }, vec![], vec![])
    }

    /// Gathers rows of an `(n, d)` matrix into an `(m, k, d)` tensor using an
    /// `m x k` index matrix; backward scatter-adds.
    pub fn gather_rows(
        &mut self,
        a: TensorId,
        indices: &[usize],
        rows: usize,
        cols: usize,
    ) -> Result<TensorId, TensorError> {
        let (n, d) = self.dims2(a, "gather_rows")?;
        if indices.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("{} indices for a {rows} x {cols} gather", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: bad, bound: n });
        }
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(rows * cols * d);
        for &idx in indices {
            out.extend_from_slice(&av[idx * d..(idx + 1) * d]);
        }
        self.push(
            "gather_rows",
            vec![rows, cols, d],
            out,
            Op::GatherRows { a, indices: indices.to_vec(), rows, cols },
            vec![],
            vec![],
        )
    }

    /// Gathers individual `(row, col)` entries of a matrix into a vector.
    pub fn gather_entries(
        &mut self,
        a: TensorId,
        pairs: &[(usize, usize)],
    ) -> Result<TensorId, TensorError> {
        let (n, m) = self.dims2(a, "gather_entries")?;
        if pairs.is_empty() {
            return Err(TensorError::EmptyInput { op: "gather_entries" });
        }
        for &(i, j) in pairs {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { op: "gather_entries", index: i, bound: n });
            }
            if j >= m {
                return Err(TensorError::IndexOutOfRange { op: "gather_entries", index: j, bound: m });
            }
        }
        let av = &self.nodes[a.0].values;
        let out = pairs.iter().map(|&(i, j)| av[i * m + j]).collect();
        self.push(
            "gather_entries",
            vec![pairs.len()],
            out,
            Op::GatherEntries { a, pairs: pairs.to_vec() },
            vec![],
            vec![],
        )
    }

    /// Reduces the middle axis of an `(m, k, d)` tensor. Max mode routes the
    /// gradient to the first index attaining the maximum.
    pub fn reduce_neighborhood(
        &mut self,
        a: TensorId,
        mode: ReduceMode,
    ) -> Result<TensorId, TensorError> {
        let (m, k, d) = match self.nodes[a.0].shape[..] {
            [m, k, d] => (m, k, d),
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "reduce_neighborhood",
                    detail: format!("expected rank 3, got {:?}", s),
                })
            }
        };
        if k == 0 {
            return Err(TensorError::EmptyInput { op: "reduce_neighborhood" });
        }
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * d];
        let mut argmax = Vec::new();
        match mode {
            ReduceMode::Mean => {
                for i in 0..m {
                    for j in 0..k {
                        let base = (i * k + j) * d;
                        for c in 0..d {
                            out[i * d + c] += av[base + c];
                        }
                    }
                }
                let inv = 1.0 / k as f64;
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
            ReduceMode::Max => {
                argmax = vec![0usize; m * d];
                for i in 0..m {
                    for c in 0..d {
                        let mut best = av[(i * k) * d + c];
                        let mut best_j = 0;
                        for j in 1..k {
                            let x = av[(i * k + j) * d + c];
                            if x > best {
                                best = x;
                                best_j = j;
                            }
                        }
                        out[i * d + c] = best;
                        argmax[i * d + c] = best_j;
                    }
                }
            }
        }
        self.push("reduce_neighborhood", vec![m, d], out, Op::Reduce { a, mode }, vec![], argmax)
    }

    /// Per-channel normalization over the rows of one cloud, with learned
    /// affine correction: `(x - mu_d) / sqrt(var_d + eps) * gamma_d + beta_d`.
    pub fn instance_norm_rows(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (n, d) = self.dims2(a, "instance_norm_rows")?;
        if self.nodes[gamma.0].shape != [d] || self.nodes[beta.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "instance_norm_rows",
                detail: format!(
                    "gamma {:?} / beta {:?} for {d} channels",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            });
        }
        let av = &self.nodes[a.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let inv_n = 1.0 / n as f64;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += av[i * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m *= inv_n;
        }
        let mut inv_std = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let c = av[i * d + j] - mean[j];
                inv_std[j] += c * c;
            }
        }
        for v in inv_std.iter_mut() {
            *v = 1.0 / (*v * inv_n + eps).sqrt();
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = (av[i * d + j] - mean[j]) * inv_std[j] * gv[j] + bv[j];
            }
        }
        let mut aux = mean;
        aux.extend_from_slice(&inv_std);
        self.push(
            "instance_norm_rows",
            vec![n, d],
            out,
            Op::InstanceNorm { a, gamma, beta, eps },
            aux,
            vec![],
        )
    }

    /// Reinterprets the buffer under a new shape with equal element count.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        if numel(shape) != self.nodes[a.0].values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "{:?} -> {:?} changes element count",
                    self.nodes[a.0].shape, shape
                ),
            });
        }
        let values = self.nodes[a.0].values.clone();
        self.push("reshape", shape.to_vec(), values, Op::Reshape { a }, vec![], vec![])
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let total = self.nodes[a.0].values.iter().sum();
        self.push("sum_all", vec![1], vec![total], Op::SumAll { a }, vec![], vec![])
    }

    /// Euclidean norm of each row of an `(n, d)` matrix, as a length-n
    /// vector. Zero rows get a zero (sub)gradient.
    pub fn row_norms(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (n, d) = self.dims2(a, "row_norms")?;
        let av = &self.nodes[a.0].values;
        let out: Vec<f64> = (0..n)
            .map(|i| av[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push("row_norms", vec![n], out, Op::RowNorms { a }, vec![], vec![])
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let n = self.nodes[a.0].values.len();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-topological gradient propagation from a scalar loss.
    ///
    /// All gradient buffers are cleared first, so each call computes the
    /// gradients of exactly this loss. Fan-out accumulates additively.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].values.len()));
        }
        for node in self.nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            // The node's own grad buffer is complete once we reach it: nodes
            // only feed later nodes, so a plain reverse sweep is a valid
            // reverse-topological order.
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (n, k) = match before[a.0].shape[..] {
                        [n, k] => (n, k),
                        _ => unreachable!(),
                    };
                    let m = before[b.0].shape[1];
                    let g = &node.grad;
                    if a.0 == b.0 {
                        // Square self-product: accumulate both terms on one buffer.
                        let av = before[a.0].values.clone();
                        let ga = &mut before[a.0].grad;
                        for i in 0..n {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += g[i * m + j] * av[kk * m + j];
                                }
                                ga[i * k + kk] += acc;
                            }
                        }
                        for i in 0..n {
                            for kk in 0..k {
                                let x = av[i * k + kk];
                                for j in 0..m {
                                    ga[kk * m + j] += x * g[i * m + j];
                                }
                            }
                        }
                    } else {
                        let (fst, snd) = if a.0 < b.0 {
                            let (x, y) = before.split_at_mut(b.0);
                            (&mut x[a.0], &mut y[0])
                        } else {
                            let (x, y) = before.split_at_mut(a.0);
                            (&mut y[0], &mut x[b.0])
                        };
                        // fst is the node for `a`, snd for `b`.
                        let bv = &snd.values;
                        let ga = &mut fst.grad;
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for kk in 0..k {
                                let brow = &bv[kk * m..(kk + 1) * m];
                                let mut acc = 0.0;
                                for (gg, bb) in grow.iter().zip(brow) {
                                    acc += gg * bb;
                                }
                                ga[i * k + kk] += acc;
                            }
                        }
                        let av = &fst.values;
                        let gb = &mut snd.grad;
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            let arow = &av[i * k..(i + 1) * k];
                            for (kk, &x) in arow.iter().enumerate() {
                                let gbrow = &mut gb[kk * m..(kk + 1) * m];
                                for (o, &gg) in gbrow.iter_mut().zip(grow) {
                                    *o += x * gg;
                                }
                            }
                        }
                    }
                }
                Op::Transpose { a } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[a.0].grad;
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += node.grad[i * n + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    if a.0 == b.0 {
                        for (ga, &g) in before[a.0].grad.iter_mut().zip(&node.grad) {
                            *ga += 2.0 * g;
                        }
                    } else {
                        for (ga, &g) in before[a.0].grad.iter_mut().zip(&node.grad) {
                            *ga += g;
                        }
                        for (gb, &g) in before[b.0].grad.iter_mut().zip(&node.grad) {
                            *gb += g;
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if a.0 == b.0 {
                        // x - x: gradients cancel.
                    } else {
                        for (ga, &g) in before[a.0].grad.iter_mut().zip(&node.grad) {
                            *ga += g;
                        }
                        for (gb, &g) in before[b.0].grad.iter_mut().zip(&node.grad) {
                            *gb -= g;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if a.0 == b.0 {
                        let av = before[a.0].values.clone();
                        for ((ga, &g), &x) in
                            before[a.0].grad.iter_mut().zip(&node.grad).zip(&av)
                        {
                            *ga += 2.0 * g * x;
                        }
                    } else {
                        let (fst, snd) = if a.0 < b.0 {
                            let (x, y) = before.split_at_mut(b.0);
                            (&mut x[a.0], &mut y[0])
                        } else {
                            let (x, y) = before.split_at_mut(a.0);
                            (&mut y[0], &mut x[b.0])
                        };
                        for ((ga, &g), &y) in fst.grad.iter_mut().zip(&node.grad).zip(&snd.values) {
                            *ga += g * y;
                        }
                        for ((gb, &g), &x) in snd.grad.iter_mut().zip(&node.grad).zip(&fst.values) {
                            *gb += g * x;
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    for (ga, &g) in before[a.0].grad.iter_mut().zip(&node.grad) {
                        *ga += f * g;
                    }
                }
                Op::AddScalar { a, .. } => {
                    for (ga, &g) in before[a.0].grad.iter_mut().zip(&node.grad) {
                        *ga += g;
                    }
                }
                Op::AddBias { a, bias } => {
                    let d = node.shape[1];
                    for (ga, &g) in before[a.0].grad.iter_mut().zip(&node.grad) {
                        *ga += g;
                    }
                    let gb = &mut before[bias.0].grad;
                    for (i, &g) in node.grad.iter().enumerate() {
                        gb[i % d] += g;
                    }
                }
                Op::Relu { a } => {
                    let av = &before[a.0].values;
                    let ga = &mut before[a.0].grad;
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += node.grad[i];
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    let ga = &mut before[a.0].grad;
                    for i in 0..ga.len() {
                        let y = node.values[i];
                        ga[i] += node.grad[i] * y * (1.0 - y);
                    }
                }
                Op::Log { a } => {
                    let av = &before[a.0].values;
                    let ga = &mut before[a.0].grad;
                    for i in 0..ga.len() {
                        if av[i] >= LOG_FLOOR {
                            ga[i] += node.grad[i] / av[i];
                        }
                    }
                }
                Op::SoftmaxRows { a, temperature } => {
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[a.0].grad;
                    for i in 0..n {
                        let y = &node.values[i * m..(i + 1) * m];
                        let g = &node.grad[i * m..(i + 1) * m];
                        let dot: f64 = y.iter().zip(g).map(|(&yy, &gg)| yy * gg).sum();
                        for j in 0..m {
                            ga[i * m + j] += y[j] * (g[j] - dot) / temperature;
                        }
                    }
                }
                Op::SoftmaxCols { a, temperature } => {
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[a.0].grad;
                    for j in 0..m {
                        let mut dot = 0.0;
                        for i in 0..n {
                            dot += node.values[i * m + j] * node.grad[i * m + j];
                        }
                        for i in 0..n {
                            let y = node.values[i * m + j];
                            ga[i * m + j] += y * (node.grad[i * m + j] - dot) / temperature;
                        }
                    }
                }
                Op::L2NormalizeRows { a, eps } => {
                    let (n, d) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[a.0].grad;
                    for i in 0..n {
                        let norm = node.aux[i];
                        let y = &node.values[i * d..(i + 1) * d];
                        let g = &node.grad[i * d..(i + 1) * d];
                        if norm > *eps {
                            let dot: f64 = y.iter().zip(g).map(|(&yy, &gg)| yy * gg).sum();
                            for j in 0..d {
                                ga[i * d + j] += (g[j] - y[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..d {
                                ga[i * d + j] += g[j] / eps;
                            }
                        }
                    }
                }
                Op::DivRowSums { a } => {
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[a.0].grad;
                    for i in 0..n {
                        let s = node.aux[i];
                        let y = &node.values[i * m..(i + 1) * m];
                        let g = &node.grad[i * m..(i + 1) * m];
                        let dot: f64 = y.iter().zip(g).map(|(&yy, &gg)| yy * gg).sum();
                        for j in 0..m {
                            ga[i * m + j] += (g[j] - dot) / s;
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let n = node.shape[0];
                    let c1 = before[a.0].shape[1];
                    let c2 = before[b.0].shape[1];
                    let c = c1 + c2;
                    {
                        let ga = &mut before[a.0].grad;
                        for i in 0..n {
                            for j in 0..c1 {
                                ga[i * c1 + j] += node.grad[i * c + j];
                            }
                        }
                    }
                    let gb = &mut before[b.0].grad;
                    for i in 0..n {
                        for j in 0..c2 {
                            gb[i * c2 + j] += node.grad[i * c + c1 + j];
                        }
                    }
                }
                Op::GatherRows { a, indices, rows, cols } => {
                    let d = node.shape[2];
                    let ga = &mut before[a.0].grad;
                    for r in 0..(rows * cols) {
                        let src = &node.grad[r * d..(r + 1) * d];
                        let dst = &mut ga[indices[r] * d..(indices[r] + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                }
                Op::GatherEntries { a, pairs } => {
                    let m = before[a.0].shape[1];
                    let ga = &mut before[a.0].grad;
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        ga[i * m + j] += node.grad[p];
                    }
                }
                Op::Reduce { a, mode } => {
                    let (m, d) = (node.shape[0], node.shape[1]);
                    let k = before[a.0].shape[1];
                    let ga = &mut before[a.0].grad;
                    match mode {
                        ReduceMode::Mean => {
                            let inv = 1.0 / k as f64;
                            for i in 0..m {
                                for j in 0..k {
                                    let base = (i * k + j) * d;
                                    for c in 0..d {
                                        ga[base + c] += node.grad[i * d + c] * inv;
                                    }
                                }
                            }
                        }
                        ReduceMode::Max => {
                            for i in 0..m {
                                for c in 0..d {
                                    let j = node.aux_idx[i * d + c];
                                    ga[(i * k + j) * d + c] += node.grad[i * d + c];
                                }
                            }
                        }
                    }
                }
                Op::InstanceNorm { a, gamma, beta, .. } => {
                    let (n, d) = (node.shape[0], node.shape[1]);
                    let mean = &node.aux[..d];
                    let inv_std = &node.aux[d..];
                    let inv_n = 1.0 / n as f64;
                    let av = before[a.0].values.clone();
                    let gv = before[gamma.0].values.clone();

                    // Per-channel sums of dxhat and dxhat * xhat.
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gx = vec![0.0; d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            let xhat = (av[i * d + j] - mean[j]) * inv_std[j];
                            let g = node.grad[i * d + j];
                            let dxhat = g * gv[j];
                            sum_g[j] += dxhat;
                            sum_gx[j] += dxhat * xhat;
                            dgamma[j] += g * xhat;
                            dbeta[j] += g;
                        }
                    }
                    {
                        let ga = &mut before[a.0].grad;
                        for i in 0..n {
                            for j in 0..d {
                                let xhat = (av[i * d + j] - mean[j]) * inv_std[j];
                                let dxhat = node.grad[i * d + j] * gv[j];
                                ga[i * d + j] += inv_std[j]
                                    * (dxhat - inv_n * sum_g[j] - xhat * inv_n * sum_gx[j]);
                            }
                        }
                    }
                    for (o, g) in before[gamma.0].grad.iter_mut().zip(&dgamma) {
                        *o += g;
                    }
                    for (o, g) in before[beta.0].grad.iter_mut().zip(&dbeta) {
                        *o += g;
                    }
                }
                Op::Reshape { a } => {
                    for (ga, &g) in before[a.0].grad.iter_mut().zip(&node.grad) {
                        *ga += g;
                    }
                }
                Op::SumAll { a } => {
                    let g = node.grad[0];
                    for ga in before[a.0].grad.iter_mut() {
                        *ga += g;
                    }
                }
                Op::RowNorms { a } => {
                    let n = node.shape[0];
                    let d = before[a.0].shape[1];
                    let av = before[a.0].values.clone();
                    let ga = &mut before[a.0].grad;
                    for i in 0..n {
                        let norm = node.values[i];
                        if norm > 1e-30 {
                            let g = node.grad[i] / norm;
                            for j in 0..d {
                                ga[i * d + j] += g * av[i * d + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
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

use serde::{Deserialize, Serialize};

use super::kernels::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation, used for audits and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Matmul,
    Bmm,
    BmmNt,
    Add,
    AddRow,
    Mul,
    MulCol,
    Scale,
    LayerNorm,
    Gelu,
    SoftmaxRows,
    MeanRows,
    Transpose,
    TileRows,
    SplitHeads,
    MergeHeads,
    PrependRow,
    TakeFirstRow,
    Sum,
    BceWithLogits,
    FocalWithLogits,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 21] = [
        OpKind::Matmul,
        OpKind::Bmm,
        OpKind::BmmNt,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::MulCol,
        OpKind::Scale,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::SoftmaxRows,
        OpKind::MeanRows,
        OpKind::Transpose,
        OpKind::TileRows,
        OpKind::SplitHeads,
        OpKind::MergeHeads,
        OpKind::PrependRow,
        OpKind::TakeFirstRow,
        OpKind::Sum,
        OpKind::BceWithLogits,
        OpKind::FocalWithLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Bmm => "bmm",
            OpKind::BmmNt => "bmm_nt",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::MulCol => "mul_col",
            OpKind::Scale => "scale",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::MeanRows => "mean_rows",
            OpKind::Transpose => "transpose",
            OpKind::TileRows => "tile_rows",
            OpKind::SplitHeads => "split_heads",
            OpKind::MergeHeads => "merge_heads",
            OpKind::PrependRow => "prepend_row",
            OpKind::TakeFirstRow => "take_first_row",
            OpKind::Sum => "sum",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::FocalWithLogits => "focal_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        std::iter::once(OpKind::Leaf).chain(OpKind::DIFFERENTIABLE).find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, g: usize, p: usize, q: usize, r: usize },
    BmmNt { a: Var, b: Var, g: usize, p: usize, q: usize, r: usize },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    MulCol { x: Var, col: Var },
    Scale { x: Var, factor: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    SoftmaxRows { x: Var },
    MeanRows { x: Var, group: usize },
    Transpose { x: Var, r: usize, c: usize },
    TileRows { x: Var, reps: usize },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    PrependRow { x: Var, row: Var, group: usize },
    TakeFirstRow { x: Var, group: usize },
    Sum { x: Var },
    BceWithLogits { z: Var, labels: Vec<f64> },
    FocalWithLogits { z: Var, labels: Vec<f64>, gamma: f64, alpha: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::BmmNt { .. } => OpKind::BmmNt,
            Op::Add { .. } => OpKind::Add,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Mul { .. } => OpKind::Mul,
            Op::MulCol { .. } => OpKind::MulCol,
            Op::Scale { .. } => OpKind::Scale,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::MeanRows { .. } => OpKind::MeanRows,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::TileRows { .. } => OpKind::TileRows,
            Op::SplitHeads { .. } => OpKind::SplitHeads,
            Op::MergeHeads { .. } => OpKind::MergeHeads,
            Op::PrependRow { .. } => OpKind::PrependRow,
            Op::TakeFirstRow { .. } => OpKind::TakeFirstRow,
            Op::Sum { .. } => OpKind::Sum,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::FocalWithLogits { .. } => OpKind::FocalWithLogits,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Append-only tape of tensor operations with reverse-mode differentiation.
///
/// Nodes are pushed after their inputs, so the tape order is already a
/// topological order and `backward` walks it once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    multiplies: u64,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flips the sign of one backward rule. Used by mutation smoke tests.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Scalar multiplies performed by matrix-product nodes so far.
    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            (sa, sb) => return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::dim(format!("matmul of [{m}, {k}] and [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        self.multiplies += (m * k * n) as u64;
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product `[g, p, q] × [g, q, r] → [g, p, r]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, p, q, r) = match (self.shape(a), self.shape(b)) {
            ([g, p, q], [g2, q2, r]) if g == g2 && q == q2 => (*g, *p, *q, *r),
            (sa, sb) => return Err(Error::dim(format!("bmm of {sa:?} and {sb:?}"))),
        };
        let mut out = vec![0.0; g * p * r];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..g {
            gemm(
                p,
                q,
                r,
                &ad[i * p * q..(i + 1) * p * q],
                false,
                &bd[i * q * r..(i + 1) * q * r],
                false,
                &mut out[i * p * r..(i + 1) * p * r],
                0.0,
            );
        }
        self.multiplies += (g * p * q * r) as u64;
        let value = Tensor::new(vec![g, p, r], out)?;
        Ok(self.push(value, Op::Bmm { a, b, g, p, q, r }, &[a, b]))
    }

    /// Batched product with the second operand transposed:
    /// `[g, p, q] × [g, r, q]ᵀ → [g, p, r]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, p, q, r) = match (self.shape(a), self.shape(b)) {
            ([g, p, q], [g2, r, q2]) if g == g2 && q == q2 => (*g, *p, *q, *r),
            (sa, sb) => return Err(Error::dim(format!("bmm_nt of {sa:?} and {sb:?}"))),
        };
        let mut out = vec![0.0; g * p * r];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..g {
            gemm(
                p,
                q,
                r,
                &ad[i * p * q..(i + 1) * p * q],
                false,
                &bd[i * r * q..(i + 1) * r * q],
                true,
                &mut out[i * p * r..(i + 1) * p * r],
                0.0,
            );
        }
        self.multiplies += (g * p * q * r) as u64;
        let value = Tensor::new(vec![g, p, r], out)?;
        Ok(self.push(value, Op::BmmNt { a, b, g, p, q, r }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a vector of length `cols` to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(Error::dim(format!("add_row of {:?} and {:?}", self.shape(x), self.shape(bias))));
        }
        let b = self.data(bias);
        let data = self.data(x).chunks(cols.max(1)).flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(col).len() != rows {
            return Err(Error::dim(format!("mul_col of {:?} and {:?}", self.shape(x), self.shape(col))));
        }
        let cols = self.value(x).cols();
        let c = self.data(col);
        let data =
            self.data(x).chunks(cols.max(1)).zip(c).flat_map(|(row, s)| row.iter().map(move |v| v * s)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::MulCol { x, col }, &[x, col]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Normalises each row to zero mean and unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim(format!(
                "layer_norm of {:?} with gamma {:?}, beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).rows();
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut normalized = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for j in 0..cols {
                let xh = (row[j] - mean) * inv;
                normalized[r * cols + j] = xh;
                out[r * cols + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, normalized, rstd }, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x }, &[x])
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::numeric("softmax_rows received a non-finite entry"));
        }
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxRows { x }, &[x]))
    }

    /// Mean over consecutive blocks of `group` rows: `[G·group, d] → [G, d]`.
    pub fn mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::dim(format!("mean_rows: {rows} rows not divisible into groups of {group}")));
        }
        let blocks = rows / group;
        let xd = self.data(x);
        let mut out = vec![0.0; blocks * cols];
        for b in 0..blocks {
            let o = &mut out[b * cols..(b + 1) * cols];
            for r in 0..group {
                let row = &xd[(b * group + r) * cols..(b * group + r + 1) * cols];
                for (ov, v) in o.iter_mut().zip(row) {
                    *ov += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= group as f64);
        }
        let value = Tensor::new(vec![blocks, cols], out)?;
        Ok(self.push(value, Op::MeanRows { x, group }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let (r, c) = (value.shape()[1], value.shape()[0]);
        Ok(self.push(value, Op::Transpose { x, r, c }, &[x]))
    }

    /// Stacks `reps` copies of a matrix vertically.
    pub fn tile_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        let xd = self.data(x);
        let mut out = Vec::with_capacity(reps * xd.len());
        for _ in 0..reps {
            out.extend_from_slice(xd);
        }
        let value = Tensor::new(vec![reps * rows, cols], out)?;
        Ok(self.push(value, Op::TileRows { x, reps }, &[x]))
    }

    /// `[batch·seq, heads·dk] → [batch·heads, seq, dk]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if rows != batch * seq || heads == 0 || cols % heads != 0 {
            return Err(Error::dim(format!(
                "split_heads of {:?} into batch {batch}, seq {seq}, heads {heads}",
                self.shape(x)
            )));
        }
        let dk = cols / heads;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let src = &xd[(b * seq + i) * cols + h * dk..(b * seq + i) * cols + (h + 1) * dk];
                    let dst = ((b * heads + h) * seq + i) * dk;
                    out[dst..dst + dk].copy_from_slice(src);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, seq, dk], out)?;
        Ok(self.push(value, Op::SplitHeads { x, batch, seq, heads }, &[x]))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let dk = match self.shape(x) {
            [g, s, dk] if *g == batch * heads && *s == seq => *dk,
            s => return Err(Error::dim(format!("merge_heads of {s:?} with batch {batch}, seq {seq}, heads {heads}"))),
        };
        let cols = heads * dk;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let src = ((b * heads + h) * seq + i) * dk;
                    let dst = (b * seq + i) * cols + h * dk;
                    out[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let value = Tensor::new(vec![batch * seq, cols], out)?;
        Ok(self.push(value, Op::MergeHeads { x, batch, seq, heads }, &[x]))
    }

    /// Inserts `row` before every block of `group` rows:
    /// `[G·group, d] → [G·(group+1), d]`.
    pub fn prepend_row(&mut self, x: Var, row: Var, group: usize) -> Result<Var> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if group == 0 || rows % group != 0 || self.value(row).len() != cols {
            return Err(Error::dim(format!(
                "prepend_row of {:?} and {:?} with group {group}",
                self.shape(x),
                self.shape(row)
            )));
        }
        let blocks = rows / group;
        let (xd, rd) = (self.data(x), self.data(row));
        let mut out = Vec::with_capacity((rows + blocks) * cols);
        for b in 0..blocks {
            out.extend_from_slice(rd);
            out.extend_from_slice(&xd[b * group * cols..(b + 1) * group * cols]);
        }
        let value = Tensor::new(vec![blocks * (group + 1), cols], out)?;
        Ok(self.push(value, Op::PrependRow { x, row, group }, &[x, row]))
    }

    /// First row of every block of `group` rows: `[G·group, d] → [G, d]`.
    pub fn take_first_row(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::dim(format!("take_first_row: {rows} rows not divisible into groups of {group}")));
        }
        let xd = self.data(x);
        let out =
            (0..rows / group).flat_map(|b| xd[b * group * cols..(b * group + 1) * cols].iter().copied()).collect();
        let value = Tensor::new(vec![rows / group, cols], out)?;
        Ok(self.push(value, Op::TakeFirstRow { x, group }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Mean binary cross-entropy over logits, in the stable logit-space form.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zd = self.data(z);
        if zd.len() != labels.len() {
            return Err(Error::dim(format!("{} logits for {} labels", zd.len(), labels.len())));
        }
        let total: f64 = zd.iter().zip(labels).map(|(&z, &y)| z.max(0.0) - z * y + softplus(-z.abs())).sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(value, Op::BceWithLogits { z, labels: labels.to_vec() }, &[z]))
    }

    /// Mean α-balanced focal loss over logits.
    pub fn focal_with_logits(&mut self, z: Var, labels: &[f64], gamma: f64, alpha: f64) -> Result<Var> {
        let zd = self.data(z);
        if zd.len() != labels.len() {
            return Err(Error::dim(format!("{} logits for {} labels", zd.len(), labels.len())));
        }
        let total: f64 = zd.iter().zip(labels).map(|(&z, &y)| focal_terms(z, y, gamma, alpha).0).sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(value, Op::FocalWithLogits { z, labels: labels.to_vec(), gamma, alpha }, &[z]))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!("backward needs a scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            visited += 1;
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, self.data(*b), true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, self.data(*a), true, g, false, gb, 1.0);
                }
            }
            Op::Bmm { a, b, g: groups, p, q, r } => {
                let (p, q, r) = (*p, *q, *r);
                if let Some(ga) = self.slot(grads, *a) {
                    let bd = self.data(*b);
                    for i in 0..*groups {
                        gemm(
                            p,
                            r,
                            q,
                            &g[i * p * r..(i + 1) * p * r],
                            false,
                            &bd[i * q * r..(i + 1) * q * r],
                            true,
                            &mut ga[i * p * q..(i + 1) * p * q],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let ad = self.data(*a);
                    for i in 0..*groups {
                        gemm(
                            q,
                            p,
                            r,
                            &ad[i * p * q..(i + 1) * p * q],
                            true,
                            &g[i * p * r..(i + 1) * p * r],
                            false,
                            &mut gb[i * q * r..(i + 1) * q * r],
                            1.0,
                        );
                    }
                }
            }
            Op::BmmNt { a, b, g: groups, p, q, r } => {
                let (p, q, r) = (*p, *q, *r);
                if let Some(ga) = self.slot(grads, *a) {
                    let bd = self.data(*b);
                    for i in 0..*groups {
                        gemm(
                            p,
                            r,
                            q,
                            &g[i * p * r..(i + 1) * p * r],
                            false,
                            &bd[i * r * q..(i + 1) * r * q],
                            false,
                            &mut ga[i * p * q..(i + 1) * p * q],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let ad = self.data(*a);
                    for i in 0..*groups {
                        gemm(
                            r,
                            p,
                            q,
                            &g[i * p * r..(i + 1) * p * r],
                            true,
                            &ad[i * p * q..(i + 1) * p * q],
                            false,
                            &mut gb[i * r * q..(i + 1) * r * q],
                            1.0,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(gv, g);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let cols = gb.len();
                    for row in g.chunks(cols.max(1)) {
                        axpy(gb, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gv), bv) in ga.iter_mut().zip(g).zip(self.data(*b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, gv), av) in gb.iter_mut().zip(g).zip(self.data(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::MulCol { x, col } => {
                let cols = self.value(*x).cols().max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    let c = self.data(*col);
                    for ((grow, gout), s) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(c) {
                        for (d, gv) in grow.iter_mut().zip(gout) {
                            *d += gv * s;
                        }
                    }
                }
                if let Some(gc) = self.slot(grads, *col) {
                    let xd = self.data(*x);
                    for ((d, gout), xrow) in gc.iter_mut().zip(g.chunks(cols)).zip(xd.chunks(cols)) {
                        *d += gout.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, gv) in gx.iter_mut().zip(g) {
                        *d += factor * gv;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, normalized, rstd } => {
                let cols = self.value(*x).cols().max(1);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, nrow) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for ((d, gv), xh) in gg.iter_mut().zip(grow).zip(nrow) {
                            *d += gv * xh;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks(cols) {
                        axpy(gb, grow);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let gam = self.data(*gamma);
                    let mut gxh = vec![0.0; cols];
                    for (r, (grow, nrow)) in g.chunks(cols).zip(normalized.chunks(cols)).enumerate() {
                        for j in 0..cols {
                            gxh[j] = grow[j] * gam[j];
                        }
                        let mean_g = gxh.iter().sum::<f64>() / cols as f64;
                        let mean_gx = gxh.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dst[j] += rstd[r] * (gxh[j] - mean_g - nrow[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, gv), &v) in gx.iter_mut().zip(g).zip(self.data(*x)) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = node.value.cols().max(1);
                    let y = node.value.data();
                    for ((drow, grow), yrow) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::MeanRows { x, group } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = node.value.cols().max(1);
                    let inv = 1.0 / *group as f64;
                    for (r, drow) in gx.chunks_mut(cols).enumerate() {
                        let grow = &g[(r / group) * cols..(r / group + 1) * cols];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::Transpose { x, r, c } => {
                if let Some(gx) = self.slot(grads, *x) {
                    // g is [c, r]; x is [r, c]
                    for i in 0..*r {
                        for j in 0..*c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::TileRows { x, reps } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let len = gx.len();
                    for k in 0..*reps {
                        axpy(gx, &g[k * len..(k + 1) * len]);
                    }
                }
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = self.value(*x).cols();
                    let dk = cols / heads;
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for i in 0..*seq {
                                let src = ((b * heads + h) * seq + i) * dk;
                                let dst = (b * seq + i) * cols + h * dk;
                                axpy(&mut gx[dst..dst + dk], &g[src..src + dk]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = node.value.cols();
                    let dk = cols / heads;
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for i in 0..*seq {
                                let dst = ((b * heads + h) * seq + i) * dk;
                                let src = (b * seq + i) * cols + h * dk;
                                axpy(&mut gx[dst..dst + dk], &g[src..src + dk]);
                            }
                        }
                    }
                }
            }
            Op::PrependRow { x, row, group } => {
                let cols = node.value.cols().max(1);
                let blocks = node.value.rows() / (group + 1);
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..blocks {
                        let src = (b * (group + 1) + 1) * cols;
                        axpy(&mut gx[b * group * cols..(b + 1) * group * cols], &g[src..src + group * cols]);
                    }
                }
                if let Some(gr) = self.slot(grads, *row) {
                    for b in 0..blocks {
                        let src = b * (group + 1) * cols;
                        axpy(gr, &g[src..src + cols]);
                    }
                }
            }
            Op::TakeFirstRow { x, group } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = node.value.cols().max(1);
                    for (b, grow) in g.chunks(cols).enumerate() {
                        let dst = b * group * cols;
                        axpy(&mut gx[dst..dst + cols], grow);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::BceWithLogits { z, labels } => {
                if let Some(gz) = self.slot(grads, *z) {
                    let scale = g[0] / labels.len() as f64;
                    for ((d, &zv), &y) in gz.iter_mut().zip(self.data(*z)).zip(labels) {
                        *d += scale * (sigmoid(zv) - y);
                    }
                }
            }
            Op::FocalWithLogits { z, labels, gamma, alpha } => {
                if let Some(gz) = self.slot(grads, *z) {
                    let scale = g[0] / labels.len() as f64;
                    for ((d, &zv), &y) in gz.iter_mut().zip(self.data(*z)).zip(labels) {
                        *d += scale * focal_terms(zv, y, *gamma, *alpha).1;
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` if `v` takes no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss value and its derivative with respect to the logit.
fn focal_terms(z: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    // p_t is the probability assigned to the true class; s = dz-direction of p_t.
    let (s, alpha_t) = if y >= 0.5 { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
    let log_pt = -softplus(-s * z);
    let pt = sigmoid(s * z);
    let one_minus = sigmoid(-s * z);
    let modulator = if gamma == 0.0 { 1.0 } else { one_minus.powf(gamma) };
    let loss = -alpha_t * modulator * log_pt;
    let dz = s * alpha_t * (gamma * pt * modulator * log_pt - modulator * one_minus);
    (loss, dz)
}

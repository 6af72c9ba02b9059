//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse and returns gradients for the leaves registered with
//! [`Tape::param`]; leaves registered with [`Tape::constant`] never receive a
//! gradient entry. A fresh tape (or [`Tape::clear`]) is used per optimizer
//! step.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lengths of the independent sequences packed side by side along the time
/// axis of a `[channels, total]` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lens: Arc<[usize]>,
}

impl Segments {
    pub fn new(lens: Vec<usize>) -> Result<Self> {
        if lens.is_empty() || lens.contains(&0) {
            return shape_err(format!("segment lengths must be positive, got {lens:?}"));
        }
        Ok(Self { lens: lens.into() })
    }

    pub fn single(len: usize) -> Self {
        Self {
            lens: vec![len].into(),
        }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn count(&self) -> usize {
        self.lens.len()
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// `(offset, len)` of each segment.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lens.iter().scan(0usize, |off, &len| {
            let start = *off;
            *off += len;
            Some((start, len))
        })
    }

    /// Index of the final column of each segment.
    pub fn last_indices(&self) -> Vec<usize> {
        self.spans().map(|(o, l)| o + l - 1).collect()
    }
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormMode<'a> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel batch statistics: mean and unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f32>,
    },
    RowDot(Var, Var),
    LogSumExpRows(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        dilation: usize,
        segs: Segments,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch: bool,
    },
    SelectCols {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Segments,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered record of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    (x * 0.5 * (1.0 + libm::erf(x * GELU_INV_SQRT2))) as f32
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    let cdf = 0.5 * (1.0 + libm::erf(x * GELU_INV_SQRT2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    (cdf + x * pdf) as f32
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        d => shape_err(format!("{what}: expected a matrix, got {d:?}")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            trainable: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return shape_err(format!("{what}: {da:?} vs {db:?}"));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.dims().to_vec(), data).expect("same dims");
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.dims().to_vec(), data).expect("same dims");
        self.push(value, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// `x[r,c] + b[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "add_row_bias")?;
        if self.value(b).len() != c {
            return shape_err(format!("row bias of {} for {c} columns", self.value(b).len()));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for i in 0..r {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, b), &[x, b]))
    }

    /// `x[r,c] + b[r]` broadcast over columns.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, _) = dims2(self.value(x), "add_col_bias")?;
        if self.value(b).len() != r {
            return shape_err(format!("column bias of {} for {r} rows", self.value(b).len()));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, bv) in bias.into_iter().enumerate() {
            for o in out.row_mut(i) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddColBias(x, b), &[x, b]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| f64::from(v)).sum();
        let m = (s / t.len() as f64) as f32;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = dims2(self.value(x), "normalize_rows")?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = out.row_mut(i);
            let n = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if n <= 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("row {i} has norm {n}")));
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / n) as f32;
            }
            norms.push(n as f32);
        }
        Ok(self.push(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Row-wise inner products of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "row_dot")?;
        let (r, _) = dims2(self.value(a), "row_dot")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = (0..r)
            .map(|i| {
                ta.row(i)
                    .iter()
                    .zip(tb.row(i))
                    .map(|(&x, &y)| f64::from(x) * f64::from(y))
                    .sum::<f64>() as f32
            })
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowDot(a, b), &[a, b]))
    }

    /// `log Σ_j exp(x[i,j])` for each row.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = dims2(self.value(x), "logsumexp_rows")?;
        let t = self.value(x);
        let data = (0..r)
            .map(|i| {
                let row = t.row(i);
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let s: f64 = row.iter().map(|&v| f64::from(v - m).exp()).sum();
                m + s.ln() as f32
            })
            .collect();
        Ok(self.push(Tensor::vector(data), Op::LogSumExpRows(x), &[x]))
    }

    /// Gathers elements by flat index into a vector.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= t.len()) {
            return shape_err(format!("pick indices out of range for {:?}", t.dims()));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::Pick { x, idx }, &[x]))
    }

    /// Causal dilated convolution of one sequence `x[C_in,T]` with
    /// `w[C_out,C_in,K]`; tap `K-1` reads the current time step.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (_, t) = dims2(self.value(x), "conv1d_causal")?;
        self.conv1d_causal_segments(x, w, dilation, &Segments::single(t))
    }

    /// Causal dilated convolution applied independently to each packed
    /// segment of `x[C_in, total]`.
    pub fn conv1d_causal_segments(
        &mut self,
        x: Var,
        w: Var,
        dilation: usize,
        segs: &Segments,
    ) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::Parameter("dilation must be at least 1".into()));
        }
        let (cin, n) = dims2(self.value(x), "conv1d input")?;
        let (cout, wcin, kk) = match self.value(w).dims() {
            [a, b, c] => (*a, *b, *c),
            d => return shape_err(format!("conv weight must be rank 3, got {d:?}")),
        };
        if wcin != cin {
            return shape_err(format!("conv expects {wcin} input channels, got {cin}"));
        }
        if segs.total() != n {
            return shape_err(format!("segments cover {} of {n} steps", segs.total()));
        }
        let cols = im2col(self.value(x).data(), cin, n, kk, dilation, segs);
        let out = kernels::gemm(self.value(w).data(), &cols, cout, cin * kk, n);
        let value = Tensor::new(vec![cout, n], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                dilation,
                segs: segs.clone(),
            },
            &[x, w],
        ))
    }

    /// Per-channel normalization of `x[C,N]` followed by `gamma·x̂ + beta`.
    /// Returns the batch statistics when normalizing with them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (c, n) = dims2(self.value(x), "batch_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("batch_norm affine parameters do not match channels");
        }
        let xd = self.value(x).data();
        let (mean, var_biased, stats) = match mode {
            NormMode::Batch => {
                let mut mean = Vec::with_capacity(c);
                let mut var = Vec::with_capacity(c);
                let mut unbiased = Vec::with_capacity(c);
                for ch in 0..c {
                    let row = &xd[ch * n..(ch + 1) * n];
                    let m = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
                    let ss = row.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>();
                    mean.push(m as f32);
                    var.push((ss / n as f64) as f32);
                    unbiased.push((ss / (n.max(2) - 1) as f64) as f32);
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("running statistics do not match channels");
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var_biased
            .iter()
            .map(|&v| (1.0 / (f64::from(v) + f64::from(eps)).sqrt()) as f32)
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; c * n];
        let mut out = vec![0.0f32; c * n];
        for ch in 0..c {
            for t in 0..n {
                let i = ch * n + t;
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + b[ch];
            }
        }
        let value = Tensor::new(vec![c, n], out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: stats.is_some(),
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// `out[b, c] = x[c, idx[b]]`: gathers columns of `x[C,N]` as rows.
    pub fn select_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (c, n) = dims2(self.value(x), "select_cols")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return shape_err("select_cols index out of range");
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &col in &idx {
            out.extend((0..c).map(|ch| xd[ch * n + col]));
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(value, Op::SelectCols { x, idx }, &[x]))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        let (_, c) = dims2(self.value(first), "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = dims2(self.value(p), "concat_rows")?;
            if pc != c {
                return shape_err(format!("concat_rows: {pc} vs {c} columns"));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_rows")?;
        if start >= end || end > r {
            return shape_err(format!("row slice {start}..{end} of {r} rows"));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let value = Tensor::new(vec![end - start, c], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims2(self.value(a), "concat_cols")?;
        let (rb, cb) = dims2(self.value(b), "concat_cols")?;
        if ra != rb {
            return shape_err(format!("concat_cols: {ra} vs {rb} rows"));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Normalizes each row of `x[r,c]` then applies `gamma[c]`, `beta[c]`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "layer_norm_rows")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("layer_norm affine parameters do not match width");
        }
        let t = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; r * c];
        let mut out = vec![0.0f32; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().map(|&v| f64::from(v)).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + f64::from(eps)).sqrt();
            for j in 0..c {
                let h = ((f64::from(row[j]) - m) * is) as f32;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
            inv_std.push(is as f32);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head causal self-attention over packed sequences: `q`, `k`, `v`
    /// are `[total, width]` with rows grouped by `segs`. Position `i` of a
    /// segment attends to positions `≤ i` of the same segment.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &Segments,
    ) -> Result<Var> {
        self.same_dims(q, k, "attention q/k")?;
        self.same_dims(q, v, "attention q/v")?;
        let (n, width) = dims2(self.value(q), "causal_attention")?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::Parameter(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        if segs.total() != n {
            return shape_err("attention segments do not cover the sequence");
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0f32; n * width];
        let mut probs = Vec::new();
        for (off, len) in segs.spans() {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..len {
                    let qi = &qd[(off + i) * width + col..(off + i) * width + col + dh];
                    let mut scores = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let kj = &kd[(off + j) * width + col..(off + j) * width + col + dh];
                        let s: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores.push(s * scale);
                    }
                    let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0.0f64;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += f64::from(*s);
                    }
                    let orow = &mut out[(off + i) * width + col..(off + i) * width + col + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = (f64::from(*s) / z) as f32;
                        let vj = &vd[(off + j) * width + col..(off + j) * width + col + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += *s * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let value = Tensor::new(vec![n, width], out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segs: segs.clone(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if na != nb {
            return shape_err(format!("cosine_sim of lengths {na} and {nb}"));
        }
        let a2 = self.reshape(a, &[1, na])?;
        let b2 = self.reshape(b, &[1, nb])?;
        let an = self.normalize_rows(a2)?;
        let bn = self.normalize_rows(b2)?;
        let d = self.row_dot(an, bn)?;
        self.reshape(d, &[])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {:?}",
                root.value.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if root.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (node.trainable, g) {
                    (true, Some(g)) => Some(Tensor::new(node.value.dims().to_vec(), g).unwrap()),
                    (true, None) => Some(Tensor::zeros(node.value.dims())),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl Fn(usize) -> f32) {
        if let Some(s) = self.slot(grads, v) {
            for (i, x) in s.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn backprop(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k, c) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                if let Some(s) = self.slot(grads, *a) {
                    kernels::gemm_nt_acc(g, tb.data(), r, k, c, s);
                }
                if let Some(s) = self.slot(grads, *b) {
                    kernels::gemm_tn_acc(ta.data(), g, r, k, c, s);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.dims()[0], node.value.dims()[1]);
                // out[r,c] = a[c,r]
                self.acc(grads, *a, |idx| {
                    let (i, j) = (idx / r, idx % r);
                    g[j * c + i]
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |i| g[i] * tb[i]);
                self.acc(grads, *b, |i| g[i] * ta[i]);
            }
            Op::Scale(a, c) => self.acc(grads, *a, |i| g[i] * c),
            Op::AddRowBias(x, b) => {
                self.acc(grads, *x, |i| g[i]);
                let c = node.value.dims()[1];
                if let Some(s) = self.slot(grads, *b) {
                    for row in g.chunks(c) {
                        for (o, &v) in s.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::AddColBias(x, b) => {
                self.acc(grads, *x, |i| g[i]);
                let c = node.value.dims()[1];
                if let Some(s) = self.slot(grads, *b) {
                    for (o, row) in s.iter_mut().zip(g.chunks(c)) {
                        *o += row.iter().sum::<f32>();
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, |i| g[i] * gelu_grad_scalar(xd[i]));
            }
            Op::Sum(x) => self.acc(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f32;
                self.acc(grads, *x, |_| g[0] / n);
            }
            Op::Reshape(x) => self.acc(grads, *x, |i| g[i]),
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = node.value.dims()[1];
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = self.value(*a).dims()[1];
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |i| g[i / c] * tb[i]);
                self.acc(grads, *b, |i| g[i / c] * ta[i]);
            }
            Op::LogSumExpRows(x) => {
                let t = self.value(*x);
                let c = t.dims()[1];
                let out = node.value.data();
                let xd = t.data();
                self.acc(grads, *x, |i| {
                    let r = i / c;
                    g[r] * (xd[i] - out[r]).exp()
                });
            }
            Op::Pick { x, idx } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        s[i] += g[k];
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                dilation,
                segs,
            } => self.conv_backward(*x, *w, *dilation, segs, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let (c, n) = (node.value.dims()[0], node.value.dims()[1]);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gx = vec![0.0f32; c];
                for ch in 0..c {
                    let (gr, hr) = (&g[ch * n..(ch + 1) * n], &xhat[ch * n..(ch + 1) * n]);
                    sum_g[ch] = gr.iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
                    sum_gx[ch] = gr
                        .iter()
                        .zip(hr)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum::<f64>() as f32;
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    for ch in 0..c {
                        s[ch] += sum_gx[ch];
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for ch in 0..c {
                        s[ch] += sum_g[ch];
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let nf = n as f32;
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        for t in 0..n {
                            let i = ch * n + t;
                            s[i] += if *batch {
                                k * (g[i] - sum_g[ch] / nf - xhat[i] * sum_gx[ch] / nf)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
            }
            Op::SelectCols { x, idx } => {
                let (c, n) = (self.value(*x).dims()[0], self.value(*x).dims()[1]);
                if let Some(s) = self.slot(grads, *x) {
                    for (b, &col) in idx.iter().enumerate() {
                        for ch in 0..c {
                            s[ch * n + col] += g[b * c + ch];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |i| g[off + i]);
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.dims()[1];
                let off = start * c;
                let len = node.value.len();
                if let Some(s) = self.slot(grads, *x) {
                    for (o, &v) in s[off..off + len].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).dims()[1];
                let cb = self.value(*b).dims()[1];
                let w = ca + cb;
                self.acc(grads, *a, |i| g[(i / ca) * w + i % ca]);
                self.acc(grads, *b, |i| g[(i / cb) * w + ca + i % cb]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = (node.value.dims()[0], node.value.dims()[1]);
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(grads, *gamma) {
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let cf = c as f32;
                    for i in 0..r {
                        let mut sg = 0.0f32;
                        let mut sgx = 0.0f32;
                        for j in 0..c {
                            let gh = g[i * c + j] * gam[j];
                            sg += gh;
                            sgx += gh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let gh = g[i * c + j] * gam[j];
                            s[i * c + j] +=
                                inv_std[i] * (gh - sg / cf - xhat[i * c + j] * sgx / cf);
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segs, probs, g, grads),
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        dilation: usize,
        segs: &Segments,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (cin, n) = (self.value(x).dims()[0], self.value(x).dims()[1]);
        let (cout, kk) = (self.value(w).dims()[0], self.value(w).dims()[2]);
        if let Some(s) = self.slot(grads, w) {
            let cols = im2col(self.value(x).data(), cin, n, kk, dilation, segs);
            kernels::gemm_nt_acc(g, &cols, cout, cin * kk, n, s);
        }
        if let Some(s) = self.slot(grads, x) {
            let mut dcols = vec![0.0f32; cin * kk * n];
            kernels::gemm_tn_acc(self.value(w).data(), g, cout, cin * kk, n, &mut dcols);
            col2im_acc(&dcols, cin, n, kk, dilation, segs, s);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &Segments,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let width = self.value(q).dims()[1];
        let dh = width / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let n = self.value(q).dims()[0];
        let mut dq = vec![0.0f32; n * width];
        let mut dk = vec![0.0f32; n * width];
        let mut dv = vec![0.0f32; n * width];
        let mut p_off = 0;
        for (off, len) in segs.spans() {
            for h in 0..heads {
                let col = h * dh;
                let span = |i: usize| (off + i) * width + col..(off + i) * width + col + dh;
                for i in 0..len {
                    let p = &probs[p_off..p_off + i + 1];
                    p_off += i + 1;
                    let gi = &g[span(i)];
                    let mut dp = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let vj = &vd[span(j)];
                        dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f32>());
                        let dvj = &mut dv[span(j)];
                        for (d, &gv) in dvj.iter_mut().zip(gi) {
                            *d += p[j] * gv;
                        }
                    }
                    let pdp: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let qi_r = span(i);
                        let kj_r = span(j);
                        for t in 0..dh {
                            dq[qi_r.start + t] += ds * kd[kj_r.start + t];
                            dk[kj_r.start + t] += ds * qd[qi_r.start + t];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |i| dq[i]);
        self.acc(grads, k, |i| dk[i]);
        self.acc(grads, v, |i| dv[i]);
    }
}

/// Row `ci·K + k` holds channel `ci` delayed by `(K−1−k)·dilation` steps
/// within each segment, zero before the segment start.
fn im2col(x: &[f32], cin: usize, n: usize, kk: usize, dilation: usize, segs: &Segments) -> Vec<f32> {
    let mut cols = vec![0.0f32; cin * kk * n];
    for ci in 0..cin {
        for k in 0..kk {
            let shift = (kk - 1 - k) * dilation;
            let row = &mut cols[(ci * kk + k) * n..(ci * kk + k + 1) * n];
            for (off, len) in segs.spans() {
                if shift >= len {
                    continue;
                }
                row[off + shift..off + len].copy_from_slice(&x[ci * n + off..ci * n + off + len - shift]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im_acc(cols: &[f32], cin: usize, n: usize, kk: usize, dilation: usize, segs: &Segments, dx: &mut [f32]) {
    for ci in 0..cin {
        for k in 0..kk {
            let shift = (kk - 1 - k) * dilation;
            let row = &cols[(ci * kk + k) * n..(ci * kk + k + 1) * n];
            for (off, len) in segs.spans() {
                if shift >= len {
                    continue;
                }
                let dst = &mut dx[ci * n + off..ci * n + off + len - shift];
                for (d, &v) in dst.iter_mut().zip(&row[off + shift..off + len]) {
                    *d += v;
                }
            }
        }
    }
}

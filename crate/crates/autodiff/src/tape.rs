use crate::error::{AutodiffError, Result};
use crate::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// The caller computes the forward value itself and hands it to
/// [`Tape::custom`]; the tape calls `backward` with the upstream gradient.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    /// One gradient per input, each the length of that input's data.
    /// `None` means the input receives no gradient from this op.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    GatherRows {
        param: ParamId,
        rows: Vec<usize>,
    },
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
    },
    Slice {
        x: usize,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        width: usize,
    },
    Sum(usize),
    Mean(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    WeightedSum {
        alpha: usize,
        items: Vec<usize>,
    },
    SegmentMean {
        x: usize,
        lens: Vec<usize>,
    },
    SegmentAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        lens: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every op's inputs are recorded before the op itself, so the record is a
/// topological order and [`Tape::backward`] walks it in exact reverse.
pub struct Tape {
    nodes: Vec<Node>,
    seed: u64,
    step: u64,
    train: bool,
    dropout_instances: u64,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument { op, msg: msg.into() }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_lens(op: &'static str, lens: &[usize], total: usize) -> Result<()> {
    if lens.is_empty() || lens.contains(&0) {
        return Err(invalid(op, "segments must be non-empty"));
    }
    if lens.iter().sum::<usize>() != total {
        return Err(invalid(
            op,
            format!(
                "segment lengths sum to {} but input has {total} rows",
                lens.iter().sum::<usize>()
            ),
        ));
    }
    Ok(())
}

impl Tape {
    /// `seed` keys the dropout masks drawn on this tape.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            seed,
            step: 0,
            train: false,
            dropout_instances: 0,
        }
    }

    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Sets the step component of the dropout key.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let tensor = tensor.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    /// Records the current value of a parameter; its gradient flows back
    /// into the store on [`Tape::backward`].
    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> Var {
        let value = params.get(id).clone().with_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Embedding lookup: rows of a 2-D parameter table, stacked.
    pub fn gather_rows(&mut self, params: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = params.get(id);
        let (n_rows, cols) = table
            .dims2()
            .ok_or_else(|| invalid("gather_rows", "table must be 2-D"))?;
        if rows.is_empty() {
            return Err(invalid("gather_rows", "no rows requested"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n_rows {
                return Err(invalid("gather_rows", format!("row {r} out of range {n_rows}")));
            }
            data.extend_from_slice(table.row(r));
        }
        let value = Tensor::from_parts(vec![rows.len(), cols], data);
        self.push(
            value,
            Op::GatherRows {
                param: id,
                rows: rows.to_vec(),
            },
            true,
            "gather_rows",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self
            .val(a)
            .dims2()
            .ok_or_else(|| invalid("matmul", "lhs must be 2-D"))?;
        let (k2, n) = self
            .val(b)
            .dims2()
            .ok_or_else(|| invalid("matmul", "rhs must be 2-D"))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.val(a).data(), self.val(b).data(), &mut out);
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a.0, b.0),
            needs,
            "matmul",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self
            .val(a)
            .dims2()
            .ok_or_else(|| invalid("transpose", "input must be 2-D"))?;
        let src = self.val(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose(a.0),
            needs,
            "transpose",
        )
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, Op::Mul(a.0, b.0), needs, "mul")
    }

    /// Adds a vector along the trailing dimension; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| invalid("add_bias", "scalar input"))?;
        if self.val(bias).len() != d || self.shape(bias).len() != 1 {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.val(bias).data();
        let data = self
            .val(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let needs = self.needs(&[x.0, bias.0]);
        self.push(value, Op::AddBias(x.0, bias.0), needs, "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = Tensor::from_parts(
            self.shape(x).to_vec(),
            self.val(x).data().iter().map(|v| v * c).collect(),
        );
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Scale(x.0, c), needs, "scale")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::from_parts(
            self.shape(x).to_vec(),
            self.val(x).data().iter().map(|v| v.tanh()).collect(),
        );
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Tanh(x.0), needs, "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::from_parts(
            self.shape(x).to_vec(),
            self.val(x).data().iter().map(|v| v.max(0.0)).collect(),
        );
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Relu(x.0), needs, "relu")
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.val(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let needs = self.needs(&[x.0]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x: x.0,
                outer,
                len,
                inner,
            },
            needs,
            "softmax",
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y) {
                return Err(mismatch("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let total: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for o in 0..outer {
            for p in parts {
                let data = self.val(*p).data();
                let chunk = data.len() / outer;
                out.extend_from_slice(&data[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat { parts: ids, outer },
            needs,
            "concat",
        )
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(invalid(
                "slice",
                format!("bad range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src_chunk = len * inner;
        let offset = start * inner;
        let width = (end - start) * inner;
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&src[o * src_chunk + offset..o * src_chunk + offset + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let needs = self.needs(&[x.0]);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice {
                x: x.0,
                outer,
                src_chunk,
                offset,
                width,
            },
            needs,
            "slice",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().sum();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), needs, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.val(x).data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(m), Op::Mean(x.0), needs, "mean")
    }

    /// Inverted dropout. Identity in eval mode; in train mode each element
    /// survives with probability `1 - p` and is scaled by `1 / (1 - p)`.
    ///
    /// The mask is keyed by (tape seed, dropout instance, step), where the
    /// instance counts dropout calls on this tape in order.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        let instance = self.dropout_instances;
        self.dropout_instances += 1;
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.val(x).len() as u64)
            .map(|i| {
                if rng::uniform(self.seed, instance, self.step, i) >= p {
                    keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self.val(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Dropout { x: x.0, mask }, needs, "dropout")
    }

    /// Normalizes each trailing-dimension row to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.layer_norm_impl(x, None, None, eps)
    }

    /// [`Tape::layer_norm`] followed by a per-feature gain and shift.
    pub fn layer_norm_affine(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.layer_norm_impl(x, Some(gamma), Some(beta), eps)
    }

    fn layer_norm_impl(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(invalid("layer_norm", "eps must be positive"));
        }
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        for g in gamma.iter().chain(beta.iter()) {
            if self.shape(*g) != [d] {
                return Err(mismatch("layer_norm", self.shape(x), self.shape(*g)));
            }
        }
        let src = self.val(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let mut out = xhat.clone();
        if let (Some(g), Some(b)) = (gamma, beta) {
            let (g, b) = (self.val(g).data(), self.val(b).data());
            for row in out.chunks_mut(d) {
                for ((o, gg), bb) in row.iter_mut().zip(g).zip(b) {
                    *o = *o * gg + bb;
                }
            }
        }
        let mut ids = vec![x.0];
        ids.extend(gamma.map(|v| v.0));
        ids.extend(beta.map(|v| v.0));
        let needs = self.needs(&ids);
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.map(|v| v.0),
                beta: beta.map(|v| v.0),
                xhat,
                inv_std,
            },
            needs,
            "layer_norm",
        )
    }

    /// `out[i] = Σ_j alpha[i, j] · items[j][i]` for `alpha: n×L` and
    /// `L` items of shape `n×d`.
    pub fn weighted_sum(&mut self, alpha: Var, items: &[Var]) -> Result<Var> {
        let (n, l) = self
            .val(alpha)
            .dims2()
            .ok_or_else(|| invalid("weighted_sum", "weights must be n×L"))?;
        if items.len() != l {
            return Err(invalid(
                "weighted_sum",
                format!("{l} weight columns for {} items", items.len()),
            ));
        }
        let item_shape = self.shape(items[0]).to_vec();
        let (n2, d) = self
            .val(items[0])
            .dims2()
            .ok_or_else(|| invalid("weighted_sum", "items must be n×d"))?;
        if n2 != n {
            return Err(mismatch("weighted_sum", self.shape(alpha), &item_shape));
        }
        for it in items {
            if self.shape(*it) != item_shape.as_slice() {
                return Err(mismatch("weighted_sum", &item_shape, self.shape(*it)));
            }
        }
        let a = self.val(alpha).data();
        let mut out = vec![0.0; n * d];
        for (j, it) in items.iter().enumerate() {
            let src = self.val(*it).data();
            for i in 0..n {
                axpy(a[i * l + j], &src[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
            }
        }
        let mut ids = vec![alpha.0];
        ids.extend(items.iter().map(|v| v.0));
        let needs = self.needs(&ids);
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::WeightedSum {
                alpha: alpha.0,
                items: ids[1..].to_vec(),
            },
            needs,
            "weighted_sum",
        )
    }

    /// Mean over consecutive row groups of lengths `lens`.
    pub fn segment_mean(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let (n, d) = self
            .val(x)
            .dims2()
            .ok_or_else(|| invalid("segment_mean", "input must be 2-D"))?;
        check_lens("segment_mean", lens, n)?;
        let src = self.val(x).data();
        let mut out = vec![0.0; lens.len() * d];
        let mut start = 0;
        for (s, &len) in lens.iter().enumerate() {
            let dst = &mut out[s * d..(s + 1) * d];
            for r in start..start + len {
                axpy(1.0 / len as f64, &src[r * d..(r + 1) * d], dst);
            }
            start += len;
        }
        let needs = self.needs(&[x.0]);
        self.push(
            Tensor::from_parts(vec![lens.len(), d], out),
            Op::SegmentMean {
                x: x.0,
                lens: lens.to_vec(),
            },
            needs,
            "segment_mean",
        )
    }

    /// Multi-head scaled dot-product self-attention restricted to row
    /// segments: a row attends only to rows of its own segment.
    ///
    /// `q`, `k`, `v` are `N×d` with `d` divisible by `heads`; the output is
    /// `N×d` with head outputs side by side.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, lens: &[usize]) -> Result<Var> {
        let (n, d) = self
            .val(q)
            .dims2()
            .ok_or_else(|| invalid("segment_attention", "inputs must be 2-D"))?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(mismatch("segment_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(invalid(
                "segment_attention",
                format!("{heads} heads do not divide width {d}"),
            ));
        }
        check_lens("segment_attention", lens, n)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(lens.iter().map(|m| m * m).sum::<usize>() * heads);
        let mut start = 0;
        for &m in lens {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..m {
                    let qi = &qd[(start + i) * d + col..(start + i) * d + col + dh];
                    let row_start = probs.len();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..m {
                        let kj = &kd[(start + j) * d + col..(start + j) * d + col + dh];
                        let s = scale * dot(qi, kj);
                        max = max.max(s);
                        probs.push(s);
                    }
                    let row = &mut probs[row_start..];
                    let mut total = 0.0;
                    for p in row.iter_mut() {
                        *p = (*p - max).exp();
                        total += *p;
                    }
                    for p in row.iter_mut() {
                        *p /= total;
                    }
                    let dst_at = (start + i) * d + col;
                    for j in 0..m {
                        let p = probs[row_start + j];
                        let vj = &vd[(start + j) * d + col..(start + j) * d + col + dh];
                        axpy(p, vj, &mut out[dst_at..dst_at + dh]);
                    }
                }
            }
            start += m;
        }
        let needs = self.needs(&[q.0, k.0, v.0]);
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::SegmentAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                lens: lens.to_vec(),
                probs,
            },
            needs,
            "segment_attention",
        )
    }

    /// Records an externally computed value whose gradient rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        let name = op.name();
        self.push(value, Op::Custom { inputs: ids, op }, needs, name)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients are added to leaf tensors recorded with `requires_grad` and
    /// to parameter gradients in `params`; calling this twice without
    /// zeroing accumulates.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        if !self.val(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            backward_node(nodes, node, i, &g, &mut grads, params, &mut leaf_grads);
        }
        for (i, g) in leaf_grads {
            let buf = self.nodes[i].value.grad_mut();
            for (b, v) in buf.iter_mut().zip(&g) {
                *b += v;
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], idx: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].needs_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    index: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    params: &mut ParamStore,
    leaf_grads: &mut Vec<(usize, Vec<f64>)>,
) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => leaf_grads.push((index, g.to_vec())),
        Op::Param(id) => params.accumulate(*id, g),
        Op::GatherRows { param, rows } => params.accumulate_rows(*param, rows, g),
        Op::MatMul(a, b) => {
            let (m, k) = nodes[*a].value.dims2().unwrap();
            let n = out.shape()[1];
            if let Some(da) = slot(grads, nodes, *a) {
                gemm_nt(m, n, k, g, nodes[*b].value.data(), da);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                gemm_tn(k, m, n, nodes[*a].value.data(), g, db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[*a].value.dims2().unwrap();
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(-1.0, g, db);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                add_into(dx, g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                let d = db.len();
                for row in g.chunks(d) {
                    add_into(db, row);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, gg), bv) in da.iter_mut().zip(g).zip(nodes[*b].value.data()) {
                    *d += gg * bv;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ((d, gg), av) in db.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                    *d += gg * av;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(*c, g, dx);
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, gg), y) in dx.iter_mut().zip(g).zip(out.data()) {
                    *d += gg * (1.0 - y * y);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, gg), xv) in dx.iter_mut().zip(g).zip(nodes[*x].value.data()) {
                    if *xv > 0.0 {
                        *d += gg;
                    }
                }
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let y = out.data();
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let s: f64 = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..*len {
                            dx[at(l)] += y[at(l)] * (g[at(l)] - s);
                        }
                    }
                }
            }
        }
        Op::Concat { parts, outer } => {
            let out_chunk = out.len() / outer;
            let mut offset = 0;
            for p in parts {
                let chunk = nodes[*p].value.len() / outer;
                if let Some(dp) = slot(grads, nodes, *p) {
                    for o in 0..*outer {
                        add_into(
                            &mut dp[o * chunk..(o + 1) * chunk],
                            &g[o * out_chunk + offset..o * out_chunk + offset + chunk],
                        );
                    }
                }
                offset += chunk;
            }
        }
        Op::Slice {
            x,
            outer,
            src_chunk,
            offset,
            width,
        } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for o in 0..*outer {
                    let dst = o * src_chunk + offset;
                    add_into(&mut dx[dst..dst + width], &g[o * width..(o + 1) * width]);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                let c = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += c);
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, gg), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gg * m;
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = inv_std.len().max(1);
            let d = xhat.len() / d;
            let gamma_vals = gamma.map(|gi| nodes[gi].value.data().to_vec());
            if let Some(gi) = gamma {
                if let Some(dg) = slot(grads, nodes, *gi) {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((dd, gg), xh) in dg.iter_mut().zip(grow).zip(xrow) {
                            *dd += gg * xh;
                        }
                    }
                }
            }
            if let Some(bi) = beta {
                if let Some(db) = slot(grads, nodes, *bi) {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, is) in inv_std.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let xrow = &xhat[r * d..(r + 1) * d];
                    for c in 0..d {
                        dxhat[c] = grow[c] * gamma_vals.as_ref().map_or(1.0, |gv| gv[c]);
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dot(&dxhat, xrow) / d as f64;
                    for c in 0..d {
                        dx[r * d + c] += is * (dxhat[c] - mean_d - xrow[c] * mean_dx);
                    }
                }
            }
        }
        Op::WeightedSum { alpha, items } => {
            let (n, l) = nodes[*alpha].value.dims2().unwrap();
            let d = out.shape()[1];
            let a = nodes[*alpha].value.data().to_vec();
            if nodes[*alpha].needs_grad {
                let mut da = vec![0.0; n * l];
                for (j, it) in items.iter().enumerate() {
                    let src = nodes[*it].value.data();
                    for i in 0..n {
                        da[i * l + j] = dot(&g[i * d..(i + 1) * d], &src[i * d..(i + 1) * d]);
                    }
                }
                add_into(slot(grads, nodes, *alpha).unwrap(), &da);
            }
            for (j, it) in items.iter().enumerate() {
                if let Some(di) = slot(grads, nodes, *it) {
                    for i in 0..n {
                        axpy(a[i * l + j], &g[i * d..(i + 1) * d], &mut di[i * d..(i + 1) * d]);
                    }
                }
            }
        }
        Op::SegmentMean { x, lens } => {
            let d = out.shape()[1];
            if let Some(dx) = slot(grads, nodes, *x) {
                let mut start = 0;
                for (s, &len) in lens.iter().enumerate() {
                    for r in start..start + len {
                        axpy(1.0 / len as f64, &g[s * d..(s + 1) * d], &mut dx[r * d..(r + 1) * d]);
                    }
                    start += len;
                }
            }
        }
        Op::SegmentAttention {
            q,
            k,
            v,
            heads,
            lens,
            probs,
        } => {
            let d = out.shape()[1];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (nodes[*q].value.data(), nodes[*k].value.data(), nodes[*v].value.data());
            let n = out.shape()[0];
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut start = 0;
            let mut p_at = 0;
            let mut dp = Vec::new();
            for &m in lens {
                for h in 0..*heads {
                    let col = h * dh;
                    let row = |r: usize| (start + r) * d + col..(start + r) * d + col + dh;
                    let p = &probs[p_at..p_at + m * m];
                    for i in 0..m {
                        let gi = &g[row(i)];
                        dp.clear();
                        for j in 0..m {
                            dp.push(dot(gi, &vd[row(j)]));
                            axpy(p[i * m + j], gi, &mut dv[row(j)]);
                        }
                        let s: f64 = (0..m).map(|j| p[i * m + j] * dp[j]).sum();
                        for j in 0..m {
                            let ds = p[i * m + j] * (dp[j] - s) * scale;
                            axpy(ds, &kd[row(j)], &mut dq[row(i)]);
                            axpy(ds, &qd[row(i)], &mut dk[row(j)]);
                        }
                    }
                    p_at += m * m;
                }
                start += m;
            }
            for (idx, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(dst) = slot(grads, nodes, idx) {
                    add_into(dst, &buf);
                }
            }
        }
        Op::Custom { inputs, op } => {
            let input_vals: Vec<&Tensor> = inputs.iter().map(|i| &nodes[*i].value).collect();
            let local = op.backward(&input_vals, out, g);
            for (idx, lg) in inputs.iter().zip(local) {
                if let (Some(lg), Some(dst)) = (lg, slot(grads, nodes, *idx)) {
                    add_into(dst, &lg);
                }
            }
        }
    }
}

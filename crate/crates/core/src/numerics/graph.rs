//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape from the loss towards the inputs. The graph also acts as
//! the FLOP accounting context: each forward op adds its cost to
//! [`Graph::flops`].

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// FLOPs charged per output entry by the cheap elementwise kernels.
pub mod flop_cost {
    pub const ELEMENTWISE: u64 = 1;
    pub const SOFTMAX: u64 = 4;
    pub const LAYER_NORM: u64 = 8;
    pub const CROSS_ENTROPY: u64 = 4;
}

/// One surviving (token, selection) contribution read by [`Graph::combine`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CombineRoute {
    /// Column of the weight matrix holding this selection's gate weight.
    pub column: usize,
    pub expert: usize,
    pub slot: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    NormalizeRows(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        src: Var,
        rows: Vec<Option<usize>>,
    },
    GatherCols {
        src: Var,
        picks: Vec<Vec<usize>>,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Combine {
        outputs: Vec<Var>,
        weights: Var,
        residual: Var,
        routes: Vec<Vec<CombineRoute>>,
    },
    DotConst {
        x: Var,
        coeffs: Vec<f64>,
    },
    SumAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherCols { .. } => "gather_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Combine { .. } => "combine",
            Op::DotConst { .. } => "dot_const",
            Op::SumAll(_) => "sum_all",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape plus FLOP counter for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    flops: u64,
    discrete: Option<DefaultHasher>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the `grad` slots of `store`.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        let mut ids: Vec<_> = graph.params.iter().collect();
        ids.sort();
        for (&pid, &var) in ids {
            if let Some(g) = self.of(var) {
                let dst = store.get_mut(pid).value.grad_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, s: usize, t: usize) {
    for i in 0..r {
        let out_row = &mut out[i * t..(i + 1) * t];
        for k in 0..s {
            let aik = a[i * s + k];
            let b_row = &b[k * t..(k + 1) * t];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records discrete decisions (routing choices, relu sign patterns) into a
    /// signature so finite-difference probes can detect selection flips.
    pub fn track_discrete(&mut self, on: bool) {
        self.discrete = on.then(DefaultHasher::new);
    }

    pub fn discrete_signature(&self) -> Option<u64> {
        self.discrete.as_ref().map(|h| h.finish())
    }

    pub fn record_discrete(&mut self, items: &[usize]) {
        if let Some(h) = &mut self.discrete {
            h.write_usize(items.len());
            for &i in items {
                h.write_usize(i);
            }
        }
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn add_flops(&mut self, n: u64) {
        self.flops += n;
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input)
    }

    /// Leaf node bound to a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let value = store.value(id);
        let t = Tensor::with_shape_unchecked(value.shape().to_vec(), value.data().to_vec());
        let v = self.push(t, Op::Param)?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `a [r×s] · b [s×t]`, charging `2·r·s·t` FLOPs.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = self.matrix_dims(a, "matmul")?;
        let (s2, t) = self.matrix_dims(b, "matmul")?;
        if s != s2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; r * t];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, r, s, t);
        self.flops += 2 * (r * s * t) as u64;
        self.push(Tensor::with_shape_unchecked(vec![r, t], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::with_shape_unchecked(vec![c, r], out), Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::with_shape_unchecked(va.shape().to_vec(), data);
        self.flops += flop_cost::ELEMENTWISE * t.numel() as u64;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[c]` vector to every row of an `[r×c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims(a, "add_row")?;
        if self.shape(row) != [c] {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let bias = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let t = Tensor::with_shape_unchecked(self.shape(a).to_vec(), data);
        self.flops += flop_cost::ELEMENTWISE * t.numel() as u64;
        self.push(t, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let t = Tensor::with_shape_unchecked(va.shape().to_vec(), data);
        self.flops += flop_cost::ELEMENTWISE * t.numel() as u64;
        self.push(t, Op::Scale(a, s))
    }

    /// Divides each row of a positive matrix by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims(a, "normalize_rows")?;
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.numel());
        for row in va.data().chunks(c) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(Error::Evaluation("normalize_rows on a row with non-positive sum".into()));
            }
            data.extend(row.iter().map(|v| v / s));
        }
        let t = Tensor::with_shape_unchecked(va.shape().to_vec(), data);
        self.flops += 2 * flop_cost::ELEMENTWISE * t.numel() as u64;
        self.push(t, Op::NormalizeRows(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::with_shape_unchecked(va.shape().to_vec(), data);
        if self.discrete.is_some() {
            let pattern: Vec<usize> = self.value(a).data().iter().map(|&x| usize::from(x > 0.0)).collect();
            self.record_discrete(&pattern);
        }
        self.flops += flop_cost::ELEMENTWISE * t.numel() as u64;
        self.push(t, Op::Relu(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let out = softmax_along(self.value(x).data(), &shape, axis);
        self.flops += flop_cost::SOFTMAX * out.len() as u64;
        self.push(Tensor::with_shape_unchecked(shape, out), Op::Softmax { x, axis })
    }

    /// Row-wise softmax of a square score matrix where row `i` only attends to
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "causal_softmax")?;
        if r != c {
            return Err(Error::dim("causal_softmax", self.shape(x), &[r, r]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..i * c + i + 1];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..i * c + i + 1];
            let mut z = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        self.flops += flop_cost::SOFTMAX * (r * (r + 1) / 2) as u64;
        self.push(Tensor::with_shape_unchecked(vec![r, c], out), Op::CausalSoftmax(x))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        self.flops += flop_cost::LAYER_NORM * out.len() as u64;
        self.push(
            Tensor::with_shape_unchecked(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Mean token cross-entropy of `[T×V]` logits against target indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::dim("cross_entropy", &[t, v], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Input(format!(
                "target index {bad} outside vocabulary of size {v}"
            )));
        }
        let probs = softmax_along(self.value(logits).data(), &[t, v], 1);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * v + y].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / t as f64;
        self.flops += flop_cost::CROSS_ENTROPY * (t * v) as u64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Picks rows of a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, src: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let (r, c) = self.matrix_dims(src, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::Input("gather_rows needs at least one row".into()));
        }
        let s = self.value(src);
        let mut out = vec![0.0; rows.len() * c];
        for (i, row) in rows.iter().enumerate() {
            if let Some(j) = *row {
                if j >= r {
                    return Err(Error::Input(format!("row index {j} out of range {r}")));
                }
                out[i * c..(i + 1) * c].copy_from_slice(s.row(j));
            }
        }
        let t = Tensor::with_shape_unchecked(vec![rows.len(), c], out);
        self.push(t, Op::GatherRows { src, rows })
    }

    /// Picks, for every row `i`, the columns `picks[i]` (all of equal length).
    pub fn gather_cols(&mut self, src: Var, picks: Vec<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.matrix_dims(src, "gather_cols")?;
        let k = picks.first().map_or(0, Vec::len);
        if picks.len() != r || k == 0 || picks.iter().any(|p| p.len() != k || p.iter().any(|&j| j >= c)) {
            return Err(Error::Input("gather_cols picks do not fit the source matrix".into()));
        }
        let s = self.value(src);
        let out = picks
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.iter().map(move |&j| s.at(i, j)))
            .collect();
        self.push(Tensor::with_shape_unchecked(vec![r, k], out), Op::GatherCols { src, picks })
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(src, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, len]));
        }
        let data = self.value(src).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::with_shape_unchecked(vec![len, c], data), Op::SliceRows { src, start })
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(src, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, len]));
        }
        let s = self.value(src);
        let data = (0..r).flat_map(|i| s.row(i)[start..start + len].iter().copied()).collect();
        self.push(Tensor::with_shape_unchecked(vec![r, len], data), Op::SliceCols { src, start })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let (r, c2) = self.matrix_dims(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        self.push(Tensor::with_shape_unchecked(vec![rows, c], data), Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in &parts {
            let (r2, c) = self.matrix_dims(p, "concat_cols")?;
            if r2 != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in &parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::with_shape_unchecked(vec![r, total], data), Op::ConcatCols(parts))
    }

    /// Weighted gather of expert outputs back to token order.
    ///
    /// Row `t` of the result is `Σ weights[t, col] · outputs[expert][slot]`
    /// over `routes[t]`, summed in ascending expert index. A token with no
    /// routes copies `residual[t]` unchanged.
    pub fn combine(
        &mut self,
        outputs: Vec<Var>,
        weights: Var,
        residual: Var,
        mut routes: Vec<Vec<CombineRoute>>,
    ) -> Result<Var> {
        let (t, m) = self.matrix_dims(residual, "combine")?;
        let (wt, wk) = self.matrix_dims(weights, "combine")?;
        if routes.len() != t || wt != t {
            return Err(Error::dim("combine", &[t, m], &[wt, wk]));
        }
        for &o in &outputs {
            let (_, om) = self.matrix_dims(o, "combine")?;
            if om != m {
                return Err(Error::dim("combine", &[t, m], self.shape(o)));
            }
        }
        for rs in &mut routes {
            rs.sort_by_key(|r| (r.expert, r.column));
            for r in rs.iter() {
                if r.column >= wk || r.expert >= outputs.len() || r.slot >= self.shape(outputs[r.expert])[0] {
                    return Err(Error::Input(format!("combine route {r:?} out of range")));
                }
            }
        }
        let w = self.value(weights);
        let res = self.value(residual);
        let mut out = vec![0.0; t * m];
        let mut flops = 0u64;
        for (i, rs) in routes.iter().enumerate() {
            let dst = &mut out[i * m..(i + 1) * m];
            match rs.split_first() {
                None => dst.copy_from_slice(res.row(i)),
                Some((head, tail)) => {
                    let wv = w.at(i, head.column);
                    let src = self.nodes[outputs[head.expert].0].value.row(head.slot);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = wv * s;
                    }
                    for r in tail {
                        let wv = w.at(i, r.column);
                        let src = self.nodes[outputs[r.expert].0].value.row(r.slot);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                    flops += 2 * (rs.len() * m) as u64;
                }
            }
        }
        self.flops += flops;
        self.push(
            Tensor::with_shape_unchecked(vec![t, m], out),
            Op::Combine {
                outputs,
                weights,
                residual,
                routes,
            },
        )
    }

    /// Scalar `Σ x[i]·coeffs[i]` with constant coefficients.
    pub fn dot_const(&mut self, x: Var, coeffs: Vec<f64>) -> Result<Var> {
        if coeffs.len() != self.value(x).numel() {
            return Err(Error::dim("dot_const", self.shape(x), &[coeffs.len()]));
        }
        let v = self.value(x).data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        self.flops += 2 * coeffs.len() as u64;
        self.push(Tensor::scalar(v), Op::DotConst { x, coeffs })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data().iter().sum();
        self.flops += self.value(x).numel() as u64;
        self.push(Tensor::scalar(v), Op::SumAll(x))
    }

    /// Reverse pass from a single-entry `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backward_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, s, t) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let (ad, bd) = (va.data(), vb.data());
                let da = self.slot(grads, *a);
                for ii in 0..r {
                    for k in 0..s {
                        let mut sum = 0.0;
                        for j in 0..t {
                            sum += dy[ii * t + j] * bd[k * t + j];
                        }
                        da[ii * s + k] += sum;
                    }
                }
                let db = self.slot(grads, *b);
                for ii in 0..r {
                    for k in 0..s {
                        let aik = ad[ii * s + k];
                        let row = &mut db[k * t..(k + 1) * t];
                        for (d, g) in row.iter_mut().zip(&dy[ii * t..(ii + 1) * t]) {
                            *d += aik * g;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let da = self.slot(grads, *a);
                for ii in 0..r {
                    for j in 0..c {
                        da[ii * c + j] += dy[j * r + ii];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.slot(grads, *a), dy);
                add_into(self.slot(grads, *b), dy);
            }
            Op::Sub(a, b) => {
                add_into(self.slot(grads, *a), dy);
                for (d, g) in self.slot(grads, *b).iter_mut().zip(dy) {
                    *d -= g;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                for ((d, g), y) in self.slot(grads, *a).iter_mut().zip(dy).zip(vb) {
                    *d += g * y;
                }
                for ((d, g), x) in self.slot(grads, *b).iter_mut().zip(dy).zip(va) {
                    *d += g * x;
                }
            }
            Op::AddRow(a, row) => {
                add_into(self.slot(grads, *a), dy);
                let c = self.value(*row).numel();
                let dr = self.slot(grads, *row);
                for chunk in dy.chunks(c) {
                    add_into(dr, chunk);
                }
            }
            Op::Scale(a, s) => {
                for (d, g) in self.slot(grads, *a).iter_mut().zip(dy) {
                    *d += g * s;
                }
            }
            Op::NormalizeRows(a) => {
                let c = node.value.cols();
                let y = node.value.data();
                let x = self.value(*a).data();
                let da = self.slot(grads, *a);
                for r in 0..y.len() / c {
                    let span = r * c..(r + 1) * c;
                    let sum: f64 = x[span.clone()].iter().sum();
                    let dot: f64 = y[span.clone()].iter().zip(&dy[span.clone()]).map(|(p, q)| p * q).sum();
                    for j in span {
                        da[j] += (dy[j] - dot) / sum;
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                for ((d, g), &xv) in self.slot(grads, *a).iter_mut().zip(dy).zip(x) {
                    if xv > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x);
                let y = node.value.data();
                let (outer, len, inner) = axis_split(shape, *axis);
                let dx = self.slot(grads, *x);
                for o in 0..outer {
                    for inn in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + inn;
                        let dot: f64 = (0..len).map(|a| y[idx(a)] * dy[idx(a)]).sum();
                        for a in 0..len {
                            dx[idx(a)] += y[idx(a)] * (dy[idx(a)] - dot);
                        }
                    }
                }
            }
            Op::CausalSoftmax(x) => {
                let c = self.shape(*x)[1];
                let y = node.value.data();
                let dx = self.slot(grads, *x);
                for r in 0..c {
                    let span = r * c..r * c + r + 1;
                    let dot: f64 = y[span.clone()].iter().zip(&dy[span.clone()]).map(|(a, b)| a * b).sum();
                    for j in span {
                        dx[j] += y[j] * (dy[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*gain).numel();
                let g = self.value(*gain).data();
                let rows = xhat.len() / c;
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx_all = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let span = r * c..(r + 1) * c;
                    let (h, d) = (&xhat[span.clone()], &dy[span.clone()]);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        dgain[j] += d[j] * h[j];
                        dbias[j] += d[j];
                        let dh = d[j] * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = d[j] * g[j];
                        dx_all[r * c + j] = rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                add_into(self.slot(grads, *x), &dx_all);
                add_into(self.slot(grads, *gain), &dgain);
                add_into(self.slot(grads, *bias), &dbias);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let t = targets.len();
                let v = probs.len() / t;
                let scale = dy[0] / t as f64;
                let dl = self.slot(grads, *logits);
                for (r, &y) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        dl[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                let c = self.value(*src).cols();
                let ds = self.slot(grads, *src);
                for (i, row) in rows.iter().enumerate() {
                    if let Some(j) = *row {
                        add_into(&mut ds[j * c..(j + 1) * c], &dy[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::GatherCols { src, picks } => {
                let c = self.value(*src).cols();
                let k = picks[0].len();
                let ds = self.slot(grads, *src);
                for (i, p) in picks.iter().enumerate() {
                    for (n, &j) in p.iter().enumerate() {
                        ds[i * c + j] += dy[i * k + n];
                    }
                }
            }
            Op::SliceRows { src, start } => {
                let c = self.value(*src).cols();
                let ds = self.slot(grads, *src);
                add_into(&mut ds[start * c..start * c + dy.len()], dy);
            }
            Op::SliceCols { src, start } => {
                let c = self.value(*src).cols();
                let len = node.value.cols();
                let ds = self.slot(grads, *src);
                for (r, chunk) in dy.chunks(len).enumerate() {
                    add_into(&mut ds[r * c + start..r * c + start + len], chunk);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    add_into(self.slot(grads, p), &dy[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let dp = self.slot(grads, p);
                    for (r, chunk) in dp.chunks_mut(w).enumerate() {
                        add_into(chunk, &dy[r * total + col..r * total + col + w]);
                    }
                    col += w;
                }
            }
            Op::Combine {
                outputs,
                weights,
                residual,
                routes,
            } => {
                let m = node.value.cols();
                let wk = self.value(*weights).cols();
                let w = self.value(*weights);
                let mut dw = vec![0.0; w.numel()];
                for (t, rs) in routes.iter().enumerate() {
                    let g = &dy[t * m..(t + 1) * m];
                    if rs.is_empty() {
                        add_into(&mut self.slot(grads, *residual)[t * m..(t + 1) * m], g);
                        continue;
                    }
                    for r in rs {
                        let o = outputs[r.expert];
                        let orow = self.value(o).row(r.slot);
                        dw[t * wk + r.column] += orow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        let wv = w.at(t, r.column);
                        let dst = &mut self.slot(grads, o)[r.slot * m..(r.slot + 1) * m];
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                }
                add_into(self.slot(grads, *weights), &dw);
            }
            Op::DotConst { x, coeffs } => {
                for (d, c) in self.slot(grads, *x).iter_mut().zip(coeffs) {
                    *d += dy[0] * c;
                }
            }
            Op::SumAll(x) => {
                for d in self.slot(grads, *x).iter_mut() {
                    *d += dy[0];
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax of a row-major buffer along `axis` with max subtraction.
pub fn softmax_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + inn;
            let m = (0..len).map(|a| data[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..len {
                let e = (data[idx(a)] - m).exp();
                out[idx(a)] = e;
                z += e;
            }
            for a in 0..len {
                out[idx(a)] /= z;
            }
        }
    }
    out
}

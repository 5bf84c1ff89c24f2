//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar (1x1) node walks the tape in reverse and
//! returns gradients for every parameter that contributed to it.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Contiguous row range forming one attention graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    MinElem(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    GroupMax {
        x: Var,
        argmax: Array2<usize>,
    },
    SubgraphBlock {
        x: Var,
        w: Var,
        b: Var,
        gain: Var,
        beta: Var,
        group: usize,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
        argmax: Vec<usize>,
    },
    RepeatRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    RowSum(Var),
    Mean(Var),
    DiscProject(Var, f64),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Vec<Block>,
        weights: Vec<Array2<f64>>,
        scale: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to parameters, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (i, g) in other.params.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.params[i] {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    detach_params: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// While set, [`Tape::param`] returns constants: the parameter values are
    /// used but receive no gradient.
    pub fn set_detach_params(&mut self, detach: bool) {
        self.detach_params = detach;
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.detach_params {
            return self.constant(store.value(id).clone());
        }
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `x W + b` with the 1-row `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut value = self.value(x).dot(self.value(w));
        value += self.value(b);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(value, Op::Affine(x, w, b), ng)
    }

    /// `x + bias`, with the 1-row `bias` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddRow(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Hard clamp; the gradient is zero where the input is outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        Zip::from(&mut value).and(self.value(b)).for_each(|x, &y| *x = x.min(y));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MinElem(a, b), ng)
    }

    /// Per-row layer normalization with learned gain and bias (both 1 x d).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let value = &(&xhat * self.value(gain)) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        assert!(
            group > 0 && n % group == 0,
            "group_max: {n} rows not divisible by {group}"
        );
        let groups = n / group;
        let mut value = Array2::zeros((groups, d));
        let mut argmax = Array2::zeros((groups, d));
        for g in 0..groups {
            for c in 0..d {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if xv[[r, c]] > xv[[best, c]] {
                        best = r;
                    }
                }
                value[[g, c]] = xv[[best, c]];
                argmax[[g, c]] = best;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::GroupMax { x, argmax }, ng)
    }

    /// Fused subgraph layer: `e = relu(layer_norm(x W + b))`, then every row is
    /// `[e, max of e over its group of rows]`. Equivalent to the composition of
    /// `affine`, `layer_norm`, `relu`, `group_max`, `repeat_rows` and `concat_cols`.
    #[allow(clippy::too_many_arguments)]
    pub fn subgraph_block(&mut self, x: Var, w: Var, b: Var, gain: Var, beta: Var, eps: f64, group: usize) -> Var {
        let mut xhat = self.value(x).dot(self.value(w));
        let (n, h) = xhat.dim();
        assert!(
            group > 0 && n % group == 0,
            "subgraph_block: {n} rows not divisible by {group}"
        );
        let bv = self
            .value(b)
            .as_standard_layout()
            .into_owned()
            .into_raw_vec_and_offset()
            .0;
        let gv = self
            .value(gain)
            .as_standard_layout()
            .into_owned()
            .into_raw_vec_and_offset()
            .0;
        let betav = self
            .value(beta)
            .as_standard_layout()
            .into_owned()
            .into_raw_vec_and_offset()
            .0;
        let mut value = Array2::<f64>::zeros((n, 2 * h));
        let mut inv_std = Vec::with_capacity(n);
        let groups = n / group;
        let mut argmax = vec![0usize; groups * h];
        {
            let xs = xhat.as_slice_mut().expect("fresh matmul output is contiguous");
            let out = value.as_slice_mut().expect("contiguous");
            for r in 0..n {
                let row = &mut xs[r * h..(r + 1) * h];
                for (v, bb) in row.iter_mut().zip(&bv) {
                    *v += bb;
                }
                let mean = row.iter().sum::<f64>() / h as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                let orow = &mut out[r * 2 * h..r * 2 * h + h];
                for c in 0..h {
                    row[c] = (row[c] - mean) * is;
                    orow[c] = (row[c] * gv[c] + betav[c]).max(0.0);
                }
            }
            for gi in 0..groups {
                for c in 0..h {
                    let mut best = gi * group;
                    for r in gi * group + 1..(gi + 1) * group {
                        if out[r * 2 * h + c] > out[best * 2 * h + c] {
                            best = r;
                        }
                    }
                    argmax[gi * h + c] = best;
                    let m = out[best * 2 * h + c];
                    for r in gi * group..(gi + 1) * group {
                        out[r * 2 * h + h + c] = m;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b) || self.ng(gain) || self.ng(beta);
        self.push(
            value,
            Op::SubgraphBlock {
                x,
                w,
                b,
                gain,
                beta,
                group,
                xhat,
                inv_std,
                argmax,
            },
            ng,
        )
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut value = Array2::zeros((n * times, d));
        for (r, row) in xv.outer_iter().enumerate() {
            for k in 0..times {
                value.row_mut(r * times + k).assign(&row);
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::RepeatRows(x, times), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::SliceCols(x, start), ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        let ng = self.ng(x);
        self.push(value, Op::SelectRows(x, rows.to_vec()), ng)
    }

    /// Sum of each row, as an n x 1 column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(x);
        self.push(value, Op::RowSum(x), ng)
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        let ng = self.ng(x);
        self.push(value, Op::Mean(x), ng)
    }

    /// Projects each row onto the Euclidean ball of the given radius.
    pub fn disc_project(&mut self, x: Var, radius: f64) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > radius {
                row *= radius / n;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::DiscProject(x, radius), ng)
    }

    /// Scaled dot-product self-attention inside each block of rows:
    /// `softmax(Q K^T / sqrt(d)) V`, with the softmax taken per row.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, blocks: &[Block]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), vv.ncols()));
        let mut weights = Vec::with_capacity(blocks.len());
        for b in blocks {
            let rows = b.start..b.start + b.len;
            let qb = qv.slice(s![rows.clone(), ..]);
            let kb = kv.slice(s![rows.clone(), ..]);
            let vb = vv.slice(s![rows.clone(), ..]);
            let mut scores = qb.dot(&kb.t()) * scale;
            softmax_rows(&mut scores);
            out.slice_mut(s![rows, ..]).assign(&scores.dot(&vb));
            weights.push(scores);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                blocks: blocks.to_vec(),
                weights,
                scale,
            },
            ng,
        )
    }

    /// Row-stochastic attention matrices recorded by a `block_attention` node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Gradients of the 1x1 node `loss` with respect to all parameters on the tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut param_grads: Vec<Option<Array2<f64>>> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if param_grads.len() <= id.0 {
                        param_grads.resize(id.0 + 1, None);
                    }
                    param_grads[id.0] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Affine(x, w, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*w) {
                        acc(&mut grads, *w, self.value(*x).t().dot(&g));
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g.dot(&self.value(*w).t()));
                    }
                }
                Op::SubgraphBlock {
                    x,
                    w,
                    b,
                    gain,
                    beta,
                    group,
                    xhat,
                    inv_std,
                    argmax,
                } => {
                    let (n, h) = xhat.dim();
                    let g = g.as_standard_layout();
                    let gs = g.as_slice().expect("contiguous");
                    let out = node.value.as_slice().expect("contiguous");
                    let mut gz = Array2::<f64>::zeros((n, h));
                    let gzs = gz.as_slice_mut().expect("contiguous");
                    for r in 0..n {
                        gzs[r * h..(r + 1) * h].copy_from_slice(&gs[r * 2 * h..r * 2 * h + h]);
                    }
                    for gi in 0..n / group {
                        for c in 0..h {
                            let pooled: f64 = (gi * group..(gi + 1) * group).map(|r| gs[r * 2 * h + h + c]).sum();
                            gzs[argmax[gi * h + c] * h + c] += pooled;
                        }
                    }
                    for r in 0..n {
                        for c in 0..h {
                            if out[r * 2 * h + c] <= 0.0 {
                                gzs[r * h + c] = 0.0;
                            }
                        }
                    }
                    if self.ng(*beta) {
                        acc(&mut grads, *beta, gz.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*gain) {
                        acc(&mut grads, *gain, (&gz * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    let gv = self
                        .value(*gain)
                        .as_standard_layout()
                        .into_owned()
                        .into_raw_vec_and_offset()
                        .0;
                    let xs = xhat.as_slice().expect("contiguous");
                    let gzs = gz.as_slice_mut().expect("contiguous");
                    let d = h as f64;
                    for r in 0..n {
                        let row = &mut gzs[r * h..(r + 1) * h];
                        let xr = &xs[r * h..(r + 1) * h];
                        for (v, gg) in row.iter_mut().zip(&gv) {
                            *v *= gg;
                        }
                        let sum_d: f64 = row.iter().sum();
                        let sum_dx: f64 = row.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let is = inv_std[r];
                        for c in 0..h {
                            row[c] = is / d * (d * row[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, gz.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*w) {
                        acc(&mut grads, *w, self.value(*x).t().dot(&gz));
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, gz.dot(&self.value(*w).t()));
                    }
                }
                Op::AddRow(x, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, -&g);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| *g *= 2.0 * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        if x < *lo || x > *hi {
                            *g = 0.0;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::MinElem(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(av)
                        .and(bv)
                        .for_each(|ga, gb, &x, &y| {
                            if x <= y {
                                *gb = 0.0;
                            } else {
                                *ga = 0.0;
                            }
                        });
                    if self.ng(*a) {
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*bias) {
                        acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*gain) {
                        acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gain);
                        let d = xhat.ncols() as f64;
                        let mut gx = Array2::zeros(xhat.dim());
                        for r in 0..xhat.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let is = inv_std[r];
                            for c in 0..xhat.ncols() {
                                gx[[r, c]] = is / d * (d * dr[c] - sum_d - xr[c] * sum_dx);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::GroupMax { x, argmax, .. } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for ((gi, c), &r) in argmax.indexed_iter() {
                        gx[[r, c]] += g[[gi, c]];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RepeatRows(x, times) => {
                    let (n, d) = self.value(*x).dim();
                    let gx = g
                        .into_shape_with_order((n, *times, d))
                        .expect("repeat_rows grad shape")
                        .sum_axis(Axis(1));
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    let w = g.ncols();
                    gx.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SelectRows(x, rows) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RowSum(x) => {
                    let d = self.value(*x).ncols();
                    let gx = g.broadcast((g.nrows(), d)).expect("row_sum broadcast").to_owned();
                    acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gx = Array2::from_elem(xv.dim(), g[[0, 0]] / xv.len() as f64);
                    acc(&mut grads, *x, gx);
                }
                Op::DiscProject(x, radius) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (mut grow, xrow) in gx.outer_iter_mut().zip(xv.outer_iter()) {
                        let n = xrow.dot(&xrow).sqrt();
                        if n > *radius {
                            let proj = grow.dot(&xrow) / (n * n);
                            let f = radius / n;
                            Zip::from(&mut grow)
                                .and(&xrow)
                                .for_each(|g, &x| *g = f * (*g - x * proj));
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    blocks,
                    weights,
                    scale,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    for (b, a) in blocks.iter().zip(weights) {
                        let rows = b.start..b.start + b.len;
                        let go = g.slice(s![rows.clone(), ..]);
                        let vb = vv.slice(s![rows.clone(), ..]);
                        gv.slice_mut(s![rows.clone(), ..]).assign(&a.t().dot(&go));
                        let ga = go.dot(&vb.t());
                        let mut gs = a * &ga;
                        for (mut srow, arow) in gs.outer_iter_mut().zip(a.outer_iter()) {
                            let dot = srow.sum();
                            Zip::from(&mut srow).and(&arow).for_each(|s, &p| *s -= p * dot);
                        }
                        gs *= *scale;
                        let qb = qv.slice(s![rows.clone(), ..]);
                        let kb = kv.slice(s![rows.clone(), ..]);
                        gq.slice_mut(s![rows.clone(), ..]).assign(&gs.dot(&kb));
                        gk.slice_mut(s![rows, ..]).assign(&gs.t().dot(&qb));
                    }
                    if self.ng(*q) {
                        acc(&mut grads, *q, gq);
                    }
                    if self.ng(*k) {
                        acc(&mut grads, *k, gk);
                    }
                    if self.ng(*v) {
                        acc(&mut grads, *v, gv);
                    }
                }
            }
        }
        Gradients { params: param_grads }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(param) for every scalar of `id`.
    fn check_param_grad(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&mut Tape, &ParamStore) -> Var) {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        let grads = tape.backward(loss);
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(store.value(id).dim()));
        let h = 1e-6;
        for idx in 0..store.value(id).len() {
            let orig = store.value(id).as_slice().unwrap()[idx];
            store.value_mut(id).as_slice_mut().unwrap()[idx] = orig + h;
            let mut t = Tape::new();
            let l = f(&mut t, store);
            let up = t.scalar(l);
            store.value_mut(id).as_slice_mut().unwrap()[idx] = orig - h;
            let mut t = Tape::new();
            let l = f(&mut t, store);
            let down = t.scalar(l);
            store.value_mut(id).as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / (1e-8 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-5 || (a - numeric).abs() < 1e-9,
                "{} [{idx}]: analytic {a} numeric {numeric}",
                store.name(id)
            );
        }
    }

    fn store_with(shapes: &[(&str, (usize, usize))]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, sh) in shapes {
            s.add(*n, *sh, Init::Uniform(1.0));
        }
        s.init_default(&mut ChaCha8Rng::seed_from_u64(9));
        s
    }

    #[test]
    fn elementwise_ops_grad() {
        let mut store = store_with(&[("a", (3, 4)), ("b", (3, 4))]);
        let f = |t: &mut Tape, s: &ParamStore| {
            let a = t.param(s, ParamId(0));
            let b = t.param(s, ParamId(1));
            let x = t.mul(a, b);
            let y = t.tanh(x);
            let z = t.softplus(a);
            let w = t.sub(y, z);
            let e = t.exp(b);
            let m = t.min_elem(w, e);
            let c = t.clamp(m, -0.8, 2.0);
            let q = t.square(c);
            let r = t.add_scalar(q, 0.3);
            let r = t.scale(r, 1.7);
            let rs = t.row_sum(r);
            t.mean(rs)
        };
        check_param_grad(&mut store, ParamId(0), &f);
        check_param_grad(&mut store, ParamId(1), &f);
    }

    #[test]
    fn structural_ops_grad() {
        let mut store = store_with(&[("x", (6, 3)), ("w", (3, 5)), ("b", (1, 5))]);
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let w = t.param(s, ParamId(1));
            let b = t.param(s, ParamId(2));
            let h = t.matmul(x, w);
            let h = t.add_row(h, b);
            let g = t.group_max(h, 3);
            let r = t.repeat_rows(g, 3);
            let c = t.concat_cols(&[h, r]);
            let sl = t.slice_cols(c, 2, 6);
            let sel = t.select_rows(sl, &[0, 4, 4, 5]);
            let rl = t.relu(sel);
            let sq = t.square(rl);
            t.mean(sq)
        };
        for i in 0..3 {
            check_param_grad(&mut store, ParamId(i), &f);
        }
    }

    fn fused_case(fused: bool) -> impl Fn(&mut Tape, &ParamStore) -> Var {
        move |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let w = t.param(s, ParamId(1));
            let b = t.param(s, ParamId(2));
            let g = t.param(s, ParamId(3));
            let be = t.param(s, ParamId(4));
            let tg = t.param(s, ParamId(5));
            let y = if fused {
                t.subgraph_block(x, w, b, g, be, 1e-5, 3)
            } else {
                let h = t.affine(x, w, b);
                let h = t.layer_norm(h, g, be, 1e-5);
                let e = t.relu(h);
                let p = t.group_max(e, 3);
                let p = t.repeat_rows(p, 3);
                t.concat_cols(&[e, p])
            };
            let y = t.mul(y, tg);
            let y = t.tanh(y);
            t.mean(y)
        }
    }

    #[test]
    fn fused_subgraph_block_matches_composition() {
        let mut store = store_with(&[
            ("x", (6, 4)),
            ("w", (4, 5)),
            ("b", (1, 5)),
            ("g", (1, 5)),
            ("be", (1, 5)),
            ("t", (6, 10)),
        ]);
        let (mut a, mut b) = (Tape::new(), Tape::new());
        let la = fused_case(true)(&mut a, &store);
        let lb = fused_case(false)(&mut b, &store);
        assert!((a.scalar(la) - b.scalar(lb)).abs() < 1e-14);
        let (ga, gb) = (a.backward(la), b.backward(lb));
        for i in 0..5 {
            let d = ga.get(ParamId(i)).unwrap() - gb.get(ParamId(i)).unwrap();
            assert!(d.iter().all(|v| v.abs() < 1e-13));
        }
        for i in 0..5 {
            check_param_grad(&mut store, ParamId(i), &fused_case(true));
        }
    }

    #[test]
    fn layer_norm_grad() {
        let mut store = store_with(&[("x", (4, 6)), ("g", (1, 6)), ("b", (1, 6)), ("t", (4, 6))]);
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let g = t.param(s, ParamId(1));
            let b = t.param(s, ParamId(2));
            let target = t.param(s, ParamId(3));
            let y = t.layer_norm(x, g, b, 1e-5);
            let y = t.mul(y, target);
            let y = t.tanh(y);
            t.mean(y)
        };
        for i in 0..3 {
            check_param_grad(&mut store, ParamId(i), &f);
        }
    }

    #[test]
    fn attention_grad_and_rows_stochastic() {
        let mut store = store_with(&[("q", (5, 4)), ("k", (5, 4)), ("v", (5, 3)), ("t", (5, 3))]);
        let blocks = [Block { start: 0, len: 2 }, Block { start: 2, len: 3 }];
        let f = move |t: &mut Tape, s: &ParamStore| {
            let q = t.param(s, ParamId(0));
            let k = t.param(s, ParamId(1));
            let v = t.param(s, ParamId(2));
            let tg = t.param(s, ParamId(3));
            let o = t.block_attention(q, k, v, &blocks);
            let o = t.mul(o, tg);
            let o = t.square(o);
            t.mean(o)
        };
        for i in 0..3 {
            check_param_grad(&mut store, ParamId(i), &f);
        }
        let mut tape = Tape::new();
        let q = tape.param(&store, ParamId(0));
        let k = tape.param(&store, ParamId(1));
        let v = tape.param(&store, ParamId(2));
        let o = tape.block_attention(q, k, v, &blocks);
        for w in tape.attention_weights(o).unwrap() {
            for row in w.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disc_projection_grad() {
        let mut store = store_with(&[("x", (4, 2))]);
        store.value_mut(ParamId(0)).mapv_inplace(|v| v * 0.5);
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, ParamId(0));
            let p = t.disc_project(x, 0.25);
            let p = t.scale(p, 3.0);
            let e = t.exp(p);
            t.mean(e)
        };
        check_param_grad(&mut store, ParamId(0), &f);
    }

    #[test]
    fn detached_params_get_no_grad() {
        let store = store_with(&[("a", (2, 2))]);
        let mut t = Tape::new();
        t.set_detach_params(true);
        let a = t.param(&store, ParamId(0));
        let m = t.mean(a);
        t.set_detach_params(false);
        let a2 = t.param(&store, ParamId(0));
        let m2 = t.mean(a2);
        let l = t.add(m, m2);
        let g = t.backward(l);
        assert_eq!(g.get(ParamId(0)).unwrap(), &Array2::from_elem((2, 2), 0.25));
    }
}

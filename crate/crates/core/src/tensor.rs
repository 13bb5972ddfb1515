//! Minimal reverse-mode autodiff over 2-D arrays, generic over f32/f64.
//! Training instantiates it at f32 for speed; gradient verification runs the
//! same graph code at f64 against central finite differences.

use std::cell::{Ref, RefCell};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Element type the engine is generic over.
pub trait Real: ndarray::NdFloat + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    /// Named to avoid colliding with `num_traits::ToPrimitive::to_f64`.
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle into a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    /// c = a @ b
    MatMul(usize, usize),
    /// elementwise a + b (same shape)
    Add(usize, usize),
    /// (n, d) + broadcast (1, d)
    AddBias(usize, usize),
    /// elementwise a * b
    Mul(usize, usize),
    /// (n, d) scaled row-wise by an (n, 1) column
    MulCol(usize, usize),
    /// a * scalar
    Scale(usize, T),
    /// a + constant array (no gradient to the constant)
    AddConst(usize),
    Transpose(usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    /// horizontal concat; (parent, col offset, width) per part
    ConcatCols(Vec<(usize, usize, usize)>),
    /// vertical concat; (parent, row offset, height) per part
    ConcatRows(Vec<(usize, usize, usize)>),
    /// out[i] = a[indices[i]]
    GatherRows(usize, Vec<usize>),
    /// softmax over axis 1, after adding an optional constant additive mask
    SoftmaxRows(usize),
    /// y = gamma * (x - mean)/std + beta per row; saves xhat and 1/std
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Array2<T>, rstd: Vec<T> },
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    /// elementwise multiply by a saved inverted-dropout mask
    Dropout(usize, Array2<T>),
    /// mean over rows -> (1, d)
    MeanRows(usize),
    /// sum of all entries -> (1, 1)
    SumAll(usize),
    /// mean of -log softmax(logits)[target] over active rows -> (1, 1)
    CrossEntropyRows { logits: usize, targets: Vec<usize>, active: Vec<bool>, probs: Array2<T> },
    /// mean squared error against a constant target column -> (1, 1)
    MseRows { pred: usize, target: Array2<T> },
}

struct Node<T: Real> {
    value: Array2<T>,
    grad: Option<Array2<T>>,
    op: Op<T>,
}

/// Records every operation so gradients can be propagated in reverse.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, value: Array2<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad: None, op });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<T>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Gradient accumulated for `v` by the latest [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Array2<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let bv = &nodes[b.0].value;
        let mut out = Array2::zeros((av.nrows(), bv.ncols()));
        general_mat_mul(T::one(), av, bv, T::zero(), &mut out);
        drop(nodes);
        self.push(out, Op::MatMul(a.0, b.0))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        self.push(out, Op::Add(a.0, b.0))
    }

    /// `(n, d) + (1, d)` broadcast add.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            debug_assert_eq!(nodes[bias.0].value.nrows(), 1);
            &nodes[a.0].value + &nodes[bias.0].value
        };
        self.push(out, Op::AddBias(a.0, bias.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        self.push(out, Op::Mul(a.0, b.0))
    }

    /// Scale each row of `a` (n, d) by the matching entry of `col` (n, 1).
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let cv = &nodes[col.0].value;
            debug_assert_eq!(cv.ncols(), 1);
            debug_assert_eq!(av.nrows(), cv.nrows());
            let mut out = av.clone();
            for (mut row, c) in out.rows_mut().into_iter().zip(cv.column(0)) {
                row.mapv_inplace(|x| x * *c);
            }
            out
        };
        self.push(out, Op::MulCol(a.0, col.0))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|x| x * c)
        };
        self.push(out, Op::Scale(a.0, c))
    }

    pub fn add_const(&self, a: Var, c: &Array2<T>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + c
        };
        self.push(out, Op::AddConst(a.0))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.t().to_owned()
        };
        self.push(out, Op::Transpose(a.0))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.slice(s![start..end, ..]).to_owned()
        };
        self.push(out, Op::SliceRows(a.0, start, end))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.slice(s![.., start..end]).to_owned()
        };
        self.push(out, Op::SliceCols(a.0, start, end))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| nodes[p.0].value.ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut spans = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            let v = &nodes[p.0].value;
            out.slice_mut(s![.., offset..offset + v.ncols()]).assign(v);
            spans.push((p.0, offset, v.ncols()));
            offset += v.ncols();
        }
        drop(nodes);
        self.push(out, Op::ConcatCols(spans))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let nodes = self.nodes.borrow();
        let cols = nodes[parts[0].0].value.ncols();
        let total: usize = parts.iter().map(|p| nodes[p.0].value.nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut spans = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            let v = &nodes[p.0].value;
            out.slice_mut(s![offset..offset + v.nrows(), ..]).assign(v);
            spans.push((p.0, offset, v.nrows()));
            offset += v.nrows();
        }
        drop(nodes);
        self.push(out, Op::ConcatRows(spans))
    }

    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let mut out = Array2::zeros((indices.len(), v.ncols()));
            for (row, &idx) in indices.iter().enumerate() {
                out.row_mut(row).assign(&v.row(idx));
            }
            out
        };
        self.push(out, Op::GatherRows(a.0, indices.to_vec()))
    }

    /// Row-wise softmax of `a + mask` (mask is constant, no gradient).
    pub fn softmax_rows(&self, a: Var, mask: Option<&Array2<T>>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let mut logits = nodes[a.0].value.clone();
            if let Some(m) = mask {
                logits += m;
            }
            softmax_inplace(&mut logits);
            logits
        };
        self.push(out, Op::SoftmaxRows(a.0))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let eps = T::from_f64(eps);
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let g = &nodes[gamma.0].value;
            let b = &nodes[beta.0].value;
            let d = T::from_f64(xv.ncols() as f64);
            let mut xhat = xv.clone();
            let mut rstd = Vec::with_capacity(xv.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.sum() / d;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|&v| v * v).fold(T::zero(), |acc, v| acc + v) / d;
                let r = T::one() / (var + eps).sqrt();
                row.mapv_inplace(|v| v * r);
                rstd.push(r);
            }
            let out = &xhat * g + b;
            (out, xhat, rstd)
        };
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd })
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(gelu_value)
        };
        self.push(out, Op::Gelu(a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|x| x.tanh())
        };
        self.push(out, Op::Tanh(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|x| T::one() / (T::one() + (-x).exp()))
        };
        self.push(out, Op::Sigmoid(a.0))
    }

    /// Inverted dropout: kept entries scale by 1/(1-p). Identity when p = 0.
    pub fn dropout(&self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let mask = {
            let nodes = self.nodes.borrow();
            let keep = T::from_f64(1.0 / (1.0 - p));
            nodes[a.0].value.mapv(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        };
        let out = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &mask
        };
        self.push(out, Op::Dropout(a.0, mask))
    }

    pub fn mean_rows(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let n = T::from_f64(v.nrows() as f64);
            let mut sum = v.sum_axis(Axis(0));
            sum.mapv_inplace(|x| x / n);
            sum.insert_axis(Axis(0))
        };
        self.push(out, Op::MeanRows(a.0))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            Array2::from_elem((1, 1), nodes[a.0].value.sum())
        };
        self.push(out, Op::SumAll(a.0))
    }

    /// Mean of -log softmax(logits)[target] over rows where `active` is true.
    /// Rows with `active = false` (padding) contribute nothing.
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[usize], active: &[bool]) -> Var {
        assert_eq!(targets.len(), active.len());
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            assert_eq!(lv.nrows(), targets.len());
            let mut probs = lv.clone();
            softmax_inplace(&mut probs);
            let mut total = T::zero();
            let mut count = 0usize;
            for (row, (&t, &a)) in targets.iter().zip(active).enumerate() {
                if a {
                    let p = probs[[row, t]].max(T::from_f64(f64::MIN_POSITIVE));
                    total = total - p.ln();
                    count += 1;
                }
            }
            let count = count.max(1);
            (total / T::from_f64(count as f64), probs)
        };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropyRows {
                logits: logits.0,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
            },
        )
    }

    /// Mean of (pred - target)^2 over all rows; target is constant.
    pub fn mse_rows(&self, pred: Var, target: &Array2<T>) -> Var {
        let loss = {
            let nodes = self.nodes.borrow();
            let pv = &nodes[pred.0].value;
            assert_eq!(pv.dim(), target.dim());
            let n = T::from_f64(pv.len() as f64);
            pv.iter()
                .zip(target.iter())
                .map(|(&p, &t)| (p - t) * (p - t))
                .fold(T::zero(), |acc, v| acc + v)
                / n
        };
        self.push(Array2::from_elem((1, 1), loss), Op::MseRows { pred: pred.0, target: target.clone() })
    }

    /// Linear layer: `x @ w (+ bias)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Propagate gradients from a scalar loss back to every reachable node.
    pub fn backward(&self, loss: Var) {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar loss");
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        nodes[loss.0].grad = Some(Array2::ones((1, 1)));

        for i in (0..nodes.len()).rev() {
            if nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = nodes.split_at_mut(i);
            let node = &mut tail[0];
            let g = node.grad.as_ref().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (bv, g_owned) = (head[*b].value.clone(), g.clone());
                    {
                        let ga = grad_mut(&mut head[*a]);
                        general_mat_mul(T::one(), &g_owned, &bv.t(), T::one(), ga);
                    }
                    let av = head[*a].value.clone();
                    let gb = grad_mut(&mut head[*b]);
                    general_mat_mul(T::one(), &av.t(), &g_owned, T::one(), gb);
                }
                Op::Add(a, b) => {
                    let g = g.clone();
                    *grad_mut(&mut head[*a]) += &g;
                    *grad_mut(&mut head[*b]) += &g;
                }
                Op::AddBias(a, b) => {
                    let g = g.clone();
                    *grad_mut(&mut head[*a]) += &g;
                    let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    *grad_mut(&mut head[*b]) += &col_sums;
                }
                Op::Mul(a, b) => {
                    let ga = g * &head[*b].value;
                    let gb = g * &head[*a].value;
                    *grad_mut(&mut head[*a]) += &ga;
                    *grad_mut(&mut head[*b]) += &gb;
                }
                Op::MulCol(a, col) => {
                    let cv = head[*col].value.clone();
                    let av = head[*a].value.clone();
                    let mut ga = g.clone();
                    for (mut row, c) in ga.rows_mut().into_iter().zip(cv.column(0)) {
                        row.mapv_inplace(|x| x * *c);
                    }
                    let mut gcol = Array2::zeros(cv.dim());
                    for ((mut out, grow), arow) in
                        gcol.rows_mut().into_iter().zip(g.rows()).zip(av.rows())
                    {
                        out[0] = grow
                            .iter()
                            .zip(arow.iter())
                            .map(|(&gv, &avv)| gv * avv)
                            .fold(T::zero(), |acc, v| acc + v);
                    }
                    *grad_mut(&mut head[*a]) += &ga;
                    *grad_mut(&mut head[*col]) += &gcol;
                }
                Op::Scale(a, c) => {
                    let ga = g.mapv(|x| x * *c);
                    *grad_mut(&mut head[*a]) += &ga;
                }
                Op::AddConst(a) => {
                    let g = g.clone();
                    *grad_mut(&mut head[*a]) += &g;
                }
                Op::Transpose(a) => {
                    let ga = g.t().to_owned();
                    *grad_mut(&mut head[*a]) += &ga;
                }
                Op::SliceRows(a, start, end) => {
                    let g = g.clone();
                    let ga = grad_mut(&mut head[*a]);
                    let mut slice = ga.slice_mut(s![*start..*end, ..]);
                    slice += &g;
                }
                Op::SliceCols(a, start, end) => {
                    let g = g.clone();
                    let ga = grad_mut(&mut head[*a]);
                    let mut slice = ga.slice_mut(s![.., *start..*end]);
                    slice += &g;
                }
                Op::ConcatCols(spans) => {
                    let g = g.clone();
                    for (p, offset, width) in spans.clone() {
                        let gp = grad_mut(&mut head[p]);
                        let mut slice = gp.slice_mut(s![.., ..]);
                        slice += &g.slice(s![.., offset..offset + width]);
                    }
                }
                Op::ConcatRows(spans) => {
                    let g = g.clone();
                    for (p, offset, height) in spans.clone() {
                        let gp = grad_mut(&mut head[p]);
                        let mut slice = gp.slice_mut(s![.., ..]);
                        slice += &g.slice(s![offset..offset + height, ..]);
                    }
                }
                Op::GatherRows(a, indices) => {
                    let (indices, g) = (indices.clone(), g.clone());
                    let ga = grad_mut(&mut head[*a]);
                    for (row, idx) in indices.into_iter().enumerate() {
                        let mut target = ga.row_mut(idx);
                        target += &g.row(row);
                    }
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - sum(g * y) per row)
                    let y = &node.value;
                    let mut ga = g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow.to_owned(), |r, &yv| *r -= dot * yv);
                        // row currently holds g*y - sum(g*y)*y which equals y*(g - sum(g*y))
                    }
                    *grad_mut(&mut head[*a]) += &ga;
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gm = head[*gamma].value.clone();
                    let d = T::from_f64(xhat.ncols() as f64);
                    let gh = g * &gm; // upstream grad through the affine scale
                    let mut gx = Array2::zeros(xhat.dim());
                    for ((mut out_row, gh_row), (xh_row, &r)) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(gh.rows())
                        .zip(xhat.rows().into_iter().zip(rstd.iter()))
                    {
                        let sum_gh = gh_row.sum();
                        let sum_gh_xhat = gh_row
                            .iter()
                            .zip(xh_row.iter())
                            .map(|(&a, &b)| a * b)
                            .fold(T::zero(), |acc, v| acc + v);
                        for ((o, &ghv), &xh) in
                            out_row.iter_mut().zip(gh_row.iter()).zip(xh_row.iter())
                        {
                            *o = r / d * (d * ghv - sum_gh - xh * sum_gh_xhat);
                        }
                    }
                    let g_gamma = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_beta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    *grad_mut(&mut head[*x]) += &gx;
                    *grad_mut(&mut head[*gamma]) += &g_gamma;
                    *grad_mut(&mut head[*beta]) += &g_beta;
                }
                Op::Gelu(a) => {
                    let ga = g * &head[*a].value.mapv(gelu_derivative);
                    *grad_mut(&mut head[*a]) += &ga;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = g * &y.mapv(|v| T::one() - v * v);
                    *grad_mut(&mut head[*a]) += &ga;
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = g * &y.mapv(|v| v * (T::one() - v));
                    *grad_mut(&mut head[*a]) += &ga;
                }
                Op::Dropout(a, mask) => {
                    let ga = g * mask;
                    *grad_mut(&mut head[*a]) += &ga;
                }
                Op::MeanRows(a) => {
                    let n = head[*a].value.nrows();
                    let scale = T::one() / T::from_f64(n as f64);
                    let grow = g.row(0).mapv(|x| x * scale);
                    let ga = grad_mut(&mut head[*a]);
                    for mut row in ga.rows_mut() {
                        row += &grow;
                    }
                }
                Op::SumAll(a) => {
                    let gval = g[[0, 0]];
                    let ga = grad_mut(&mut head[*a]);
                    ga.mapv_inplace(|x| x + gval);
                }
                Op::CrossEntropyRows { logits, targets, active, probs } => {
                    let gval = g[[0, 0]];
                    let count = active.iter().filter(|&&a| a).count().max(1);
                    let scale = gval / T::from_f64(count as f64);
                    let mut glogits = Array2::zeros(probs.dim());
                    for (row, (&t, &a)) in targets.iter().zip(active.iter()).enumerate() {
                        if !a {
                            continue;
                        }
                        let mut grow = glogits.row_mut(row);
                        grow.assign(&probs.row(row));
                        grow.mapv_inplace(|p| p * scale);
                        grow[t] -= scale;
                    }
                    *grad_mut(&mut head[*logits]) += &glogits;
                }
                Op::MseRows { pred, target } => {
                    let gval = g[[0, 0]];
                    let n = T::from_f64(target.len() as f64);
                    let two = T::from_f64(2.0);
                    let gpred =
                        (&head[*pred].value - target).mapv(|d| two * d * gval / n);
                    *grad_mut(&mut head[*pred]) += &gpred;
                }
            }
        }
    }
}

fn grad_mut<T: Real>(node: &mut Node<T>) -> &mut Array2<T> {
    if node.grad.is_none() {
        node.grad = Some(Array2::zeros(node.value.dim()));
    }
    node.grad.as_mut().expect("just initialized")
}

fn softmax_inplace<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// tanh-approximated GELU.
fn gelu_value<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Global L2 norm across a set of gradient arrays.
pub fn global_norm<T: Real>(grads: &[&Array2<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

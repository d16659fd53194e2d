//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array; scalars are `1 x 1`. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node list
//! accumulates all gradients. The tape only carries the handful of operations
//! the cosine classifier, prototype refinement and the adaptation losses need.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    /// Adds a constant that is already folded into the node value.
    Shift(Var),
    Mul(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    /// `x / max(||x||, eps)` per row; the flag records whether the floor was hit.
    NormalizeRows(Var, f64, Vec<bool>),
    LogSoftmaxRows(Var),
    ClampMin(Var, f64),
    DivRows(Var, Var),
    SumCols(Var),
    SumAll(Var),
    ConcatRows(Var, Var),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<(usize, usize)>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`; zeros if `v` did not influence it.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[derive(Default, Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Leaf node: a parameter or a constant input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.leaf(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a + row` with `row` (1 x m) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::Shift(a))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    /// `a * s` where `s` is a `1 x 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut floored = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            floored.push(n < eps);
            row /= n.max(eps);
        }
        self.push(v, Op::NormalizeRows(a, eps, floored))
    }

    /// Row-wise log-softmax. Entries equal to `-inf` are treated as masked.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor))
    }

    /// Divides row `i` of `a` by `d[i, 0]`.
    pub fn div_rows(&mut self, a: Var, d: Var) -> Var {
        let den = self.value(d);
        assert_eq!(den.ncols(), 1, "div_rows expects a column vector");
        let mut v = self.value(a).clone();
        for (mut row, &q) in v.rows_mut().into_iter().zip(den.column(0)) {
            row /= q;
        }
        self.push(v, Op::DivRows(a, d))
    }

    /// Column sums, `1 x m`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::SelectRows(a, rows.to_vec()))
    }

    /// Gathers `a[r, c]` for each pair into a `k x 1` column.
    pub fn gather(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((at.len(), 1), |(i, _)| x[at[i]]);
        self.push(v, Op::Gather(a, at.to_vec()))
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let n = out.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::ones((1, 1)));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Shift(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c),
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let gs = (&g * self.value(*a)).sum();
                    accumulate(&mut grads, *a, &g * k);
                    accumulate(&mut grads, *s, Array2::from_elem((1, 1), gs));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = &g * &y.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    ga.zip_mut_with(x, |gi, &xi| {
                        if xi <= 0.0 {
                            *gi *= slope
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::NormalizeRows(a, eps, floored) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let gr = g.row(r);
                        let mut out = ga.row_mut(r);
                        if floored[r] {
                            // below the floor the map is linear: x / eps
                            out.assign(&(&gr / *eps));
                        } else {
                            let yr = y.row(r);
                            let norm = x.row(r).dot(&x.row(r)).sqrt();
                            let proj = gr.dot(&yr);
                            out.assign(&((&gr - &(&yr * proj)) / norm));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let s = gr.sum();
                        gr.zip_mut_with(&yr, |gi, &li| *gi -= li.exp() * s);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    ga.zip_mut_with(x, |gi, &xi| {
                        if xi < *floor {
                            *gi = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::DivRows(a, d) => {
                    let den = self.value(*d);
                    let y = &node.value;
                    let mut ga = g.clone();
                    let mut gd = Array2::zeros(den.dim());
                    for r in 0..g.nrows() {
                        let q = den[[r, 0]];
                        gd[[r, 0]] = -g.row(r).dot(&y.row(r)) / q;
                        ga.row_mut(r).mapv_inplace(|v| v / q);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *d, gd);
                }
                Op::SumCols(a) => {
                    let shape = self.value(*a).dim();
                    let ga = g.broadcast(shape).expect("sum_cols broadcast").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).dim();
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).nrows();
                    let ga = g.slice(ndarray::s![..ra, ..]).to_owned();
                    let gb = g.slice(ndarray::s![ra.., ..]).to_owned();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, at) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &rc) in at.iter().enumerate() {
                        ga[rc] += g[[k, 0]];
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable row-wise log-softmax; `-inf` entries stay `-inf`.
pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

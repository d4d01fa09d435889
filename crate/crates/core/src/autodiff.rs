//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed on push)
//! together with enough information to run the chain rule backwards from a
//! scalar. Everything is two-dimensional; vectors are `[1, m]` or `[n, 1]`.
//! A graph is single-threaded; data-parallel training builds one graph per
//! chunk and sums the resulting gradients.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row rotation matrices, stored as 3x3 row-major blocks of which the
/// leading `d x d` corner is used.
pub type RowRotations = Rc<Vec<[f64; 9]>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    MulCol(Var, Var),
    Rotate {
        x: Var,
        rots: RowRotations,
        d: usize,
        transpose: bool,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
    SumAll(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SegmentSoftmax(a, _, _)
            | Op::SumAll(a) => vec![*a],
            Op::Rotate { x, .. } => vec![*x],
            Op::Concat(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn rotate_block(m: &[f64; 9], d: usize, x: &[f64], y: &mut [f64], transpose: bool) {
    for r in 0..d {
        let mut acc = 0.0;
        for c in 0..d {
            let coeff = if transpose { m[c * 3 + r] } else { m[r * 3 + c] };
            acc += coeff * x[c];
        }
        y[r] = acc;
    }
}

fn apply_rotations(x: &Mat, rots: &[[f64; 9]], d: usize, transpose: bool) -> Mat {
    let (n, m) = x.dim();
    let mut out = Mat::zeros((n, m));
    let mut buf_in = [0.0; 3];
    let mut buf_out = [0.0; 3];
    for r in 0..n {
        let rot = &rots[r];
        for blk in 0..m / d {
            for k in 0..d {
                buf_in[k] = x[[r, blk * d + k]];
            }
            rotate_block(rot, d, &buf_in[..d], &mut buf_out[..d], transpose);
            for k in 0..d {
                out[[r, blk * d + k]] = buf_out[k];
            }
        }
    }
    out
}

fn softmax_rows_of(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Adds a leaf sharing storage with `value`.
    pub fn leaf_shared(&self, value: Arc<Mat>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Mat, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    /// Constant `[1, m]` row vector.
    pub fn row(&self, values: &[f64]) -> Var {
        self.constant(Mat::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    fn value_rc(&self, v: Var) -> Arc<Mat> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn to_mat(&self, v: Var) -> Mat {
        self.value(v).clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Cuts the gradient path: returns a constant with the same value.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value_rc(v);
        self.leaf_shared(value, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimensions");
            av.dot(&*bv)
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.dim(), bv.dim(), "add shapes");
            &*av + &*bv
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.dim(), bv.dim(), "sub shapes");
            &*av - &*bv
        };
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(av.dim(), bv.dim(), "mul shapes");
            &*av * &*bv
        };
        self.push(value, Op::Mul(a, b))
    }

    /// `a [n, m] + b [1, m]` broadcast over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(bv.nrows(), 1, "add_row expects a row vector");
            assert_eq!(av.ncols(), bv.ncols(), "add_row widths");
            &*av + &*bv
        };
        self.push(value, Op::AddRow(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn silu(&self, a: Var) -> Var {
        let value = self.value(a).mapv(silu);
        self.push(value, Op::Silu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn sin(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sin);
        self.push(value, Op::Sin(a))
    }

    pub fn cos(&self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::cos);
        self.push(value, Op::Cos(a))
    }

    /// Column-wise concatenation; all inputs need the same row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let vals: Vec<Ref<Mat>> = parts.iter().map(|&p| self.value(p)).collect();
            let n = vals[0].nrows();
            let m: usize = vals.iter().map(|v| v.ncols()).sum();
            let mut out = Mat::zeros((n, m));
            let mut off = 0;
            for v in &vals {
                assert_eq!(v.nrows(), n, "concat row counts");
                out.slice_mut(s![.., off..off + v.ncols()]).assign(&**v);
                off += v.ncols();
            }
            out
        };
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// Row-wise stacking; all inputs need the same column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let vals: Vec<Ref<Mat>> = parts.iter().map(|&p| self.value(p)).collect();
            let m = vals[0].ncols();
            let n: usize = vals.iter().map(|v| v.nrows()).sum();
            let mut out = Mat::zeros((n, m));
            let mut off = 0;
            for v in &vals {
                assert_eq!(v.ncols(), m, "concat column counts");
                out.slice_mut(s![off..off + v.nrows(), ..]).assign(&**v);
                off += v.nrows();
            }
            out
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    /// `out[r] = a[idx[r]]`.
    pub fn gather_rows(&self, a: Var, idx: Rc<[usize]>) -> Var {
        let value = {
            let av = self.value(a);
            let mut out = Mat::zeros((idx.len(), av.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&av.row(i));
            }
            out
        };
        self.push(value, Op::Gather(a, idx))
    }

    /// `out[idx[r]] += a[r]`, producing `n_out` rows.
    pub fn scatter_add_rows(&self, a: Var, idx: Rc<[usize]>, n_out: usize) -> Var {
        let value = {
            let av = self.value(a);
            assert_eq!(av.nrows(), idx.len(), "scatter index length");
            let mut out = Mat::zeros((n_out, av.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                let mut dst = out.row_mut(i);
                dst += &av.row(r);
            }
            out
        };
        self.push(value, Op::ScatterAdd(a, idx))
    }

    /// Scales row `r` of `a` by `c[r, 0]`.
    pub fn mul_col(&self, a: Var, c: Var) -> Var {
        let value = {
            let (av, cv) = (self.value(a), self.value(c));
            assert_eq!(cv.dim(), (av.nrows(), 1), "mul_col expects [n, 1]");
            &*av * &*cv
        };
        self.push(value, Op::MulCol(a, c))
    }

    /// Applies the per-row rotation (or its transpose) to each consecutive
    /// `d`-wide block of columns.
    pub fn rotate_rows(&self, x: Var, rots: RowRotations, d: usize, transpose: bool) -> Var {
        let value = {
            let xv = self.value(x);
            assert_eq!(xv.nrows(), rots.len(), "one rotation per row");
            assert_eq!(xv.ncols() % d, 0, "columns must be a multiple of d");
            apply_rotations(&xv, &rots, d, transpose)
        };
        self.push(
            value,
            Op::Rotate {
                x,
                rots,
                d,
                transpose,
            },
        )
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = softmax_rows_of(&self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let value = {
            let mut out = self.value(a).clone();
            for mut row in out.rows_mut() {
                let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row.mapv_inplace(|v| v - lse);
            }
            out
        };
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Softmax of a column vector `[n, 1]` within groups given by `seg`.
    pub fn segment_softmax(&self, a: Var, seg: Rc<[usize]>, n_seg: usize) -> Var {
        let value = {
            let av = self.value(a);
            assert_eq!(av.ncols(), 1, "segment_softmax expects a column");
            assert_eq!(av.nrows(), seg.len(), "segment ids length");
            let mut mx = vec![f64::NEG_INFINITY; n_seg];
            for (r, &s) in seg.iter().enumerate() {
                mx[s] = mx[s].max(av[[r, 0]]);
            }
            let mut out = Mat::zeros(av.dim());
            let mut z = vec![0.0; n_seg];
            for (r, &s) in seg.iter().enumerate() {
                let e = (av[[r, 0]] - mx[s]).exp();
                out[[r, 0]] = e;
                z[s] += e;
            }
            for (r, &s) in seg.iter().enumerate() {
                out[[r, 0]] /= z[s];
            }
            out
        };
        self.push(value, Op::SegmentSoftmax(a, seg, n_seg))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Runs the backward pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], nodes: &[Node], v: Var, g: Mat) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        // Adds into part of `v`'s gradient, allocating it on first use.
        fn acc_into(grads: &mut [Option<Mat>], nodes: &[Node], v: Var, f: impl FnOnce(&mut Mat)) {
            if !nodes[v.0].requires_grad {
                return;
            }
            f(grads[v.0].get_or_insert_with(|| Mat::zeros(nodes[v.0].value.dim())));
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, &nodes, *a, g.dot(&bv.t()));
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, &nodes, *b, av.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *b, g.clone());
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *b, g.mapv(|v| -v));
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, &nodes, *a, &g * &**bv);
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, &nodes, *b, &g * &**av);
                    }
                }
                Op::AddRow(a, b) => {
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, &nodes, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, &nodes, *a, g.mapv(|v| v * c));
                }
                Op::Silu(a) => {
                    let av = &nodes[a.0].value;
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**av).for_each(|gv, &x| *gv *= silu_grad(x));
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**out).for_each(|gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**out).for_each(|gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Exp(a) => {
                    acc(&mut grads, &nodes, *a, &g * &**out);
                }
                Op::Sin(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&*nodes[a.0].value).for_each(|gv, &x| *gv *= x.cos());
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Cos(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&*nodes[a.0].value).for_each(|gv, &x| *gv *= -x.sin());
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = nodes[p.0].value.nrows();
                        if nodes[p.0].requires_grad {
                            acc(&mut grads, &nodes, *p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.ncols();
                        if nodes[p.0].requires_grad {
                            acc(&mut grads, &nodes, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    acc_into(&mut grads, &nodes, *a, |ga| {
                        let mut dst = ga.slice_mut(s![*start..*start + g.nrows(), ..]);
                        dst += &g;
                    });
                }
                Op::SliceCols(a, start) => {
                    acc_into(&mut grads, &nodes, *a, |ga| {
                        let mut dst = ga.slice_mut(s![.., *start..*start + g.ncols()]);
                        dst += &g;
                    });
                }
                Op::Gather(a, idx) => {
                    acc_into(&mut grads, &nodes, *a, |ga| {
                        for (r, &i) in idx.iter().enumerate() {
                            let mut dst = ga.row_mut(i);
                            dst += &g.row(r);
                        }
                    });
                }
                Op::ScatterAdd(a, idx) => {
                    let mut ga = Mat::zeros((idx.len(), g.ncols()));
                    for (r, &i) in idx.iter().enumerate() {
                        ga.row_mut(r).assign(&g.row(i));
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (&nodes[a.0].value, &nodes[c.0].value);
                    if nodes[c.0].requires_grad {
                        let gc = (&g * &**av).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, &nodes, *c, gc);
                    }
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, &nodes, *a, &g * &**cv);
                    }
                }
                Op::Rotate {
                    x,
                    rots,
                    d,
                    transpose,
                } => {
                    acc(&mut grads, &nodes, *x, apply_rotations(&g, rots, *d, !*transpose));
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = &g * &**out;
                    let dots = ga.sum_axis(Axis(1));
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let dot = dots[r];
                        Zip::from(&mut row)
                            .and(out.row(r))
                            .for_each(|gv, &y| *gv -= y * dot);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let sums = g.sum_axis(Axis(1));
                    let mut ga = g;
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let sr = sums[r];
                        Zip::from(&mut row)
                            .and(out.row(r))
                            .for_each(|gv, &ly| *gv -= ly.exp() * sr);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SegmentSoftmax(a, seg, n_seg) => {
                    let mut dot = vec![0.0; *n_seg];
                    for (r, &s) in seg.iter().enumerate() {
                        dot[s] += g[[r, 0]] * out[[r, 0]];
                    }
                    let mut ga = Mat::zeros(g.dim());
                    for (r, &s) in seg.iter().enumerate() {
                        ga[[r, 0]] = out[[r, 0]] * (g[[r, 0]] - dot[s]);
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SumAll(a) => {
                    let gv = g[[0, 0]];
                    acc(&mut grads, &nodes, *a, Mat::from_elem(nodes[a.0].value.dim(), gv));
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(loss)/d(input) against central differences, where `build`
    /// maps the input leaf to a scalar.
    fn check(input: Mat, build: impl Fn(&Graph, Var) -> Var) {
        let g = Graph::new();
        let x = g.leaf(input.clone(), true);
        let loss = build(&g, x);
        let grads = g.backward(loss);
        let analytic = grads.get_or_zeros(x, input.dim());
        let h = 1e-6;
        for idx in 0..input.len() {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let eval = |delta: f64| {
                let mut m = input.clone();
                m[[r, c]] += delta;
                let g = Graph::new();
                let x = g.leaf(m, true);
                let l = build(&g, x);
                g.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < 1e-5 || (a - numeric).abs() < 1e-8,
                "grad mismatch at ({r},{c}): analytic {a} numeric {numeric}"
            );
        }
    }

    /// Random projection so every output element matters to the loss.
    fn project(g: &Graph, y: Var, seed: u64) -> Var {
        let (r, c) = g.shape(y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&mut rng, r, c));
        g.sum_all(g.mul(y, w))
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |g, x| project(g, g.silu(x), 2));
        check(x.clone(), |g, x| project(g, g.sigmoid(x), 3));
        check(x.clone(), |g, x| project(g, g.tanh(x), 4));
        check(x.clone(), |g, x| project(g, g.exp(x), 5));
        check(x.clone(), |g, x| project(g, g.sin(g.scale(x, 3.0)), 8));
        check(x.clone(), |g, x| project(g, g.cos(g.scale(x, 3.0)), 9));
        check(x.clone(), |g, x| project(g, g.mul(x, x), 6));
        check(x.clone(), |g, x| project(g, g.scale(g.sub(x, g.tanh(x)), 3.0), 7));
    }

    #[test]
    fn matmul_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 4, 5);
        let b = random(&mut rng, 1, 5);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |g, x| {
            let w = g.constant(w.clone());
            project(g, g.add_row(g.matmul(x, w), g.constant(b.clone())), 8)
        });
        check(w.clone(), |g, w| {
            let x = g.constant(x.clone());
            project(g, g.matmul(x, w), 9)
        });
        check(b.clone(), |g, b| {
            let x = g.constant(x.clone());
            let w = g.constant(w.clone());
            project(g, g.add_row(g.matmul(x, w), b), 10)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 3);
        let idx: Rc<[usize]> = Rc::from(vec![2, 0, 0, 3, 1]);
        check(x.clone(), |g, x| project(g, g.gather_rows(x, idx.clone()), 11));
        let sidx: Rc<[usize]> = Rc::from(vec![1, 1, 0, 1]);
        check(x.clone(), |g, x| project(g, g.scatter_add_rows(x, sidx.clone(), 2), 12));
        check(x.clone(), |g, x| {
            let y = g.concat_cols(&[x, g.silu(x), x]);
            let y = g.concat_rows(&[y, g.tanh(y)]);
            project(g, g.slice_rows(g.slice_cols(y, 2, 5), 1, 6), 13)
        });
        let c = random(&mut rng, 4, 1);
        check(x.clone(), |g, x| project(g, g.mul_col(x, g.constant(c.clone())), 14));
        check(c.clone(), |g, c| project(g, g.mul_col(g.constant(x.clone()), c), 15));
    }

    #[test]
    fn softmax_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |g, x| project(g, g.softmax_rows(x), 16));
        check(x.clone(), |g, x| project(g, g.log_softmax_rows(x), 17));
        let col = random(&mut rng, 6, 1);
        let seg: Rc<[usize]> = Rc::from(vec![0, 1, 0, 1, 1, 2]);
        check(col, |g, x| project(g, g.segment_softmax(x, seg.clone(), 3), 18));
    }

    #[test]
    fn rotation_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 6);
        let rots: RowRotations = Rc::new(
            (0..3)
                .map(|_| {
                    let a: f64 = rng.random_range(-3.0..3.0);
                    [a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0]
                })
                .collect(),
        );
        check(x.clone(), |g, x| project(g, g.rotate_rows(x, rots.clone(), 2, false), 19));
        check(x.clone(), |g, x| project(g, g.rotate_rows(x, rots.clone(), 3, true), 20));
        // rotate then inverse-rotate is the identity
        let g = Graph::new();
        let v = g.constant(x.clone());
        let back = g.rotate_rows(g.rotate_rows(v, rots.clone(), 2, false), rots, 2, true);
        let diff = (&*g.value(back) - &x).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-14);
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.leaf(Mat::from_elem((1, 1), 2.0), true);
        let y = g.mul(x, g.detach(x));
        let grads = g.backward(g.sum_all(y));
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 2.0);
    }
}

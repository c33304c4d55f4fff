//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation evaluates eagerly and records itself on a [`Tape`];
//! [`Tape::backward`] replays the tape in reverse to accumulate adjoints.
//! The op set is what the recommender needs and nothing more: dense and
//! sparse-constant products, row gathers, per-row dot products, segment
//! softmax / weighted sums for attention pooling, and a few pointwise maps.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf(String),
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    GatherRows(Var, Arc<[usize]>),
    RowDot(Var, Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    SegmentWeightedSum(Var, Var, Arc<[usize]>),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf(name) => name,
            Op::MatMul(..) => "matmul",
            Op::SpMM(..) => "spmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::GatherRows(..) => "gather_rows",
            Op::RowDot(..) => "row_dot",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentWeightedSum(..) => "segment_weighted_sum",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Saturation-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`]; `None` for nodes the loss does not reach.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
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

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>, name: impl Into<String>) -> Var {
        self.push(value, Op::Leaf(name.into()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (shape(self.value(a)), shape(self.value(b)));
        if sa.1 != sb.0 {
            return Err(Error::Contract(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `s · b` for a constant sparse `s`.
    pub fn spmm(&mut self, s: Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let sb = shape(self.value(b));
        if s.cols() != sb.0 {
            return Err(Error::Contract(format!(
                "sparse product shapes ({}, {}) x {sb:?}",
                s.rows(),
                s.cols()
            )));
        }
        let v = s.matmul_dense(self.value(b));
        Ok(self.push(v, Op::SpMM(s, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (shape(self.value(a)), shape(self.value(b)));
        if sa != sb {
            return Err(Error::Contract(format!("{what} shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    /// Rows `idx[k]` of `a`, stacked.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.nrows()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of {} rows",
                src.nrows()
            )));
        }
        let v = src.select(Axis(0), &idx);
        Ok(self.push(v, Op::GatherRows(a, idx)))
    }

    /// `out[k] = a[k] · b[k]`, shape `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (x, y) = (self.value(a), self.value(b));
        let v = (x * y).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(v, Op::RowDot(a, b)))
    }

    /// Softmax of a column vector within each segment
    /// `offsets[g]..offsets[g + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        check_segments(x, &offsets, 1)?;
        let mut out = Array2::zeros(x.dim());
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let max = (lo..hi).map(|k| x[[k, 0]]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in lo..hi {
                let e = (x[[k, 0]] - max).exp();
                out[[k, 0]] = e;
                z += e;
            }
            for k in lo..hi {
                out[[k, 0]] /= z;
            }
        }
        Ok(self.push(out, Op::SegmentSoftmax(a, offsets)))
    }

    /// `out[g] = Σ_{k in segment g} weights[k] · values[k]`.
    pub fn segment_weighted_sum(&mut self, values: Var, weights: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let (v, w) = (self.value(values), self.value(weights));
        check_segments(w, &offsets, 1)?;
        if v.nrows() != w.nrows() {
            return Err(Error::Contract(format!(
                "segment sum has {} values but {} weights",
                v.nrows(),
                w.nrows()
            )));
        }
        let groups = offsets.len() - 1;
        let mut out = Array2::zeros((groups, v.ncols()));
        for g in 0..groups {
            let mut row = out.row_mut(g);
            for k in offsets[g]..offsets[g + 1] {
                row.scaled_add(w[[k, 0]], &v.row(k));
            }
        }
        Ok(self.push(out, Op::SegmentWeightedSum(values, weights, offsets)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    /// Reverse sweep from the scalar `loss`. Fails on the first non-finite
    /// value or adjoint, naming the offending node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Contract("backward needs a 1x1 loss".into()));
        }
        for node in &self.nodes[..=loss.0] {
            if !node.value.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(node.op.name().to_string()));
            }
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("d/d {}", node.op.name())));
            }
            match &node.op {
                Op::Leaf(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SpMM(s, b) => acc(&mut grads, *b, s.t_matmul_dense(&g)),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= 2.0 * x);
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &s| *d *= s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::LogSigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d *= sigmoid(-x));
                    acc(&mut grads, *a, d);
                }
                Op::GatherRows(a, index) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (k, &i) in index.iter().enumerate() {
                        d.row_mut(i).scaled_add(1.0, &g.row(k));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowDot(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = y * &g;
                    let gb = x * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SegmentSoftmax(a, offsets) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for w in offsets.windows(2) {
                        let dot: f64 = (w[0]..w[1]).map(|k| y[[k, 0]] * g[[k, 0]]).sum();
                        for k in w[0]..w[1] {
                            d[[k, 0]] = y[[k, 0]] * (g[[k, 0]] - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SegmentWeightedSum(values, weights, offsets) => {
                    let (v, w) = (self.value(*values), self.value(*weights));
                    let mut gv = Array2::zeros(v.dim());
                    let mut gw = Array2::zeros(w.dim());
                    for gi in 0..offsets.len() - 1 {
                        let grow = g.row(gi);
                        for k in offsets[gi]..offsets[gi + 1] {
                            gv.row_mut(k).scaled_add(w[[k, 0]], &grow);
                            gw[[k, 0]] = v.row(k).dot(&grow);
                        }
                    }
                    acc(&mut grads, *values, gv);
                    acc(&mut grads, *weights, gw);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn check_segments(x: &Array2<f64>, offsets: &[usize], cols: usize) -> Result<()> {
    if x.ncols() != cols {
        return Err(Error::Contract(format!(
            "segment op expects {cols} column(s), got {}",
            x.ncols()
        )));
    }
    let ok = offsets.first() == Some(&0)
        && offsets.last() == Some(&x.nrows())
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(Error::Contract(
            "segment offsets must start at 0, end at the row count and be strictly increasing".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[r, c]] += h;
            let mut m = x.clone();
            m[[r, c]] -= h;
            g[[r, c]] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_dot_derivative_at_zero() {
        // d/dx σ(x · q) at x = 0 is σ'(0) q = q / 4
        let q = array![[2.0, -4.0]];
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0, 0.0]], "x");
        let qv = t.leaf(q.clone(), "q");
        let d = t.row_dot(x, qv).unwrap();
        let s = t.sigmoid(d);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &(q * 0.25));
    }

    #[test]
    fn margin_square_derivative() {
        // d/dr (r - r' - 1)^2 at r = r' is -2
        let mut t = Tape::new();
        let r = t.leaf(array![[0.3]], "r");
        let rn = t.leaf(array![[0.3]], "r'");
        let d = t.sub(r, rn).unwrap();
        let d = t.add_scalar(d, -1.0);
        let sq = t.square(d);
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(r).unwrap()[[0, 0]], -2.0);
        assert_eq!(g.get(rn).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn composite_matches_finite_differences() {
        let p0 = array![[0.1, -0.2, 0.3], [0.5, 0.4, -0.1], [-0.3, 0.2, 0.2], [0.0, 0.1, -0.4]];
        let w0 = array![[0.2, -0.1, 0.0], [0.3, 0.1, -0.2], [-0.1, 0.4, 0.1]];
        let x0 = array![[0.5], [-0.3], [0.2]];
        let s = Arc::new(CsrMatrix::from_rows(
            4,
            4,
            vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)], vec![(0, 0.2), (3, 0.8)], vec![]],
        ));
        let offsets: Arc<[usize]> = vec![0, 2, 5].into();
        let members: Arc<[usize]> = vec![0, 1, 1, 2, 3].into();
        let build = |p: &Array2<f64>, w: &Array2<f64>, x: &Array2<f64>| {
            let mut t = Tape::new();
            let pv = t.leaf(p.clone(), "p");
            let wv = t.leaf(w.clone(), "w");
            let xv = t.leaf(x.clone(), "x");
            let h = t.spmm(s.clone(), pv).unwrap();
            let h = t.matmul(h, wv).unwrap();
            let h = t.add(h, pv).unwrap();
            let logits = t.matmul(h, xv).unwrap();
            let lm = t.gather_rows(logits, members.clone()).unwrap();
            let alpha = t.segment_softmax(lm, offsets.clone()).unwrap();
            let hm = t.gather_rows(h, members.clone()).unwrap();
            let z = t.segment_weighted_sum(hm, alpha, offsets.clone()).unwrap();
            let zz = t.gather_rows(z, vec![0, 1, 1].into()).unwrap();
            let pp = t.gather_rows(pv, vec![3, 0, 2].into()).unwrap();
            let d = t.row_dot(zz, pp).unwrap();
            let ls = t.log_sigmoid(d);
            let sg = t.sigmoid(d);
            let sq = t.square(sg);
            let a = t.scale(ls, -1.5);
            let b = t.sub(a, sq).unwrap();
            let l = t.sum(b);
            (t, l, pv, wv, xv)
        };
        let (t, l, pv, wv, xv) = build(&p0, &w0, &x0);
        let g = t.backward(l).unwrap();
        let f = |p: &Array2<f64>, w: &Array2<f64>, x: &Array2<f64>| {
            let (t, l, ..) = build(p, w, x);
            t.scalar(l)
        };
        assert_close(g.get(pv).unwrap(), &numeric_grad(&p0, |p| f(p, &w0, &x0)), 1e-7);
        assert_close(g.get(wv).unwrap(), &numeric_grad(&w0, |w| f(&p0, w, &x0)), 1e-7);
        assert_close(g.get(xv).unwrap(), &numeric_grad(&x0, |x| f(&p0, &w0, x)), 1e-7);
    }

    #[test]
    fn segment_softmax_sums_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0], [2.0], [3.0], [1000.0], [-1000.0]], "x");
        let y = t.segment_softmax(x, vec![0, 3, 5].into()).unwrap();
        let v = t.value(y);
        assert!(((v[[0, 0]] + v[[1, 0]] + v[[2, 0]]) - 1.0).abs() < 1e-12);
        assert_eq!(v[[3, 0]], 1.0);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Array2::zeros((2, 3)), "a");
        let b = t.leaf(Array2::zeros((2, 3)), "b");
        assert!(matches!(t.matmul(a, b), Err(Error::Contract(_))));
        assert!(t.gather_rows(a, vec![2].into()).is_err());
        assert!(t.segment_softmax(a, vec![0, 2].into()).is_err());
    }

    #[test]
    fn non_finite_is_named() {
        let mut t = Tape::new();
        let a = t.leaf(array![[f64::NAN]], "user_embed");
        let l = t.sum(a);
        match t.backward(l) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "user_embed"),
            other => panic!("{:?}", other.err()),
        }
    }
}

//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every differentiable value is a [`Tensor`]: a row-major `(rows, cols)`
//! block of `f64` with an optional gradient accumulator. Operations record
//! their parents and a backward closure; calling [`Tensor::backward`] on a
//! scalar root walks the graph in reverse topological order and accumulates
//! gradients into every reachable leaf that requires them.
//!
//! The graph is rebuilt on every forward pass; leaves (parameters) persist
//! across passes and are updated in place by the optimizer.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar root, got shape ({0}, {1})")]
    NonScalarRoot(usize, usize),
    #[error("backward was already run on this root; rebuild the graph before calling again")]
    BackwardTwice,
}

type BackFn = Box<dyn Fn(&[f64])>;

struct Node {
    rows: usize,
    cols: usize,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    back: Option<BackFn>,
    needs_grad: bool,
    backward_done: Cell<bool>,
}

/// Shared handle to a node in the computation graph.
pub struct Tensor {
    node: Rc<Node>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor({}x{}, grad={})",
            self.rows(),
            self.cols(),
            self.node.needs_grad
        )
    }
}

fn assert_finite(vals: &[f64], op: &str) {
    for &v in vals {
        if !v.is_finite() {
            panic!("non-finite value produced by op `{op}`");
        }
    }
}

impl Tensor {
    pub fn leaf(rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(values.len(), rows * cols, "leaf value length mismatch");
        assert_finite(&values, "leaf");
        Tensor {
            node: Rc::new(Node {
                rows,
                cols,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                parents: Vec::new(),
                back: None,
                needs_grad: requires_grad,
                backward_done: Cell::new(false),
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(1, 1, vec![v], false)
    }

    pub fn constant(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
        Tensor::leaf(rows, cols, values, false)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::leaf(rows, cols, vec![0.0; rows * cols], false)
    }

    fn from_op(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        back: BackFn,
        op: &str,
    ) -> Tensor {
        assert_eq!(values.len(), rows * cols, "op `{op}` produced wrong length");
        assert_finite(&values, op);
        let needs_grad = parents.iter().any(|p| p.node.needs_grad);
        Tensor {
            node: Rc::new(Node {
                rows,
                cols,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                parents: if needs_grad { parents } else { Vec::new() },
                back: if needs_grad { Some(back) } else { None },
                needs_grad,
                backward_done: Cell::new(false),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.node.rows
    }

    pub fn cols(&self) -> usize {
        self.node.cols
    }

    pub fn len(&self) -> usize {
        self.node.rows * self.node.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.needs_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.values.borrow().clone()
    }

    /// Scalar value of a 1x1 tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.len(), 1, "value() requires a scalar tensor");
        self.node.values.borrow()[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.node.values.borrow()[r * self.node.cols + c]
    }

    /// Replace the stored values in place (optimizer update path; leaves only).
    pub fn set_values(&self, values: Vec<f64>) {
        assert_eq!(values.len(), self.len(), "set_values length mismatch");
        assert_finite(&values, "set_values");
        *self.node.values.borrow_mut() = values;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Install a zero gradient if none was accumulated; parameters that a
    /// particular forward pass never touches have gradient zero.
    pub fn ensure_grad(&self) {
        let mut g = self.node.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.len()]);
        }
    }

    /// New leaf sharing this tensor's current values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.rows(), self.cols(), self.to_vec())
    }

    fn accum_grad(&self, delta: &[f64]) {
        let mut g = self.node.grad.borrow_mut();
        match g.as_mut() {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Reverse accumulation from a scalar root.
    pub fn backward(&self) -> Result<(), AutodiffError> {
        if self.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(self.rows(), self.cols()));
        }
        if self.node.backward_done.get() {
            return Err(AutodiffError::BackwardTwice);
        }
        self.node.backward_done.set(true);

        // Iterative post-order DFS, then reversed for root-first processing.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.node));
        while let Some((t, idx)) = stack.pop() {
            if idx < t.node.parents.len() {
                let parent = t.node.parents[idx].clone();
                stack.push((t, idx + 1));
                if parent.node.needs_grad && visited.insert(Rc::as_ptr(&parent.node)) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        order.reverse();

        self.accum_grad(&[1.0]);
        for t in &order {
            if let Some(back) = &t.node.back {
                let g = t.node.grad.borrow().clone();
                if let Some(g) = g {
                    back(&g);
                }
            }
        }
        Ok(())
    }

    // ----- elementwise binary -----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.rows(), self.cols()), (other.rows(), other.cols()));
        let out: Vec<f64> = self
            .node
            .values
            .borrow()
            .iter()
            .zip(other.node.values.borrow().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.node.needs_grad {
                    pa.accum_grad(g);
                }
                if pb.node.needs_grad {
                    pb.accum_grad(g);
                }
            }),
            "add",
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.rows(), self.cols()), (other.rows(), other.cols()));
        let out: Vec<f64> = self
            .node
            .values
            .borrow()
            .iter()
            .zip(other.node.values.borrow().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.node.needs_grad {
                    pa.accum_grad(g);
                }
                if pb.node.needs_grad {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    pb.accum_grad(&neg);
                }
            }),
            "sub",
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.rows(), self.cols()), (other.rows(), other.cols()));
        let av = self.to_vec();
        let bv = other.to_vec();
        let out: Vec<f64> = av.iter().zip(&bv).map(|(a, b)| a * b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.node.needs_grad {
                    let d: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g * b).collect();
                    pa.accum_grad(&d);
                }
                if pb.node.needs_grad {
                    let d: Vec<f64> = g.iter().zip(&av).map(|(g, a)| g * a).collect();
                    pb.accum_grad(&d);
                }
            }),
            "mul",
        )
    }

    /// Broadcast a `(rows, 1)` column across this `(rows, cols)` tensor.
    pub fn mul_col(&self, col: &Tensor) -> Tensor {
        assert_eq!(col.cols(), 1);
        assert_eq!(col.rows(), self.rows());
        let (r, c) = (self.rows(), self.cols());
        let av = self.to_vec();
        let cv = col.to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] * cv[i];
            }
        }
        let (pa, pc) = (self.clone(), col.clone());
        Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), col.clone()],
            Box::new(move |g| {
                if pa.node.needs_grad {
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g[i * c + j] * cv[i];
                        }
                    }
                    pa.accum_grad(&d);
                }
                if pc.node.needs_grad {
                    let mut d = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            d[i] += g[i * c + j] * av[i * c + j];
                        }
                    }
                    pc.accum_grad(&d);
                }
            }),
            "mul_col",
        )
    }

    /// Add a `(1, cols)` row to every row (linear-layer bias).
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        assert_eq!(row.rows(), 1);
        assert_eq!(row.cols(), self.cols());
        let (r, c) = (self.rows(), self.cols());
        let av = self.to_vec();
        let rv = row.to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] + rv[j];
            }
        }
        let (pa, pr) = (self.clone(), row.clone());
        Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                if pa.node.needs_grad {
                    pa.accum_grad(g);
                }
                if pr.node.needs_grad {
                    let mut d = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j];
                        }
                    }
                    pr.accum_grad(&d);
                }
            }),
            "add_row",
        )
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let out: Vec<f64> = self.node.values.borrow().iter().map(|v| v * k).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                pa.accum_grad(&d);
            }),
            "scale",
        )
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        let out: Vec<f64> = self.node.values.borrow().iter().map(|v| v + k).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone()],
            Box::new(move |g| pa.accum_grad(g)),
            "add_scalar",
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    // ----- linear algebra -----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols(), other.rows(), "matmul inner dim mismatch");
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let av = self.to_vec();
        let bv = other.to_vec();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = av[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += a * bv[p * n + j];
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            m,
            n,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.node.needs_grad {
                    // dA = G B^T
                    let mut d = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            d[i * k + p] = s;
                        }
                    }
                    pa.accum_grad(&d);
                }
                if pb.node.needs_grad {
                    // dB = A^T G
                    let mut d = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let a = av[i * k + p];
                            if a == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                d[p * n + j] += a * g[i * n + j];
                            }
                        }
                    }
                    pb.accum_grad(&d);
                }
            }),
            "matmul",
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let av = self.to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let pa = self.clone();
        Tensor::from_op(
            c,
            r,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                pa.accum_grad(&d);
            }),
            "transpose",
        )
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.len(), "reshape length mismatch");
        let pa = self.clone();
        Tensor::from_op(
            rows,
            cols,
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| pa.accum_grad(g)),
            "reshape",
        )
    }

    // ----- structural -----

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let r = parts[0].rows();
        for p in parts {
            assert_eq!(p.rows(), r, "concat_cols row mismatch");
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for p in parts {
            let pv = p.to_vec();
            let c = p.cols();
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let back_parts = owned.clone();
        Tensor::from_op(
            r,
            total,
            out,
            owned,
            Box::new(move |g| {
                let mut off = 0;
                for p in &back_parts {
                    let c = p.cols();
                    if p.node.needs_grad {
                        let mut d = vec![0.0; r * c];
                        for i in 0..r {
                            d[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + off..i * total + off + c]);
                        }
                        p.accum_grad(&d);
                    }
                    off += c;
                }
            }),
            "concat_cols",
        )
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let c = parts[0].cols();
        for p in parts {
            assert_eq!(p.cols(), c, "concat_rows col mismatch");
        }
        let total: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Vec::with_capacity(total * c);
        for p in parts {
            out.extend_from_slice(&p.to_vec());
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let back_parts = owned.clone();
        Tensor::from_op(
            total,
            c,
            out,
            owned,
            Box::new(move |g| {
                let mut off = 0;
                for p in &back_parts {
                    let n = p.rows() * c;
                    if p.node.needs_grad {
                        p.accum_grad(&g[off..off + n]);
                    }
                    off += n;
                }
            }),
            "concat_rows",
        )
    }

    pub fn narrow_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.cols());
        let (r, c) = (self.rows(), self.cols());
        let av = self.to_vec();
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let pa = self.clone();
        Tensor::from_op(
            r,
            len,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                pa.accum_grad(&d);
            }),
            "narrow_cols",
        )
    }

    /// Gather rows by index (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        for &i in idx {
            assert!(i < r, "gather_rows index out of range");
        }
        let av = self.to_vec();
        let m = idx.len();
        let mut out = vec![0.0; m * c];
        for (k, &i) in idx.iter().enumerate() {
            out[k * c..(k + 1) * c].copy_from_slice(&av[i * c..(i + 1) * c]);
        }
        let pa = self.clone();
        let idx_owned: Vec<usize> = idx.to_vec();
        Tensor::from_op(
            m,
            c,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; r * c];
                for (k, &i) in idx_owned.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[k * c + j];
                    }
                }
                pa.accum_grad(&d);
            }),
            "gather_rows",
        )
    }

    /// Scatter-add rows: `out[idx[k]] += self[k]`, output has `n_out` rows.
    pub fn scatter_add_rows(&self, idx: &[usize], n_out: usize) -> Tensor {
        assert_eq!(idx.len(), self.rows());
        let c = self.cols();
        for &i in idx {
            assert!(i < n_out, "scatter index out of range");
        }
        let av = self.to_vec();
        let mut out = vec![0.0; n_out * c];
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += av[k * c + j];
            }
        }
        let pa = self.clone();
        let m = self.rows();
        let idx_owned: Vec<usize> = idx.to_vec();
        Tensor::from_op(
            n_out,
            c,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; m * c];
                for (k, &i) in idx_owned.iter().enumerate() {
                    d[k * c..(k + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                pa.accum_grad(&d);
            }),
            "scatter_add_rows",
        )
    }

    // ----- reductions -----

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.node.values.borrow().iter().sum();
        let pa = self.clone();
        let n = self.len();
        Tensor::from_op(
            1,
            1,
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(&vec![g[0]; n]);
            }),
            "sum",
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        assert!(n > 0, "mean of empty tensor");
        self.sum().scale(1.0 / n as f64)
    }

    /// Row sums as a `(rows, 1)` column.
    pub fn sum_cols(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let av = self.to_vec();
        let mut out = vec![0.0; r];
        for i in 0..r {
            for j in 0..c {
                out[i] += av[i * c + j];
            }
        }
        let pa = self.clone();
        Tensor::from_op(
            r,
            1,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[i];
                    }
                }
                pa.accum_grad(&d);
            }),
            "sum_cols",
        )
    }

    // ----- elementwise unary -----

    fn map_unary(&self, op: &str, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Tensor {
        let av = self.to_vec();
        let out: Vec<f64> = av.iter().map(|&v| f(v)).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let d: Vec<f64> = g.iter().zip(&av).map(|(g, &x)| g * df(x)).collect();
                pa.accum_grad(&d);
            }),
            op,
        )
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary("relu", |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Tensor {
        fn sp(x: f64) -> f64 {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        }
        fn sig(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }
        self.map_unary("softplus", sp, sig)
    }

    pub fn sigmoid(&self) -> Tensor {
        fn sig(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        self.map_unary("sigmoid", sig, |x| {
            let s = sig(x);
            s * (1.0 - s)
        })
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary("exp", f64::exp, f64::exp)
    }

    /// Natural log; inputs are clamped to `>= floor` first (zero gradient
    /// below the floor).
    pub fn ln_clamped(&self, floor: f64) -> Tensor {
        assert!(floor > 0.0);
        self.map_unary(
            "ln_clamped",
            move |x| x.max(floor).ln(),
            move |x| if x > floor { 1.0 / x } else { 0.0 },
        )
    }

    pub fn sqrt(&self) -> Tensor {
        self.map_unary("sqrt", f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn square(&self) -> Tensor {
        self.map_unary("square", |x| x * x, |x| 2.0 * x)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo < hi);
        self.map_unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    // ----- softmax -----

    /// Softmax over each row.
    pub fn row_softmax(&self) -> Tensor {
        let mask = vec![true; self.len()];
        self.masked_row_softmax(&mask)
    }

    /// Softmax over the unmasked entries of each row. Masked entries map to
    /// zero; a fully masked row becomes all zeros.
    pub fn masked_row_softmax(&self, mask: &[bool]) -> Tensor {
        assert_eq!(mask.len(), self.len());
        let (r, c) = (self.rows(), self.cols());
        let av = self.to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                continue; // fully masked row
            }
            let mut s = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    s += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        let pa = self.clone();
        let yv = out.clone();
        let mask_owned: Vec<bool> = mask.to_vec();
        Tensor::from_op(
            r,
            c,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[i * c + j] * yv[i * c + j];
                    }
                    for j in 0..c {
                        if mask_owned[i * c + j] {
                            d[i * c + j] = yv[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
                pa.accum_grad(&d);
            }),
            "masked_row_softmax",
        )
    }

    // ----- losses -----

    /// Mean-reduced elementwise Huber loss on `self - target`.
    pub fn huber(&self, target: &Tensor, delta: f64) -> Tensor {
        assert!(delta > 0.0);
        assert_eq!(
            (self.rows(), self.cols()),
            (target.rows(), target.cols()),
            "huber shape mismatch"
        );
        let av = self.to_vec();
        let bv = target.to_vec();
        let n = av.len();
        let mut total = 0.0;
        for (a, b) in av.iter().zip(&bv) {
            let r = a - b;
            total += if r.abs() <= delta {
                0.5 * r * r
            } else {
                delta * (r.abs() - 0.5 * delta)
            };
        }
        let (pa, pb) = (self.clone(), target.clone());
        Tensor::from_op(
            1,
            1,
            vec![total / n as f64],
            vec![self.clone(), target.clone()],
            Box::new(move |g| {
                let scale = g[0] / n as f64;
                let d: Vec<f64> = av
                    .iter()
                    .zip(&bv)
                    .map(|(a, b)| {
                        let r = a - b;
                        scale * if r.abs() <= delta { r } else { delta * r.signum() }
                    })
                    .collect();
                if pa.node.needs_grad {
                    pa.accum_grad(&d);
                }
                if pb.node.needs_grad {
                    let neg: Vec<f64> = d.iter().map(|x| -x).collect();
                    pb.accum_grad(&neg);
                }
            }),
            "huber",
        )
    }

    /// Mean binary cross-entropy against constant binary labels.
    /// Probabilities are clamped to `[eps, 1-eps]`.
    pub fn bce(&self, labels: &[f64], eps: f64) -> Tensor {
        assert_eq!(labels.len(), self.len(), "bce length mismatch");
        let av = self.to_vec();
        let n = av.len();
        let mut total = 0.0;
        for (p, y) in av.iter().zip(labels) {
            let p = p.clamp(eps, 1.0 - eps);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let pa = self.clone();
        let labels_owned: Vec<f64> = labels.to_vec();
        Tensor::from_op(
            1,
            1,
            vec![total / n as f64],
            vec![self.clone()],
            Box::new(move |g| {
                let scale = g[0] / n as f64;
                let d: Vec<f64> = av
                    .iter()
                    .zip(&labels_owned)
                    .map(|(&p0, y)| {
                        if p0 <= eps || p0 >= 1.0 - eps {
                            0.0
                        } else {
                            scale * (-(y / p0) + (1.0 - y) / (1.0 - p0))
                        }
                    })
                    .collect();
                pa.accum_grad(&d);
            }),
            "bce",
        )
    }

    // ----- pair ops -----

    /// Row-major pairwise outer product: `out[(i*nb+j), (u*q+v)] = a[i,u] * b[j,v]`.
    pub fn pair_outer(&self, other: &Tensor) -> Tensor {
        let (na, p) = (self.rows(), self.cols());
        let (nb, q) = (other.rows(), other.cols());
        let av = self.to_vec();
        let bv = other.to_vec();
        let mut out = vec![0.0; na * nb * p * q];
        for i in 0..na {
            for j in 0..nb {
                let row = (i * nb + j) * p * q;
                for u in 0..p {
                    let a = av[i * p + u];
                    for v in 0..q {
                        out[row + u * q + v] = a * bv[j * q + v];
                    }
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            na * nb,
            p * q,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.node.needs_grad {
                    let mut d = vec![0.0; na * p];
                    for i in 0..na {
                        for j in 0..nb {
                            let row = (i * nb + j) * p * q;
                            for u in 0..p {
                                let mut s = 0.0;
                                for v in 0..q {
                                    s += g[row + u * q + v] * bv[j * q + v];
                                }
                                d[i * p + u] += s;
                            }
                        }
                    }
                    pa.accum_grad(&d);
                }
                if pb.node.needs_grad {
                    let mut d = vec![0.0; nb * q];
                    for i in 0..na {
                        for j in 0..nb {
                            let row = (i * nb + j) * p * q;
                            for u in 0..p {
                                let a = av[i * p + u];
                                for v in 0..q {
                                    d[j * q + v] += g[row + u * q + v] * a;
                                }
                            }
                        }
                    }
                    pb.accum_grad(&d);
                }
            }),
            "pair_outer",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::leaf(1, 2, vec![1.0, 2.0], true);
        let loss = w.mul(&w).sum();
        assert_close(loss.value(), 5.0, 1e-12);
        loss.backward().unwrap();
        let g = w.grad().unwrap();
        assert_close(g[0], 2.0, 1e-12);
        assert_close(g[1], 4.0, 1e-12);
    }

    #[test]
    fn disconnected_leaf_gets_no_gradient() {
        let w = Tensor::leaf(1, 2, vec![1.0, 2.0], true);
        let u = Tensor::leaf(1, 2, vec![3.0, 4.0], true);
        let loss = u.mul(&u).sum();
        loss.backward().unwrap();
        assert!(w.grad().is_none());
        assert!(u.grad().is_some());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let w = Tensor::leaf(1, 2, vec![1.0, 2.0], true);
        let y = w.mul(&w);
        assert!(matches!(
            y.backward(),
            Err(AutodiffError::NonScalarRoot(1, 2))
        ));
    }

    #[test]
    fn repeated_backward_is_an_error() {
        let w = Tensor::leaf(1, 1, vec![2.0], true);
        let loss = w.square().sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(AutodiffError::BackwardTwice)));
    }

    #[test]
    fn huber_matches_hand_values() {
        // quadratic branch: 0.5 * 0.5^2 = 0.125
        let a = Tensor::leaf(1, 1, vec![0.5], true);
        let b = Tensor::zeros(1, 1);
        assert_close(a.huber(&b, 1.0).value(), 0.125, 1e-15);
        // linear branch: 1 * (2 - 0.5) = 1.5
        let a = Tensor::leaf(1, 1, vec![2.0], true);
        assert_close(a.huber(&b, 1.0).value(), 1.5, 1e-15);
        // zero residual
        let a = Tensor::leaf(1, 3, vec![1.0, 2.0, 3.0], true);
        let b = Tensor::constant(1, 3, vec![1.0, 2.0, 3.0]);
        assert_close(a.huber(&b, 1.0).value(), 0.0, 1e-15);
    }

    #[test]
    fn bce_matches_hand_values() {
        let half = Tensor::leaf(1, 4, vec![0.5; 4], true);
        assert_close(half.bce(&[1.0, 0.0, 1.0, 0.0], 1e-7).value(), (2.0f64).ln(), 1e-12);
        let p = Tensor::leaf(1, 1, vec![0.9], true);
        assert_close(p.bce(&[1.0], 1e-7).value(), -(0.9f64).ln(), 1e-12);
        let near_one = Tensor::leaf(1, 1, vec![1.0 - 1e-7], true);
        assert!(near_one.bce(&[1.0], 1e-7).value() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::leaf(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.1, -0.5], true);
        let y = x.row_softmax();
        for i in 0..2 {
            let s: f64 = (0..3).map(|j| y.get(i, j)).sum();
            assert_close(s, 1.0, 1e-12);
        }
        let shifted = x.add_scalar(7.5).row_softmax();
        for i in 0..2 {
            for j in 0..3 {
                assert_close(y.get(i, j), shifted.get(i, j), 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_empty_rows() {
        let x = Tensor::leaf(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let mask = [true, false, true, false, false, false];
        let y = x.masked_row_softmax(&mask);
        assert_close(y.get(0, 1), 0.0, 0.0);
        assert_close(y.get(0, 0) + y.get(0, 2), 1.0, 1e-12);
        for j in 0..3 {
            assert_close(y.get(1, j), 0.0, 0.0);
        }
    }

    #[test]
    fn pair_outer_matches_dense_oracle() {
        let a = Tensor::leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0], true);
        let b = Tensor::leaf(3, 2, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0], true);
        let z = a.pair_outer(&b);
        assert_eq!((z.rows(), z.cols()), (6, 4));
        for i in 0..2 {
            for j in 0..3 {
                for u in 0..2 {
                    for v in 0..2 {
                        let expect = a.get(i, u) * b.get(j, v);
                        assert_close(z.get(i * 3 + j, u * 2 + v), expect, 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn gather_scatter_round_trip_gradients() {
        let x = Tensor::leaf(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let g = x.gather_rows(&[2, 0, 2]);
        let s = g.scatter_add_rows(&[0, 1, 1], 2);
        let loss = s.sum();
        assert_close(loss.value(), 1.0 + 2.0 + 2.0 * (5.0 + 6.0), 1e-12);
        loss.backward().unwrap();
        let gx = x.grad().unwrap();
        assert_eq!(gx, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn nan_from_op_panics() {
        let x = Tensor::leaf(1, 1, vec![-1.0], true);
        let _ = x.sqrt();
    }
}

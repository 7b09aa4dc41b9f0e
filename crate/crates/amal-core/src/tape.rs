//! Minimal reverse-mode automatic differentiation on dense matrices.
//!
//! A [`Tape`] records a DAG of matrix-valued nodes; every operation computes
//! its value eagerly and, when gradients are enabled, stores a closure that
//! maps the node's output gradient onto its parents. [`Tape::backward`] walks
//! the nodes in reverse construction order, so the reduction order is fixed
//! and runs are bit-for-bit reproducible.
//!
//! Scalars are 1x1 matrices, row vectors are 1xd. The op set is exactly what
//! the policy network, the RFF function evaluations and the GP loss terms
//! need; there is no broadcasting beyond the explicit `broadcast_*` ops.
//!
//! Tapes are single-threaded by design (`Rc` handles). Parallelism happens
//! one level up: each simulated experiment builds and consumes its own tape.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::error::Result;
use crate::linalg;

type Value = Rc<Array2<f64>>;
/// Receives the node's output gradient and the gradient slots of all nodes
/// with smaller index (parents are always earlier in the tape).
type BackFn = Box<dyn Fn(&Array2<f64>, &mut [Option<Array2<f64>>])>;

struct Node {
    value: Value,
    back: Option<BackFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to one node of a tape.
#[derive(Clone)]
pub struct Var {
    tape: Rc<Tape>,
    idx: usize,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    /// Gradient of the backward root with respect to `v`; zeros if the root
    /// does not depend on it.
    pub fn get(&self, v: &Var) -> Array2<f64> {
        self.0[v.idx]
            .clone()
            .unwrap_or_else(|| Array2::zeros(v.value().dim()))
    }
}

fn accumulate(slots: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut slots[idx] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Rc<Self> {
        Rc::new(Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(self: &Rc<Self>, value: Array2<f64>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            back: if self.grad_enabled { back } else { None },
        });
        Var {
            tape: Rc::clone(self),
            idx,
        }
    }

    /// Insert a leaf. Use for parameters and inputs whose gradients are read
    /// after `backward`, and for constants (whose gradients are ignored).
    pub fn leaf(self: &Rc<Self>, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    /// Reverse sweep from `root` (any shape; seeded with ones).
    pub fn backward(&self, root: &Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert!(
            self.grad_enabled,
            "backward on a tape built with gradients disabled"
        );
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.idx] = Some(Array2::ones(nodes[root.idx].value.dim()));
        for idx in (0..=root.idx).rev() {
            let (head, tail) = grads.split_at_mut(idx);
            if let Some(g) = tail[0].as_ref() {
                if let Some(back) = &nodes[idx].back {
                    back(g, head);
                }
            }
        }
        Grads(grads)
    }
}

impl Var {
    pub fn value(&self) -> Value {
        Rc::clone(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn tape(&self) -> Rc<Tape> {
        Rc::clone(&self.tape)
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape, &other.tape),
            "variables belong to different tapes"
        );
    }

    pub fn add(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim());
        let value = &*a + &*b;
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g.clone());
                accumulate(slots, ib, g.clone());
            })),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim());
        let value = &*a - &*b;
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g.clone());
                accumulate(slots, ib, -g);
            })),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim());
        let value = &*a * &*b;
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g * &*b);
                accumulate(slots, ib, g * &*a);
            })),
        )
    }

    /// `self * mul + add`, elementwise with f64 constants.
    pub fn scale_add(&self, mul: f64, add: f64) -> Var {
        let a = self.value();
        let value = a.mapv(|x| x * mul + add);
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| accumulate(slots, ia, g * mul))),
        )
    }

    pub fn scale(&self, mul: f64) -> Var {
        self.scale_add(mul, 0.0)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    /// Add `c` to the diagonal (square input).
    pub fn add_diag(&self, c: f64) -> Var {
        let a = self.value();
        assert_eq!(a.nrows(), a.ncols());
        let mut value = (*a).clone();
        for i in 0..value.nrows() {
            value[[i, i]] += c;
        }
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| accumulate(slots, ia, g.clone()))),
        )
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimensions differ");
        let value = a.dot(&*b);
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g.dot(&b.t()));
                accumulate(slots, ib, a.t().dot(g));
            })),
        )
    }

    pub fn t(&self) -> Var {
        let a = self.value();
        let value = a.t().to_owned();
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g.t().to_owned())
            })),
        )
    }

    pub fn sum_rows(&self) -> Var {
        let a = self.value();
        let n = a.nrows();
        let value = a.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned();
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                let mut out = Array2::zeros((n, g.ncols()));
                for mut row in out.rows_mut() {
                    row.assign(&g.row(0));
                }
                accumulate(slots, ia, out);
            })),
        )
    }

    pub fn sum_cols(&self) -> Var {
        let a = self.value();
        let d = a.ncols();
        let value = a.sum_axis(Axis(1)).insert_axis(Axis(1)).to_owned();
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                let mut out = Array2::zeros((g.nrows(), d));
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    row.fill(g[[i, 0]]);
                }
                accumulate(slots, ia, out);
            })),
        )
    }

    pub fn sum_all(&self) -> Var {
        let a = self.value();
        let dimensions = a.dim();
        let value = Array2::from_elem((1, 1), a.sum());
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, Array2::from_elem(dimensions, g[[0, 0]]));
            })),
        )
    }

    /// Row-broadcast addition: `self (n,d) + row (1,d)`.
    pub fn broadcast_add_row(&self, row: &Var) -> Var {
        self.same_tape(row);
        let (a, r) = (self.value(), row.value());
        assert_eq!(r.nrows(), 1);
        assert_eq!(a.ncols(), r.ncols());
        let value = &*a + &*r;
        let (ia, ir) = (self.idx, row.idx);
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g.clone());
                accumulate(
                    slots,
                    ir,
                    g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned(),
                );
            })),
        )
    }

    /// Column-broadcast addition: `self (n,d) + col (n,1)`.
    pub fn broadcast_add_col(&self, col: &Var) -> Var {
        self.same_tape(col);
        let (a, c) = (self.value(), col.value());
        assert_eq!(c.ncols(), 1);
        assert_eq!(a.nrows(), c.nrows());
        let value = &*a + &*c;
        let (ia, ic) = (self.idx, col.idx);
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g.clone());
                accumulate(
                    slots,
                    ic,
                    g.sum_axis(Axis(1)).insert_axis(Axis(1)).to_owned(),
                );
            })),
        )
    }

    /// Row-broadcast multiplication: `self (n,d) * row (1,d)`.
    pub fn broadcast_mul_row(&self, row: &Var) -> Var {
        self.same_tape(row);
        let (a, r) = (self.value(), row.value());
        assert_eq!(r.nrows(), 1);
        assert_eq!(a.ncols(), r.ncols());
        let value = &*a * &*r;
        let (ia, ir) = (self.idx, row.idx);
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g * &*r);
                accumulate(
                    slots,
                    ir,
                    (g * &*a).sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned(),
                );
            })),
        )
    }

    /// Multiply every entry by a 1x1 variable.
    pub fn scale_by(&self, s: &Var) -> Var {
        self.same_tape(s);
        let (a, sv) = (self.value(), s.value());
        assert_eq!(sv.dim(), (1, 1));
        let value = &*a * sv[[0, 0]];
        let (ia, is) = (self.idx, s.idx);
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g * sv[[0, 0]]);
                accumulate(slots, is, Array2::from_elem((1, 1), (g * &*a).sum()));
            })),
        )
    }

    pub fn tanh(&self) -> Var {
        let a = self.value();
        let value = a.mapv(f64::tanh);
        let y = Rc::new(value.clone());
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, g * &y.mapv(|t| 1.0 - t * t));
            })),
        )
    }

    pub fn exp(&self) -> Var {
        let a = self.value();
        let value = a.mapv(f64::exp);
        let y = Rc::new(value.clone());
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| accumulate(slots, ia, g * &*y))),
        )
    }

    pub fn cos(&self) -> Var {
        let a = self.value();
        let value = a.mapv(f64::cos);
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                accumulate(slots, ia, -g * &a.mapv(f64::sin));
            })),
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Var {
        let a = self.value();
        let mut value = (*a).clone();
        for mut row in value.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = Rc::new(value.clone());
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                let mut out = g * &*y;
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    let dot: f64 = row.sum();
                    let yr = y.row(i);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v -= dot * yr[j];
                    }
                }
                accumulate(slots, ia, out);
            })),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let a = self.value();
        assert!(start + len <= a.ncols());
        let value = a.slice(ndarray::s![.., start..start + len]).to_owned();
        let full = a.dim();
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| {
                let mut out = Array2::zeros(full);
                out.slice_mut(ndarray::s![.., start..start + len]).assign(g);
                accumulate(slots, ia, out);
            })),
        )
    }

    /// Custom unary op: caller supplies the value and a vector-Jacobian
    /// product mapping the output gradient to this input's gradient.
    pub fn unary_from_vjp(
        &self,
        value: Array2<f64>,
        vjp: Box<dyn Fn(&Array2<f64>) -> Array2<f64>>,
    ) -> Var {
        let ia = self.idx;
        self.tape.push(
            value,
            Some(Box::new(move |g, slots| accumulate(slots, ia, vjp(g)))),
        )
    }
}

/// Vertical stack. All parts must share a column count.
pub fn concat_rows(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let tape = parts[0].tape();
    let values: Vec<Value> = parts.iter().map(|p| p.value()).collect();
    let cols = values[0].ncols();
    let total: usize = values.iter().map(|v| v.nrows()).sum();
    let mut value = Array2::zeros((total, cols));
    let mut offset = 0;
    let mut spans = Vec::with_capacity(parts.len());
    for (p, v) in parts.iter().zip(&values) {
        assert_eq!(v.ncols(), cols);
        value
            .slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
            .assign(v);
        spans.push((p.idx, offset, v.nrows()));
        offset += v.nrows();
    }
    tape.push(
        value,
        Some(Box::new(move |g, slots| {
            for &(idx, start, rows) in &spans {
                accumulate(
                    slots,
                    idx,
                    g.slice(ndarray::s![start..start + rows, ..]).to_owned(),
                );
            }
        })),
    )
}

/// Horizontal stack. All parts must share a row count.
pub fn concat_cols(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let tape = parts[0].tape();
    let values: Vec<Value> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].nrows();
    let total: usize = values.iter().map(|v| v.ncols()).sum();
    let mut value = Array2::zeros((rows, total));
    let mut offset = 0;
    let mut spans = Vec::with_capacity(parts.len());
    for (p, v) in parts.iter().zip(&values) {
        assert_eq!(v.nrows(), rows);
        value
            .slice_mut(ndarray::s![.., offset..offset + v.ncols()])
            .assign(v);
        spans.push((p.idx, offset, v.ncols()));
        offset += v.ncols();
    }
    tape.push(
        value,
        Some(Box::new(move |g, slots| {
            for &(idx, start, cols) in &spans {
                accumulate(
                    slots,
                    idx,
                    g.slice(ndarray::s![.., start..start + cols]).to_owned(),
                );
            }
        })),
    )
}

/// Layer normalization over the feature (column) axis, with learnable gain
/// and bias rows.
pub fn layernorm(x: &Var, gain: &Var, bias: &Var) -> Var {
    const EPS: f64 = 1e-5;
    let tape = x.tape();
    let xv = x.value();
    let (n, d) = xv.dim();
    let gv = gain.value();
    let bv = bias.value();
    assert_eq!(gv.dim(), (1, d));
    assert_eq!(bv.dim(), (1, d));

    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array2::zeros((n, 1));
    for i in 0..n {
        let row = xv.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + EPS).sqrt();
        inv_std[[i, 0]] = is;
        for j in 0..d {
            xhat[[i, j]] = (row[j] - mean) * is;
        }
    }
    let value = &xhat * &*gv + &*bv;
    let xhat = Rc::new(xhat);
    let inv_std = Rc::new(inv_std);
    let (ix, ig, ib) = (x.idx, gain.idx, bias.idx);
    tape.push(
        value,
        Some(Box::new(move |g, slots| {
            accumulate(
                slots,
                ib,
                g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned(),
            );
            accumulate(
                slots,
                ig,
                (g * &*xhat)
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0))
                    .to_owned(),
            );
            let gy = g * &*gv;
            let mut gx = Array2::zeros(gy.dim());
            let d_f = gy.ncols() as f64;
            for i in 0..gy.nrows() {
                let gyr = gy.row(i);
                let xr = xhat.row(i);
                let m1 = gyr.sum() / d_f;
                let m2 = gyr
                    .iter()
                    .zip(xr.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / d_f;
                let is = inv_std[[i, 0]];
                for j in 0..gy.ncols() {
                    gx[[i, j]] = (gyr[j] - m1 - xr[j] * m2) * is;
                }
            }
            accumulate(slots, ix, gx);
        })),
    )
}

/// Inverse and log-determinant of a symmetric positive-definite variable,
/// sharing a single Cholesky factorization (jitter ladder from `linalg`).
pub fn psd_inv_logdet(a: &Var, context: &str) -> Result<(Var, Var)> {
    let tape = a.tape();
    let av = a.value();
    let factor = linalg::cholesky(av.view(), context)?;
    let inv = factor.inverse();
    let logdet = factor.log_det();
    let inv_rc = Rc::new(inv.clone());

    let ia = a.idx;
    let inv_for_inv = Rc::clone(&inv_rc);
    let inv_var = tape.push(
        inv,
        Some(Box::new(move |g, slots| {
            let it = inv_for_inv.t();
            accumulate(slots, ia, -it.dot(g).dot(&it));
        })),
    );
    let inv_for_det = Rc::clone(&inv_rc);
    let logdet_var = tape.push(
        Array2::from_elem((1, 1), logdet),
        Some(Box::new(move |g, slots| {
            accumulate(slots, ia, inv_for_det.t().to_owned() * g[[0, 0]]);
        })),
    );
    Ok((inv_var, logdet_var))
}

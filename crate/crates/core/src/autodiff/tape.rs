use std::cell::RefCell;

use rand::Rng;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::{Error, Result};

/// Role of a leaf node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable parameter.
    Weight,
    /// Differentiable model input, e.g. a treatment trajectory.
    Input,
    /// Never differentiated.
    Constant,
}

#[derive(Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    /// Element-wise map with its local derivative saved at forward time.
    Unary(usize, Tensor),
    SumAll(usize),
    SumAxis(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    VStack(Vec<usize>),
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded; build one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`; disconnected nodes get zeros.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

fn as2(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [] => (1, 1),
        [n] => (1, n),
        [r, c] => (r, c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

/// Shape of `a ∘ b` under rank-2 broadcasting (size-1 axes stretch).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let mismatch = || Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    };
    if a.len() > 2 || b.len() > 2 {
        return Err(mismatch());
    }
    let (ar, ac) = as2(a);
    let (br, bc) = as2(b);
    let dim = |x: usize, y: usize| -> Result<usize> {
        if x == y || y == 1 {
            Ok(x)
        } else if x == 1 {
            Ok(y)
        } else {
            Err(mismatch())
        }
    };
    Ok(vec![dim(ar, br)?, dim(ac, bc)?])
}

fn broadcast_apply(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape.to_vec(), data).expect("same shape");
    }
    let (r, c) = as2(out_shape);
    let (ar, ac) = as2(a.shape());
    let (br, bc) = as2(b.shape());
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i } * ac;
        let ib = if br == 1 { 0 } else { i } * bc;
        for j in 0..c {
            let x = ad[ia + if ac == 1 { 0 } else { j }];
            let y = bd[ib + if bc == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Tensor::new(out_shape.to_vec(), data).expect("broadcast shape")
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = as2(g.shape());
    let (tr, tc) = as2(shape);
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g.data()[i * c + j];
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn leaf(&self, value: Tensor, kind: LeafKind) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf(kind),
            requires_grad: kind != LeafKind::Constant,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn weight(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, LeafKind::Weight)
    }

    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, LeafKind::Constant)
    }

    pub fn leaf_kind(&self, var: Var<'_>) -> Option<LeafKind> {
        match self.nodes.borrow()[var.id].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    /// Concatenates rank-2 variables along columns.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            (Tensor::hcat(&vals)?, parts.iter().any(|p| nodes[p.id].requires_grad))
        };
        self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg, "concat")
    }

    /// Stacks rank-2 variables along rows.
    pub fn vstack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            (Tensor::vcat(&vals)?, parts.iter().any(|p| nodes[p.id].requires_grad))
        };
        self.push(value, Op::VStack(parts.iter().map(|p| p.id).collect()), rg, "vstack")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward (loss must be scalar)",
                left: shapes[loss.id].clone(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(&shapes[loss.id], 1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = as2(av.shape());
                    let n = bv.cols();
                    if nodes[*a].requires_grad {
                        let ga = matmul_nt(g.data(), bv.data(), m, n, k);
                        accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    }
                    if nodes[*b].requires_grad {
                        let gb = matmul_tn(av.data(), g.data(), m, k, n);
                        accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    accumulate(&mut grads, *a, reduce_to(&g, nodes[*a].value.shape()));
                    if nodes[*b].requires_grad {
                        let gb = reduce_to(&g, nodes[*b].value.shape());
                        accumulate(&mut grads, *b, if sign < 0.0 { gb.scaled(-1.0) } else { gb });
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        let full = broadcast_apply(&g, bv, g.shape(), |x, y| x * y);
                        accumulate(&mut grads, *a, reduce_to(&full, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let full = broadcast_apply(&g, av, g.shape(), |x, y| x * y);
                        accumulate(&mut grads, *b, reduce_to(&full, bv.shape()));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scaled(*c)),
                Op::Shift(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Unary(a, deriv) => {
                    let data = g.data().iter().zip(deriv.data()).map(|(x, d)| x * d).collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::SumAll(a) => {
                    accumulate(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), g.item()));
                }
                Op::SumAxis(a) => {
                    let shape = nodes[*a].value.shape();
                    let ones = Tensor::full(shape, 1.0);
                    accumulate(&mut grads, *a, broadcast_apply(&ones, &g, shape, |x, y| x * y));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = nodes[*p].value.cols();
                        if nodes[*p].requires_grad {
                            accumulate(&mut grads, *p, g.slice_cols(start, start + w)?);
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[*a].value;
                    let (r, c) = as2(src.shape());
                    let w = g.cols();
                    let mut full = vec![0.0; r * c];
                    for i in 0..r {
                        full[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(src.shape().to_vec(), full)?);
                }
                Op::SliceRows(a, start) => {
                    let src = &nodes[*a].value;
                    let c = src.cols();
                    let mut full = vec![0.0; src.len()];
                    full[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::new(src.shape().to_vec(), full)?);
                }
                Op::VStack(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = nodes[*p].value.rows();
                        if nodes[*p].requires_grad {
                            accumulate(&mut grads, *p, g.slice_rows(start, start + r)?);
                        }
                        start += r;
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?),
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// Copy of the node's value.
    pub fn value(self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The value of a one-element node.
    pub fn item(self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            (
                broadcast_apply(a, b, &shape, f),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        self.tape.push(value, make(self.id, other.id), rg, name)
    }

    /// Element-wise sum with rank-2 broadcasting.
    #[allow(clippy::should_implement_trait)] // fallible, so not an operator
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not an operator
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    /// Element-wise product with rank-2 broadcasting.
    #[allow(clippy::should_implement_trait)] // fallible, so not an operator
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (m, k) = a.dims2("matmul")?;
            let (k2, n) = b.dims2("matmul")?;
            if k != k2 {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            (
                Tensor::matrix(m, n, matmul(a.data(), b.data(), m, k, n))?,
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        self.tape.push(value, Op::MatMul(self.id, other.id), rg, "matmul")
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let value = self.value().scaled(c);
        self.tape.push(value, Op::Scale(self.id, c), self.requires_grad(), "scale")
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let value = self.value().map(|v| v + c);
        self.tape.push(value, Op::Shift(self.id), self.requires_grad(), "add_scalar")
    }

    /// Element-wise map; `f` returns the value and its derivative.
    pub fn map(self, name: &'static str, f: impl Fn(f64) -> (f64, f64)) -> Result<Var<'t>> {
        let (value, deriv) = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            let (vals, ders): (Vec<f64>, Vec<f64>) = src.data().iter().map(|&x| f(x)).unzip();
            (
                Tensor::new(src.shape().to_vec(), vals)?,
                Tensor::new(src.shape().to_vec(), ders)?,
            )
        };
        self.tape.push(value, Op::Unary(self.id, deriv), self.requires_grad(), name)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.map("tanh", |x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.map("sigmoid", |x| {
            let s = 1.0 / (1.0 + (-x).exp());
            (s, s * (1.0 - s))
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.map("relu", |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.map("square", |x| (x * x, 2.0 * x))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.map("exp", |x| {
            let e = x.exp();
            (e, e)
        })
    }

    /// Sum of all elements (scalar).
    pub fn sum(self) -> Result<Var<'t>> {
        let s = Tensor::scalar(self.value().sum());
        self.tape.push(s, Op::SumAll(self.id), self.requires_grad(), "sum")
    }

    /// Mean of all elements (scalar).
    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum along `axis` of a rank-2 tensor, keeping the axis with size 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2("sum_axis")?;
        let d = v.data();
        let out = match axis {
            0 => Tensor::matrix(1, c, (0..c).map(|j| (0..r).map(|i| d[i * c + j]).sum()).collect())?,
            1 => Tensor::matrix(r, 1, (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect())?,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "sum_axis",
                    left: v.shape().to_vec(),
                    right: vec![axis],
                })
            }
        };
        self.tape.push(out, Op::SumAxis(self.id), self.requires_grad(), "sum_axis")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.get(axis).ok_or_else(|| Error::ShapeMismatch {
            op: "mean_axis",
            left: shape.clone(),
            right: vec![axis],
        })?;
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value().slice_cols(start, end)?;
        self.tape.push(out, Op::SliceCols(self.id, start), self.requires_grad(), "slice")
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value().slice_rows(start, end)?;
        self.tape.push(out, Op::SliceRows(self.id, start), self.requires_grad(), "slice_rows")
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        self.tape.push(out, Op::Transpose(self.id), self.requires_grad(), "transpose")
    }

    /// Multiplies by a fixed mask (recorded with the mask as local derivative).
    pub fn mask(self, mask: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                left: v.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let data = v.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.tape
            .push(out, Op::Unary(self.id, mask.clone()), self.requires_grad(), "dropout")
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// rescales survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Result<Var<'t>> {
        if p == 0.0 {
            return Ok(self);
        }
        let shape = self.shape();
        let mask = dropout_mask(&shape, p, |_| rng.random::<f64>())?;
        self.mask(&mask)
    }

    /// Inverted dropout where row `i` draws its mask from `rngs[i]`.
    pub fn dropout_rows<R: Rng>(self, p: f64, rngs: &mut [R]) -> Result<Var<'t>> {
        if p == 0.0 {
            return Ok(self);
        }
        let shape = self.shape();
        let (r, _) = as2(&shape);
        if rngs.len() != r {
            return Err(Error::ShapeMismatch {
                op: "dropout_rows",
                left: shape,
                right: vec![rngs.len()],
            });
        }
        let mask = dropout_mask(&shape, p, |i| rngs[i].random::<f64>())?;
        self.mask(&mask)
    }
}

/// `uniform(row)` draws the next U(0,1) variate for that row.
fn dropout_mask(shape: &[usize], p: f64, mut uniform: impl FnMut(usize) -> f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {p}")));
    }
    let keep = 1.0 / (1.0 - p);
    let (r, c) = as2(shape);
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for _ in 0..c {
            data.push(if uniform(i) < p { 0.0 } else { keep });
        }
    }
    Tensor::new(shape.to_vec(), data)
}

//! Dense tensors with reverse-mode differentiation.
//!
//! Every operation records a backward closure on the node it creates. Graphs
//! are built per training step and dropped afterwards; nodes are reference
//! counted and not shared across threads.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice, Zip};

use crate::error::{Error, Result};

pub type Array = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Array, &Array, &[Tensor]) -> Vec<Option<Array>>>;

struct Node {
    value: Array,
    grad: RefCell<Option<Array>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A node in a differentiable computation.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn standard(a: Array) -> Array {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn resolve_axis(ndim: usize, axis: isize) -> Result<usize> {
    let ax = if axis < 0 { ndim as isize + axis } else { axis };
    if ax < 0 || ax as usize >= ndim {
        return Err(Error::InvalidInput(format!(
            "axis {axis} out of range for rank {ndim}"
        )));
    }
    Ok(ax as usize)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(mut g: Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn as2(a: &Array) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array")
}

fn mat_mul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> ndarray::Array2<f64> {
    let mut out = ndarray::Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

impl Tensor {
    fn make(value: Array, parents: Vec<Tensor>, backward: Option<BackwardFn>) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            value: standard(value),
            grad: RefCell::new(None),
            parents,
            backward,
            requires_grad,
        }))
    }

    fn op<F>(value: Array, parents: Vec<Tensor>, backward: F) -> Tensor
    where
        F: Fn(&Array, &Array, &[Tensor]) -> Vec<Option<Array>> + 'static,
    {
        Tensor::make(value, parents, Some(Box::new(backward)))
    }

    /// A value that does not receive gradients.
    pub fn constant(value: Array) -> Tensor {
        Tensor::make(value, Vec::new(), None)
    }

    /// A leaf that accumulates gradients during [`Tensor::backward`].
    pub fn leaf(value: Array) -> Tensor {
        Tensor(Rc::new(Node {
            value: standard(value),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Tensor::constant(
            Array::from_shape_vec(IxDyn(shape), data).expect("checked length"),
        ))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(Array::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(Array::zeros(IxDyn(shape)))
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Gradient accumulated on a leaf. Intermediate gradients are released
    /// during the backward pass.
    pub fn grad(&self) -> Option<Array> {
        self.0.grad.borrow().clone()
    }

    /// Detached copy of the value.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    /// Runs reverse-mode differentiation from a scalar output.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        *self.0.grad.borrow_mut() = Some(Array::ones(self.0.value.raw_dim()));
        for node in order.iter().rev() {
            let Some(backward) = &node.0.backward else {
                continue;
            };
            let Some(g) = node.0.grad.borrow_mut().take() else {
                continue;
            };
            let grads = backward(&g, &node.0.value, &node.0.parents);
            for (parent, pg) in node.0.parents.iter().zip(grads) {
                let Some(pg) = pg else { continue };
                if !parent.0.requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), parent.shape());
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => *acc += &pg,
                    None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.0.requires_grad && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    // ---- elementwise binary ops (numpy-style broadcasting) ----

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        forward: impl Fn(&Array, &Array) -> Array,
        backward: impl Fn(&Array, &Array, &Array, &Array) -> (Array, Array) + 'static,
    ) -> Result<Tensor> {
        if broadcast_shape(self.shape(), other.shape()).is_none() {
            return Err(Error::shape(name, self.shape(), other.shape()));
        }
        let value = forward(self.value(), other.value());
        Ok(Tensor::op(value, vec![self.clone(), other.clone()], move |g, out, ps| {
            let (a, b) = (ps[0].value(), ps[1].value());
            let (ga, gb) = backward(g, out, a, b);
            vec![
                ps[0].requires_grad().then(|| reduce_to(ga, a.shape())),
                ps[1].requires_grad().then(|| reduce_to(gb, b.shape())),
            ]
        }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |g, _, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |g, _, a, b| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |g, out, _, b| {
                let ga = g / b;
                let gb = -(&ga * out);
                (ga, gb)
            },
        )
    }

    // ---- elementwise unary ops ----

    fn unary(
        &self,
        value: Array,
        local_grad: impl Fn(&Array, &Array, &Array) -> Array + 'static,
    ) -> Tensor {
        Tensor::op(value, vec![self.clone()], move |g, out, ps| {
            vec![Some(local_grad(g, out, ps[0].value()))]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(-self.value(), |g, _, _| -g)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(self.value() * c, move |g, _, _| g * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(self.value() + c, |g, _, _| g.clone())
    }

    pub fn exp(&self) -> Tensor {
        self.unary(self.value().mapv(f64::exp), |g, out, _| g * out)
    }

    pub fn log(&self) -> Tensor {
        self.unary(self.value().mapv(f64::ln), |g, _, x| g / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(self.value().mapv(f64::sqrt), |g, out, _| g / &(out * 2.0))
    }

    pub fn square(&self) -> Tensor {
        self.unary(self.value().mapv(|v| v * v), |g, _, x| g * &(x * 2.0))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(self.value().mapv(f64::abs), |g, _, x| {
            let mut out = g.clone();
            Zip::from(&mut out).and(x).for_each(|o, &x| {
                *o *= if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            out
        })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(self.value().mapv(|v| v.max(0.0)), |g, _, x| {
            let mut out = g.clone();
            Zip::from(&mut out)
                .and(x)
                .for_each(|o, &x| *o = if x > 0.0 { *o } else { 0.0 });
            out
        })
    }

    /// Values below `floor` are replaced by `floor` and receive no gradient.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary(self.value().mapv(|v| v.max(floor)), move |g, _, x| {
            let mut out = g.clone();
            Zip::from(&mut out)
                .and(x)
                .for_each(|o, &x| *o = if x >= floor { *o } else { 0.0 });
            out
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let value = self.value().mapv(|x| {
            let u = C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.unary(value, |g, _, x| {
            let mut out = g.clone();
            Zip::from(&mut out).and(x).for_each(|o, &x| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                *o *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            });
            out
        })
    }

    // ---- linear algebra ----

    /// Matrix product over the last two axes. `other` is either a plain
    /// matrix shared across all leading dims of `self`, or has exactly the
    /// same leading (batch) dims.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let err = || Error::shape("matmul", sa, sb);
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let a2 = self.value().as_standard_layout().into_shape_with_order((rows, k)).unwrap();
            let out = mat_mul(a2.view(), as2(other.value()));
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = n;
            let out = out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
            return Ok(Tensor::op(out, vec![self.clone(), other.clone()], move |g, _, ps| {
                let (a, b) = (ps[0].value(), ps[1].value());
                let g2 = g.as_standard_layout().into_shape_with_order((rows, n)).unwrap();
                let ga = ps[0].requires_grad().then(|| {
                    mat_mul(g2.view(), as2(b).t())
                        .into_dyn()
                        .into_shape_with_order(a.raw_dim())
                        .unwrap()
                });
                let gb = ps[1].requires_grad().then(|| {
                    let a2 = a.as_standard_layout().into_shape_with_order((rows, k)).unwrap();
                    mat_mul(a2.t(), g2.view()).into_dyn()
                });
                vec![ga, gb]
            }));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let a3 = self.value().as_standard_layout().into_shape_with_order((batch, m, k)).unwrap();
        let b3 = other.value().as_standard_layout().into_shape_with_order((batch, k, n)).unwrap();
        let mut out = ndarray::Array3::zeros((batch, m, n));
        for i in 0..batch {
            general_mat_mul(
                1.0,
                &a3.index_axis(Axis(0), i),
                &b3.index_axis(Axis(0), i),
                0.0,
                &mut out.index_axis_mut(Axis(0), i),
            );
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        Ok(Tensor::op(out, vec![self.clone(), other.clone()], move |g, _, ps| {
            let (a, b) = (ps[0].value(), ps[1].value());
            let a3 = a.as_standard_layout().into_shape_with_order((batch, m, k)).unwrap();
            let b3 = b.as_standard_layout().into_shape_with_order((batch, k, n)).unwrap();
            let g3 = g.as_standard_layout().into_shape_with_order((batch, m, n)).unwrap();
            let ga = ps[0].requires_grad().then(|| {
                let mut ga = ndarray::Array3::zeros((batch, m, k));
                for i in 0..batch {
                    general_mat_mul(
                        1.0,
                        &g3.index_axis(Axis(0), i),
                        &b3.index_axis(Axis(0), i).t(),
                        0.0,
                        &mut ga.index_axis_mut(Axis(0), i),
                    );
                }
                ga.into_dyn().into_shape_with_order(a.raw_dim()).unwrap()
            });
            let gb = ps[1].requires_grad().then(|| {
                let mut gb = ndarray::Array3::zeros((batch, k, n));
                for i in 0..batch {
                    general_mat_mul(
                        1.0,
                        &a3.index_axis(Axis(0), i).t(),
                        &g3.index_axis(Axis(0), i),
                        0.0,
                        &mut gb.index_axis_mut(Axis(0), i),
                    );
                }
                gb.into_dyn().into_shape_with_order(b.raw_dim()).unwrap()
            });
            vec![ga, gb]
        }))
    }

    // ---- shape manipulation ----

    /// Reorders axes; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut check = axes.to_vec();
        check.sort_unstable();
        if check != (0..nd).collect::<Vec<_>>() {
            return Err(Error::shape("permute", self.shape(), axes));
        }
        let value = self.value().view().permuted_axes(IxDyn(axes)).to_owned();
        let mut inverse = vec![0; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Tensor::op(value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.view().permuted_axes(IxDyn(&inverse)).to_owned())]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        let value = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        Ok(Tensor::op(value, vec![self.clone()], |g, _, ps| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(ps[0].value().raw_dim())
                    .unwrap(),
            )]
        }))
    }

    /// Inserts a size-1 axis.
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor> {
        let mut shape = self.shape().to_vec();
        if axis > shape.len() {
            return Err(Error::InvalidInput(format!("cannot unsqueeze axis {axis}")));
        }
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    pub fn concat(parts: &[Tensor], axis: isize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let ax = resolve_axis(first.ndim(), axis)?;
        for p in &parts[1..] {
            let ok = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == ax || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(ax), &views).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[ax]).collect();
        Ok(Tensor::op(value, parts.to_vec(), move |g, _, ps| {
            let mut start = 0;
            sizes
                .iter()
                .zip(ps)
                .map(|(&len, p)| {
                    let piece = p.requires_grad().then(|| {
                        g.slice_axis(Axis(ax), Slice::from(start..start + len))
                            .to_owned()
                    });
                    start += len;
                    piece
                })
                .collect()
        }))
    }

    /// The half-open range `start..end` along one axis.
    pub fn slice(&self, axis: isize, start: usize, end: usize) -> Result<Tensor> {
        let ax = resolve_axis(self.ndim(), axis)?;
        if start > end || end > self.shape()[ax] {
            return Err(Error::InvalidInput(format!(
                "slice {start}..{end} out of range for axis of length {}",
                self.shape()[ax]
            )));
        }
        let value = self
            .value()
            .slice_axis(Axis(ax), Slice::from(start..end))
            .to_owned();
        Ok(Tensor::op(value, vec![self.clone()], move |g, _, ps| {
            let mut full = Array::zeros(ps[0].value().raw_dim());
            full.slice_axis_mut(Axis(ax), Slice::from(start..end))
                .assign(g);
            vec![Some(full)]
        }))
    }

    /// Gathers entries along an axis; repeated indices accumulate gradient.
    pub fn index_select(&self, axis: isize, indices: &[usize]) -> Result<Tensor> {
        let ax = resolve_axis(self.ndim(), axis)?;
        let len = self.shape()[ax];
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::InvalidInput(format!(
                "index {bad} out of range for axis of length {len}"
            )));
        }
        let value = self.value().select(Axis(ax), indices);
        let indices = indices.to_vec();
        Ok(Tensor::op(value, vec![self.clone()], move |g, _, ps| {
            let mut full = Array::zeros(ps[0].value().raw_dim());
            for (j, &i) in indices.iter().enumerate() {
                let mut dst = full.index_axis_mut(Axis(ax), i);
                dst += &g.index_axis(Axis(ax), j);
            }
            vec![Some(full)]
        }))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let value = Array::from_elem(IxDyn(&[]), self.value().sum());
        Tensor::op(value, vec![self.clone()], |g, _, ps| {
            vec![Some(Array::from_elem(ps[0].value().raw_dim(), g.sum()))]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = resolve_axis(self.ndim(), axis)?;
        let mut value = self.value().sum_axis(Axis(ax));
        if keepdim {
            value = value.insert_axis(Axis(ax));
        }
        Ok(Tensor::op(value, vec![self.clone()], move |g, _, ps| {
            let g = if keepdim {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(ax))
            };
            let full = g.broadcast(ps[0].value().raw_dim()).unwrap().to_owned();
            vec![Some(full)]
        }))
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = resolve_axis(self.ndim(), axis)?;
        let n = self.shape()[ax].max(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / n))
    }

    /// Maximum along an axis. The gradient goes to the first maximal entry.
    pub fn max_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        self.extreme_axis(axis, keepdim, |cand, best| cand > best)
    }

    /// Minimum along an axis. The gradient goes to the first minimal entry.
    pub fn min_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        self.extreme_axis(axis, keepdim, |cand, best| cand < best)
    }

    fn extreme_axis(
        &self,
        axis: isize,
        keepdim: bool,
        better: fn(f64, f64) -> bool,
    ) -> Result<Tensor> {
        let ax = resolve_axis(self.ndim(), axis)?;
        if self.shape()[ax] == 0 {
            return Err(Error::InvalidInput("reduction over an empty axis".into()));
        }
        let lanes = self.value().lanes(Axis(ax));
        let mut arg = Vec::with_capacity(lanes.clone().into_iter().len());
        let mut vals = Vec::with_capacity(arg.capacity());
        for lane in lanes {
            let (mut bi, mut bv) = (0, lane[0]);
            for (i, &v) in lane.iter().enumerate().skip(1) {
                if better(v, bv) {
                    bi = i;
                    bv = v;
                }
            }
            arg.push(bi);
            vals.push(bv);
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[ax] = 1;
        } else {
            shape.remove(ax);
        }
        let value = Array::from_shape_vec(IxDyn(&shape), vals).unwrap();
        Ok(Tensor::op(value, vec![self.clone()], move |g, _, ps| {
            let mut full = Array::zeros(ps[0].value().raw_dim());
            for ((mut lane, &i), &gv) in full.lanes_mut(Axis(ax)).into_iter().zip(&arg).zip(g.iter())
            {
                lane[i] += gv;
            }
            vec![Some(full)]
        }))
    }

    pub fn softmax(&self, axis: isize) -> Result<Tensor> {
        let ax = resolve_axis(self.ndim(), axis)?;
        let mut value = self.value().clone();
        for mut lane in value.lanes_mut(Axis(ax)) {
            let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane /= s;
        }
        Ok(Tensor::op(value, vec![self.clone()], move |g, out, _| {
            let dot = (g * out).sum_axis(Axis(ax)).insert_axis(Axis(ax));
            vec![Some(out * &(g - &dot))]
        }))
    }

    pub fn log_softmax(&self, axis: isize) -> Result<Tensor> {
        let ax = resolve_axis(self.ndim(), axis)?;
        let mut value = self.value().clone();
        for mut lane in value.lanes_mut(Axis(ax)) {
            let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lane -= lse;
        }
        Ok(Tensor::op(value, vec![self.clone()], move |g, out, _| {
            let gsum = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            vec![Some(g - &(out.mapv(f64::exp) * &gsum))]
        }))
    }
}

/// Mean negative log-likelihood of integer labels under row-wise logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", shape, &[labels.len()]));
    }
    let classes = shape[1];
    let mut onehot = Array::zeros(IxDyn(shape));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data {
                index: i,
                msg: format!("label {l} out of range for {classes} classes"),
            });
        }
        onehot[[i, l]] = 1.0;
    }
    let picked = logits.log_softmax(-1)?.mul(&Tensor::constant(onehot))?;
    Ok(picked.sum().mul_scalar(-1.0 / labels.len().max(1) as f64))
}

/// Rank-3 view helper used by callers that build batched inputs.
pub fn to_array3(a: &Array) -> Result<ndarray::Array3<f64>> {
    a.clone()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape("to_array3", a.shape(), &[0, 0, 0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn t(a: Array) -> Tensor {
        Tensor::leaf(a)
    }

    #[test]
    fn constant_row_softmax_is_uniform() {
        let x = Tensor::constant(Array::from_elem(IxDyn(&[2, 5]), 3.7));
        let y = x.softmax(-1).unwrap();
        for v in y.value() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].into_dyn();
        let eye = ndarray::Array2::<f64>::eye(2).into_dyn();
        let out = Tensor::constant(eye)
            .matmul(&Tensor::constant(a.clone()))
            .unwrap();
        assert_eq!(out.value(), &a);
    }

    #[test]
    fn square_sum_gradient() {
        let x = t(array![1.0, 2.0, 3.0].into_dyn());
        let y = x.square().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), array![2.0, 4.0, 6.0].into_dyn());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        assert!(a.add(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let x = t(array![[1.0, 5.0, 5.0], [2.0, 2.0, 2.0]].into_dyn());
        let m = x.max_axis(-1, false).unwrap();
        assert_eq!(m.value(), &array![5.0, 2.0].into_dyn());
        m.sum().backward().unwrap();
        assert_eq!(
            x.grad().unwrap(),
            array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]].into_dyn()
        );
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let a = t(Array::from_elem(IxDyn(&[2, 3, 4]), 1.0));
        let b = t(Array::from_elem(IxDyn(&[3, 1]), 2.0));
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), Array::from_elem(IxDyn(&[3, 1]), 8.0));
        assert_eq!(a.grad().unwrap(), Array::from_elem(IxDyn(&[2, 3, 4]), 2.0));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = array![[0.3, -1.2, 2.0, 0.0]].into_dyn();
        let a = Tensor::constant(x.clone()).softmax(-1).unwrap();
        let b = Tensor::constant(x + 17.5).softmax(-1).unwrap();
        assert_abs_diff_eq!(a.value().sum(), 1.0, epsilon = 1e-12);
        for (u, v) in a.value().iter().zip(b.value()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_confident_correct_logits_is_small() {
        let logits = Tensor::constant(array![[10.0, -10.0], [-10.0, 10.0]].into_dyn());
        let loss = cross_entropy(&logits, &[0, 1]).unwrap().item();
        assert!(loss < 1e-8);
        assert!(cross_entropy(&logits, &[0, 2]).is_err());
    }
}

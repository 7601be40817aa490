//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, a backward rule. Backward rules of the built-in
//! operations are themselves written with tape operations, so running
//! [`Tape::grad`] with `create_graph = true` records the gradient
//! computation and the result can be differentiated again. This is what the
//! gradient penalty needs.
//!
//! Operations supporting a second differentiation (the discriminator path):
//! add, sub, mul, div, scale, add_scalar, neg, exp, log, powf, sigmoid,
//! log_sigmoid, elu, clamp_min, sum, mean, sum_to, expand_to, sum_axis,
//! mean_axis, reshape, transpose, slice, pad_slice, concat, matmul and its
//! transposed variants, softmax, log_softmax, layer_norm_stats.
//!
//! Operations built with [`Tape::custom`] (embedding lookup, fused
//! cross-entropy, fused causal linear attention) have numeric backward rules
//! and refuse `create_graph`.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::array::{split_axis, Tensor};
use super::kernels;
use crate::error::{contract_err, shape_err, Error, Result};

type BackwardFn = dyn for<'t> Fn(&BackwardCtx<'t>) -> Result<Vec<Option<Var<'t>>>>;

struct OpRecord {
    name: &'static str,
    inputs: Vec<usize>,
    higher_order: bool,
    backward: Box<BackwardFn>,
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Option<Rc<OpRecord>>,
}

/// Arguments handed to a backward rule.
pub struct BackwardCtx<'t> {
    pub tape: &'t Tape,
    pub inputs: Vec<Var<'t>>,
    pub out: Var<'t>,
    pub grad: Var<'t>,
}

/// Ordered record of operations. Node ids are positions on the tape, so the
/// inputs of an operation always precede it.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    backward_done: Cell<bool>,
    grads: RefCell<Vec<Option<Rc<Tensor>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

struct RecordingGuard<'a> {
    flag: &'a Cell<bool>,
    prev: bool,
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        self.flag.set(self.prev);
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            backward_done: Cell::new(false),
            grads: RefCell::new(Vec::new()),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Rc<Tensor>, requires_grad: bool, op: Option<Rc<OpRecord>>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), false, None)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), true, None)
    }

    /// A leaf sharing storage with a parameter buffer.
    pub fn shared_leaf(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_node(value, requires_grad, None)
    }

    fn record<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        higher_order: bool,
        backward: impl for<'s> Fn(&BackwardCtx<'s>) -> Result<Vec<Option<Var<'s>>>> + 'static,
    ) -> Result<Var<'t>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.recording.get() && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let op = requires_grad.then(|| {
            Rc::new(OpRecord {
                name,
                inputs: inputs.iter().map(|v| v.id).collect(),
                higher_order,
                backward: Box::new(backward),
            })
        });
        Ok(self.push_node(Rc::new(value), requires_grad, op))
    }

    /// Records an operation with a numeric backward rule. The rule receives
    /// the input values, the output value and the output gradient, and returns
    /// one optional gradient per input. Such operations cannot be
    /// differentiated twice.
    pub fn custom<'t, F>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: F,
    ) -> Result<Var<'t>>
    where
        F: Fn(&[Rc<Tensor>], &Tensor, &Tensor) -> Result<Vec<Option<Tensor>>> + 'static,
    {
        self.record(name, inputs, value, false, move |ctx| {
            let values: Vec<Rc<Tensor>> = ctx.inputs.iter().map(|v| v.value()).collect();
            let grads = backward(&values, &ctx.out.value(), &ctx.grad.value())?;
            if grads.len() != values.len() {
                return contract_err(format!("{name}: backward returned {} grads", grads.len()));
            }
            Ok(grads.into_iter().map(|g| g.map(|t| ctx.tape.constant(t))).collect())
        })
    }

    /// Runs `f` with recording disabled.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let _guard = RecordingGuard { flag: &self.recording, prev: self.recording.replace(false) };
        f()
    }

    fn accumulate<'t>(&'t self, out: Var<'t>, create_graph: bool) -> Result<Vec<Option<Var<'t>>>> {
        let _guard = RecordingGuard { flag: &self.recording, prev: self.recording.replace(create_graph) };
        let mut acc: Vec<Option<Var<'t>>> = vec![None; out.id + 1];
        acc[out.id] = Some(self.constant(Tensor::ones(out.value().shape())));
        for id in (0..=out.id).rev() {
            let Some(grad) = acc[id] else { continue };
            let (op, out_var) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), Var { tape: self, id })
            };
            let Some(op) = op else { continue };
            if create_graph && !op.higher_order {
                return contract_err(format!(
                    "operation `{}` does not support differentiating its gradient",
                    op.name
                ));
            }
            let ctx = BackwardCtx {
                tape: self,
                inputs: op.inputs.iter().map(|&i| Var { tape: self, id: i }).collect(),
                out: out_var,
                grad,
            };
            let input_grads = (op.backward)(&ctx)?;
            for (&input, g) in op.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes.borrow()[input].requires_grad {
                    continue;
                }
                if g.value().shape() != self.nodes.borrow()[input].value.shape() {
                    return shape_err(format!(
                        "backward of `{}` produced gradient {:?} for input {:?}",
                        op.name,
                        g.value().shape(),
                        self.nodes.borrow()[input].value.shape()
                    ));
                }
                acc[input] = Some(match acc[input] {
                    None => g,
                    Some(prev) => prev.add(g)?,
                });
            }
        }
        Ok(acc)
    }

    /// Gradients of `out` with respect to `wrt`. With `create_graph` the
    /// gradient computation is itself recorded and can be differentiated.
    /// Entries are `None` where `out` does not depend on the input.
    pub fn grad<'t>(
        &'t self,
        out: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'t>>>> {
        let acc = self.accumulate(out, create_graph)?;
        Ok(wrt.iter().map(|v| acc.get(v.id).copied().flatten()).collect())
    }

    /// Populates gradients of a scalar loss for every tracked node reachable
    /// from it. Calling it twice without [`Tape::reset_grads`] is an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if loss.value().len() != 1 {
            return contract_err(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss.value().shape()
            ));
        }
        if self.backward_done.get() {
            return contract_err("backward() already ran on this tape; call reset_grads() first");
        }
        let acc = self.accumulate(loss, false)?;
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.extend(acc.iter().map(|g| g.map(|v| v.value())));
        self.backward_done.set(true);
        Ok(())
    }

    /// Gradient stored by the last [`Tape::backward`].
    pub fn grad_of(&self, var: Var<'_>) -> Option<Rc<Tensor>> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = first.value().shape().to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.value().shape().to_vec();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return shape_err(format!("concat of {base:?} and {s:?} along {axis}"));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                let block = len * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.record("concat", parts, value, true, move |ctx| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for &len in &lens {
                grads.push(Some(ctx.grad.slice(axis, offset, offset + len)?));
                offset += len;
            }
            Ok(grads)
        })
    }
}

fn unary_map<'t>(
    x: Var<'t>,
    name: &'static str,
    f: impl Fn(f64) -> f64,
    backward: impl for<'s> Fn(&BackwardCtx<'s>) -> Result<Vec<Option<Var<'s>>>> + 'static,
) -> Result<Var<'t>> {
    let value = x.value().map(f);
    x.tape.record(name, &[x], value, true, backward)
}

fn mask_tensor(x: &Tensor, pred: impl Fn(f64) -> bool) -> Tensor {
    x.map(|v| if pred(v) { 1.0 } else { 0.0 })
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Current value; shares storage with the tape.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.shared_leaf(self.value(), false)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        backward: impl for<'s> Fn(&BackwardCtx<'s>) -> Result<Vec<Option<Var<'s>>>> + 'static,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        kernels::check_broadcast(a.shape(), b.shape())?;
        let mut data = vec![0.0; a.len()];
        let (ad, bd) = (a.data(), b.data());
        kernels::for_each_broadcast(a.shape(), b.shape(), |i, j| data[i] = f(ad[i], bd[j]));
        let value = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.record(name, &[self, other], value, true, backward)
    }

    /// Elementwise sum; `other` broadcasts onto `self`.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |ctx| {
            let b_shape = ctx.inputs[1].shape();
            Ok(vec![Some(ctx.grad), Some(ctx.grad.sum_to(&b_shape)?)])
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |ctx| {
            let b_shape = ctx.inputs[1].shape();
            Ok(vec![Some(ctx.grad), Some(ctx.grad.sum_to(&b_shape)?.neg()?)])
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let ga = ctx.grad.mul(b)?;
            let gb = ctx.grad.mul(a)?.sum_to(&b.shape())?;
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().iter().any(|&x| x == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(other, "div", |a, b| a / b, |ctx| {
            let b = ctx.inputs[1];
            let ga = ctx.grad.div(b)?;
            let gb = ctx.grad.mul(ctx.out)?.div(b)?.neg()?.sum_to(&b.shape())?;
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        unary_map(self, "scale", |x| x * c, move |ctx| Ok(vec![Some(ctx.grad.scale(c)?)]))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        unary_map(self, "add_scalar", |x| x + c, |ctx| Ok(vec![Some(ctx.grad)]))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        unary_map(self, "exp", f64::exp, |ctx| Ok(vec![Some(ctx.grad.mul(ctx.out)?)]))
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        unary_map(self, "log", f64::ln, |ctx| Ok(vec![Some(ctx.grad.div(ctx.inputs[0])?)]))
    }

    /// `x^p`; negative bases need an integer exponent, zero bases a positive one.
    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        let bad = self.value().data().iter().any(|&x| {
            (x < 0.0 && p.fract() != 0.0) || (x == 0.0 && p < 0.0)
        });
        if bad {
            return Err(Error::Domain(format!("powf({p}) outside its domain")));
        }
        unary_map(self, "powf", move |x| x.powf(p), move |ctx| {
            let d = ctx.inputs[0].powf(p - 1.0)?.scale(p)?;
            Ok(vec![Some(ctx.grad.mul(d)?)])
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        unary_map(self, "sigmoid", kernels::sigmoid, |ctx| {
            let y = ctx.out;
            let d = y.mul(y.neg()?.add_scalar(1.0)?)?;
            Ok(vec![Some(ctx.grad.mul(d)?)])
        })
    }

    /// `log(sigmoid(x))`, evaluated stably.
    pub fn log_sigmoid(self) -> Result<Var<'t>> {
        unary_map(self, "log_sigmoid", kernels::log_sigmoid, |ctx| {
            let d = ctx.inputs[0].neg()?.sigmoid()?;
            Ok(vec![Some(ctx.grad.mul(d)?)])
        })
    }

    /// Exponential linear unit with α = 1.
    pub fn elu(self) -> Result<Var<'t>> {
        unary_map(self, "elu", kernels::elu, |ctx| {
            let x = ctx.inputs[0];
            // elu'(x) = 1 for x > 0, elu(x) + 1 otherwise.
            let pos = mask_tensor(&x.value(), |v| v > 0.0);
            let neg = pos.map(|m| 1.0 - m);
            let tape = ctx.tape;
            let d = x
                .elu()?
                .add_scalar(1.0)?
                .mul(tape.constant(neg))?
                .add(tape.constant(pos))?;
            Ok(vec![Some(ctx.grad.mul(d)?)])
        })
    }

    pub fn clamp_min(self, lo: f64) -> Result<Var<'t>> {
        unary_map(self, "clamp_min", move |x| x.max(lo), move |ctx| {
            let mask = mask_tensor(&ctx.inputs[0].value(), |v| v >= lo);
            Ok(vec![Some(ctx.grad.mul(ctx.tape.constant(mask))?)])
        })
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let v = self.value();
        let value = Tensor::scalar(v.data().iter().sum());
        self.tape.record("sum", &[self], value, true, |ctx| {
            let shape = ctx.inputs[0].shape();
            Ok(vec![Some(ctx.grad.expand_to(&shape)?)])
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return shape_err("mean of an empty tensor");
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sums broadcast dimensions away so the result has `shape`.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self);
        }
        kernels::check_broadcast(v.shape(), shape)?;
        let data = kernels::sum_to(v.data(), v.shape(), shape);
        let value = Tensor::new(shape.to_vec(), data)?;
        self.tape.record("sum_to", &[self], value, true, |ctx| {
            let shape = ctx.inputs[0].shape();
            Ok(vec![Some(ctx.grad.expand_to(&shape)?)])
        })
    }

    /// Broadcasts `self` up to `shape`.
    pub fn expand_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self);
        }
        kernels::check_broadcast(shape, v.shape())?;
        let data = kernels::expand_to(v.data(), v.shape(), shape);
        let value = Tensor::new(shape.to_vec(), data)?;
        self.tape.record("expand_to", &[self], value, true, |ctx| {
            let shape = ctx.inputs[0].shape();
            Ok(vec![Some(ctx.grad.sum_to(&shape)?)])
        })
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let mut shape = self.shape();
        if axis >= shape.len() {
            return shape_err(format!("axis {axis} out of range for {shape:?}"));
        }
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return shape_err(format!("mean over axis {axis} of {shape:?}"));
        }
        let n = shape[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self);
        }
        let value = v.reshaped(shape.to_vec())?;
        self.tape.record("reshape", &[self], value, true, |ctx| {
            let shape = ctx.inputs[0].shape();
            Ok(vec![Some(ctx.grad.reshape(&shape)?)])
        })
    }

    /// Matrix transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.tape.record("transpose", &[self], value, true, |ctx| Ok(vec![Some(ctx.grad.transpose()?)]))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return shape_err(format!("slice {start}..{end} on axis {axis} of {shape:?}"));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.tape.record("slice", &[self], value, true, move |ctx| {
            let full = ctx.inputs[0].shape()[axis];
            Ok(vec![Some(ctx.grad.pad_slice(axis, start, full)?)])
        })
    }

    /// Places `self` at offset `start` of a zero tensor whose `axis` has
    /// length `full`. Adjoint of [`Var::slice`].
    pub fn pad_slice(self, axis: usize, start: usize, full: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || start + shape[axis] > full {
            return shape_err(format!("pad_slice at {start} into {full} on axis {axis} of {shape:?}"));
        }
        let len = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = full;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&v.data()[src..src + len * inner]);
        }
        let value = Tensor::new(out_shape, data)?;
        self.tape.record("pad_slice", &[self], value, true, move |ctx| {
            Ok(vec![Some(ctx.grad.slice(axis, start, start + len)?)])
        })
    }

    /// Matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ext(other, false, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ext(other, false, true)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ext(other, true, false)
    }

    fn matmul_ext(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (ar, ac) = a.dims2()?;
        let (br, bc) = b.dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions differ: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut data = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), ta, b.data(), tb, &mut data, false);
        let value = Tensor::new(vec![m, n], data)?;
        self.tape.record("matmul", &[self, other], value, true, move |ctx| {
            let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let ga = if ta { b.matmul_ext(g, tb, true)? } else { g.matmul_ext(b, false, !tb)? };
            let gb = if tb { g.matmul_ext(a, true, ta)? } else { a.matmul_ext(g, !ta, false)? };
            Ok(vec![Some(ga), Some(gb)])
        })
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = softmax_values(&self.value(), axis, false)?;
        self.tape.record("softmax", &[self], value, true, move |ctx| {
            let y = ctx.out;
            let inner = ctx.grad.mul(y)?.sum_axis(axis)?;
            Ok(vec![Some(ctx.grad.sub(inner)?.mul(y)?)])
        })
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = softmax_values(&self.value(), axis, true)?;
        self.tape.record("log_softmax", &[self], value, true, move |ctx| {
            let total = ctx.grad.sum_axis(axis)?;
            let p = ctx.out.exp()?;
            Ok(vec![Some(ctx.grad.sub(p.mul(total)?)?)])
        })
    }

    /// Normalizes to zero mean and unit population variance along `axis`
    /// (ε = 1e-5 inside the square root). Returns (normalized, mean, var);
    /// mean and var keep `axis` as a size-1 dimension.
    pub fn layer_norm_stats(self, axis: usize) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let mean = self.mean_axis(axis)?;
        let centered = self.sub(mean)?;
        let var = centered.mul(centered)?.mean_axis(axis)?;
        let inv_std = var.add_scalar(LAYER_NORM_EPS)?.powf(-0.5)?;
        Ok((centered.mul(inv_std)?, mean, var))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn softmax_values(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    if axis >= x.ndim() {
        return shape_err(format!("softmax axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|j| (src[at(j)] - max).exp()).sum();
            let log_z = z.ln();
            for j in 0..n {
                let shifted = src[at(j)] - max;
                out[at(j)] = if log { shifted - log_z } else { shifted.exp() / z };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), m.value().data());
    }

    #[test]
    fn hand_matmul() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
    }

    #[test]
    fn elu_and_sigmoid_points() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let e = x.elu().unwrap().value();
        assert_eq!(e.data()[0], 0.0);
        assert_eq!(e.data()[1], 1.0);
        assert!((e.data()[2] - (std::f64::consts::E.recip() - 1.0)).abs() < 1e-15);
        assert!((e.data()[2] + 0.6321).abs() < 1e-4);
        let s = tape.constant(Tensor::scalar(0.0)).sigmoid().unwrap();
        assert_eq!(s.item().unwrap(), 0.5);
    }

    #[test]
    fn log_and_div_domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain(_))));
        let one = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        assert!(matches!(one.div(x), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::vector(vec![0.0; 4])).softmax(0).unwrap();
        assert!(u.value().data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let x = tape.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
        let p = x.softmax(0).unwrap().value();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let shifted = x.add_scalar(17.5).unwrap().softmax(0).unwrap().value();
        assert!(shifted.max_abs_diff(&p) < 1e-15);
    }

    #[test]
    fn softmax_axis_zero_on_matrix() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let p = x.softmax(0).unwrap().value();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let c = tape.constant(t(&[1, 3], &[2.0, 2.0, 2.0]));
        let (n, _, _) = c.layer_norm_stats(1).unwrap();
        assert!(n.value().data().iter().all(|&v| v == 0.0));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let (n, mean, var) = x.layer_norm_stats(1).unwrap();
        assert_eq!(mean.item().unwrap(), 2.0);
        assert_eq!(var.item().unwrap(), 1.0);
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((n.value().data()[0] + expected).abs() < 1e-15);
        assert!((n.value().data()[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let p = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = p.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad_of(p).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_of_square() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(3.0));
        let loss = p.mul(p).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(p).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn backward_contract_errors() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = p.mul(p).unwrap();
        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
        let loss = sq.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
        tape.reset_grads();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = p.mul(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(p).unwrap().item().unwrap(), 5.0);
        assert!(tape.grad_of(c).is_none());
    }

    #[test]
    fn second_derivative_of_cube() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().mul(x).unwrap();
        let dy = tape.grad(y, &[x], true).unwrap()[0].unwrap();
        assert_eq!(dy.item().unwrap(), 12.0);
        let d2 = tape.grad(dy, &[x], false).unwrap()[0].unwrap();
        assert_eq!(d2.item().unwrap(), 12.0);
    }

    #[test]
    fn custom_ops_refuse_create_graph() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape
            .custom("double", &[x], Tensor::scalar(4.0), |_, _, g| {
                Ok(vec![Some(g.map(|v| 2.0 * v))])
            })
            .unwrap();
        assert!(tape.grad(y, &[x], true).is_err());
        let g = tape.grad(y, &[x], false).unwrap()[0].unwrap();
        assert_eq!(g.item().unwrap(), 2.0);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let before = a.value().as_ref().clone();
        let y = a.exp().unwrap().softmax(1).unwrap().matmul(a).unwrap().sum().unwrap();
        tape.backward(y).unwrap();
        assert_eq!(*a.value(), before);
    }

    #[test]
    fn non_finite_output_is_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(x.exp(), Err(Error::NonFinite(_))));
    }
}

//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! creation order, so node ids are already a topological order. The reverse
//! sweep walks ids from the loss down and visits each node once.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{
    broadcast_binary, gemm_nt_acc, gemm_tn_acc, matmul, matmul_plan, reduce_to_shape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    Square,
    Neg,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Neg => -x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Neg => -1.0,
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Unary(usize, Unary),
    MatMul(usize, usize),
    TransposeLast(usize),
    Reshape(usize),
    SumAll(usize),
    SumAxis { a: usize, axis: usize },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Concat { parts: Vec<usize>, widths: Vec<usize> },
    Slice { a: usize, start: usize },
    Clamp { a: usize, lo: Vec<f64>, hi: Vec<f64> },
    RowFn { a: usize, jac: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Unary(_, u) => match u {
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Relu => "relu",
                Unary::Softplus => "softplus",
                Unary::Exp => "exp",
                Unary::Ln => "ln",
                Unary::Sqrt => "sqrt",
                Unary::Square => "square",
                Unary::Neg => "neg",
            },
            Op::MatMul(..) => "matmul",
            Op::TransposeLast(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Clamp { .. } => "clamp",
            Op::RowFn { .. } => "row_fn",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation record. Confined to one thread (`!Sync`).
#[derive(Default)]
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
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !g.all_finite() {
                return Err(TensorError::Numeric {
                    node: id,
                    op: node.op.name(),
                });
            }
            let contributions = backward_rule(&nodes, id, &g)?;
            for (input, ginput) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.axpy(1.0, &ginput)?,
                    slot => *slot = Some(ginput),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar w.r.t. every node on the reverse path.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn backward_rule(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![
            (*a, reduce_to_shape(g, val(*a).shape())),
            (*b, reduce_to_shape(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => {
            let mut gb = reduce_to_shape(g, val(*b).shape());
            gb.scale_in_place(-1.0);
            vec![(*a, reduce_to_shape(g, val(*a).shape())), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let ga = broadcast_binary("mul", g, val(*b), |x, y| x * y)?;
            let gb = broadcast_binary("mul", g, val(*a), |x, y| x * y)?;
            vec![
                (*a, reduce_to_shape(&ga, val(*a).shape())),
                (*b, reduce_to_shape(&gb, val(*b).shape())),
            ]
        }
        Op::Div(a, b) => {
            let ga = broadcast_binary("div", g, val(*b), |x, y| x / y)?;
            let gy = g.zip_map(out, |x, y| -x * y)?;
            let gb = broadcast_binary("div", &gy, val(*b), |x, y| x / y)?;
            vec![
                (*a, reduce_to_shape(&ga, val(*a).shape())),
                (*b, reduce_to_shape(&gb, val(*b).shape())),
            ]
        }
        Op::Scale(a, c) => {
            let c = *c;
            vec![(*a, g.map(|x| x * c))]
        }
        Op::Unary(a, u) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&gi, &xi), &yi)| gi * u.deriv(xi, yi))
                .collect();
            vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let plan = matmul_plan(ta.shape(), tb.shape())?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut ga = Tensor::zeros(ta.shape());
            let mut gb = Tensor::zeros(tb.shape());
            let want_a = nodes[*a].requires_grad;
            let want_b = nodes[*b].requires_grad;
            for &(ia, ib, io) in &plan.batches {
                let gs = &g.data()[io * m * n..(io + 1) * m * n];
                if want_a {
                    gemm_nt_acc(
                        gs,
                        &tb.data()[ib * k * n..(ib + 1) * k * n],
                        &mut ga.data_mut()[ia * m * k..(ia + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                if want_b {
                    gemm_tn_acc(
                        &ta.data()[ia * m * k..(ia + 1) * m * k],
                        gs,
                        &mut gb.data_mut()[ib * k * n..(ib + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::TransposeLast(a) => vec![(*a, g.transpose_last()?)],
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::SumAxis { a, axis } => {
            let shape = val(*a).shape();
            let (outer, n, inner) = split_axis(shape, *axis);
            let mut ga = Tensor::zeros(shape);
            let gd = g.data();
            let dst = ga.data_mut();
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        dst[(o * n + j) * inner + i] = gd[o * inner + i];
                    }
                }
            }
            vec![(*a, ga)]
        }
        Op::Softmax(a) => {
            let w = *out.shape().last().unwrap_or(&1);
            let mut ga = Tensor::zeros(out.shape());
            for ((gr, yr), dr) in g
                .data()
                .chunks(w)
                .zip(out.data().chunks(w))
                .zip(ga.data_mut().chunks_mut(w))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            vec![(*a, ga)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let w = *xhat.shape().last().unwrap();
            let gv = val(*gain).data();
            let mut gx = Tensor::zeros(xhat.shape());
            let mut ggain = vec![0.0; w];
            let mut gbias = vec![0.0; w];
            for (r, ((gr, hr), dr)) in g
                .data()
                .chunks(w)
                .zip(xhat.data().chunks(w))
                .zip(gx.data_mut().chunks_mut(w))
                .enumerate()
            {
                let mut mean_gh = 0.0;
                let mut mean_ghx = 0.0;
                for j in 0..w {
                    ggain[j] += gr[j] * hr[j];
                    gbias[j] += gr[j];
                    let gh = gr[j] * gv[j];
                    mean_gh += gh;
                    mean_ghx += gh * hr[j];
                }
                mean_gh /= w as f64;
                mean_ghx /= w as f64;
                for j in 0..w {
                    dr[j] = inv_std[r] * (gr[j] * gv[j] - mean_gh - hr[j] * mean_ghx);
                }
            }
            vec![
                (*x, gx),
                (*gain, Tensor::new(vec![w], ggain)?),
                (*bias, Tensor::new(vec![w], gbias)?),
            ]
        }
        Op::Concat { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total.max(1);
            let mut res = Vec::with_capacity(parts.len());
            let mut start = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                let mut data = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    data.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                }
                res.push((p, Tensor::new(val(p).shape().to_vec(), data)?));
                start += w;
            }
            res
        }
        Op::Slice { a, start } => {
            let src = val(*a);
            let full = *src.shape().last().unwrap();
            let w = *g.shape().last().unwrap();
            let mut ga = Tensor::zeros(src.shape());
            for (r, gr) in g.data().chunks(w).enumerate() {
                ga.data_mut()[r * full + start..r * full + start + w].copy_from_slice(gr);
            }
            vec![(*a, ga)]
        }
        Op::Clamp { a, lo, hi } => {
            let x = val(*a);
            let w = lo.len();
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .enumerate()
                .map(|(i, (&gi, &xi))| {
                    let j = i % w;
                    if xi >= lo[j] && xi <= hi[j] {
                        gi
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
        }
        Op::RowFn { a, jac } => {
            let w = *jac.shape().last().unwrap();
            let mut ga = jac.clone();
            for (row, &gi) in ga.data_mut().chunks_mut(w).zip(g.data()) {
                row.iter_mut().for_each(|v| *v *= gi);
            }
            vec![(*a, ga)]
        }
    })
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dim_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        msg: msg.into(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary_node(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires(self.id);
        self.tape.push(value, op, rg)
    }

    fn binary_node(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_binary("add", &self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.binary_node(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_binary("sub", &self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.binary_node(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_binary("mul", &self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.binary_node(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_binary("div", &self.value(), &other.value(), |a, b| a / b)?;
        Ok(self.binary_node(other, v, Op::Div(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary_node(v, Op::Scale(self.id, c))
    }

    /// `self + c` for a scalar constant.
    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        // d(x + c)/dx = 1, same rule as scale-by-one
        self.unary_node(v, Op::Scale(self.id, 1.0))
    }

    pub fn unary(&self, u: Unary) -> Var<'t> {
        let v = self.value().map(|x| u.apply(x));
        self.unary_node(v, Op::Unary(self.id, u))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Ln)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = matmul(&self.value(), &other.value())?;
        Ok(self.binary_node(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let v = self.value().transpose_last()?;
        Ok(self.unary_node(v, Op::TransposeLast(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary_node(v, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary_node(v, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it as an extent-1 axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(dim_err("sum_axis", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += x.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.unary_node(Tensor::new(shape, data)?, Op::SumAxis { a: self.id, axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.value().shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Softmax along the last axis, with max-subtraction.
    pub fn softmax_last(&self) -> Result<Var<'t>> {
        let x = self.value();
        let w = match x.shape().last() {
            Some(&w) if w > 0 => w,
            _ => return Err(dim_err("softmax", format!("empty axis in {:?}", x.shape()))),
        };
        let mut out = Tensor::zeros(x.shape());
        for (xr, yr) in x.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
            let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = (v - m).exp();
                z += *y;
            }
            yr.iter_mut().for_each(|y| *y /= z);
        }
        Ok(self.unary_node(out, Op::Softmax(self.id)))
    }

    /// Layer norm over the last axis: `gain ⊙ (x − μ)/√(σ² + eps) + bias`.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let w = *x.shape().last().unwrap_or(&0);
        if w < 2 {
            return Err(dim_err(
                "layer_norm",
                format!("normalized axis needs extent >= 2, got {:?}", x.shape()),
            ));
        }
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [w] || bv.shape() != [w] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.len() / w;
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x.data()[r * w..(r + 1) * w];
            let mu = xr.iter().sum::<f64>() / w as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..w {
                let h = (xr[j] - mu) * is;
                xhat.data_mut()[r * w + j] = h;
                out.data_mut()[r * w + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let rg = [self.id, gain.id, bias.id]
            .iter()
            .any(|&i| self.tape.requires(i));
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let lead = &values[0].shape()[..values[0].ndim() - 1];
        for v in &values[1..] {
            if &v.shape()[..v.ndim() - 1] != lead {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| tape.requires(p.id));
        Ok(tape.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                widths,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let full = *x.shape().last().unwrap_or(&0);
        if start + len > full || len == 0 {
            return Err(dim_err(
                "slice",
                format!("range {start}..{} outside last axis of {:?}", start + len, x.shape()),
            ));
        }
        let rows = x.len() / full;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * full + start..r * full + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.unary_node(Tensor::new(shape, data)?, Op::Slice { a: self.id, start }))
    }

    /// Component-wise box projection; `lo`/`hi` index the last axis.
    pub fn clamp(&self, lo: &[f64], hi: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        let w = *x.shape().last().unwrap_or(&0);
        if lo.len() != w || hi.len() != w {
            return Err(TensorError::Shape {
                op: "clamp",
                lhs: x.shape().to_vec(),
                rhs: vec![lo.len()],
            });
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(lo[i % w], hi[i % w]))
            .collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.unary_node(
            v,
            Op::Clamp {
                a: self.id,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
        ))
    }

    /// Scalar function of each last-axis row, with its gradient supplied by
    /// the caller: `out[r] = values[r]`, `∂out[r]/∂x[r, :] = jac[r, :]`.
    pub fn row_fn(&self, values: Tensor, jac: Tensor) -> Result<Var<'t>> {
        let x = self.value();
        if jac.shape() != x.shape() || values.shape() != &x.shape()[..x.ndim() - 1] {
            return Err(TensorError::Shape {
                op: "row_fn",
                lhs: x.shape().to_vec(),
                rhs: jac.shape().to_vec(),
            });
        }
        Ok(self.unary_node(values, Op::RowFn { a: self.id, jac }))
    }
}

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    LogSoftmax(usize),
    Nll(usize, Rc<[usize]>),
    Sum(usize),
    SqNorm(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Nll(..) => "nll",
            Op::Sum(..) => "sum",
            Op::SqNorm(..) => "sq_norm",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf | Op::Constant => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) => {
                [Some(a), Some(b)]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LogSoftmax(a)
            | Op::Nll(a, _)
            | Op::Sum(a)
            | Op::SqNorm(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    /// Whether any leaf reaches this node.
    tracked: bool,
}

/// Append-only record of a single computation.
///
/// Backward rules are themselves expressed with recorded ops, so gradients
/// returned with `create_graph` can be differentiated again.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
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

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Records a value gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Constant, value, false)
    }

    fn push(&self, op: Op, value: Tensor, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn record(&self, op: Op, value: Tensor) -> Result<Var<'_>> {
        let value = value.checked(op.name())?;
        let tracked = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().flatten().any(|&i| nodes[i].tracked)
        };
        Ok(self.push(op, value, tracked))
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients stay on the tape and can be
    /// differentiated again. Without it they come back as constants, and any
    /// later attempt to differentiate through them fails with
    /// [`Error::Disconnected`].
    pub fn grad<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>], create_graph: bool) -> Result<Vec<Var<'t>>> {
        if !self.owns(&loss) || wrt.iter().any(|w| !self.owns(w)) {
            return Err(Error::ForeignTape);
        }
        let loss_value = self.value(loss.id);
        if loss_value.len() != 1 {
            return Err(Error::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        for (index, w) in wrt.iter().enumerate() {
            if !self.tracked(w.id) {
                return Err(Error::NotDifferentiable { index });
            }
        }

        if !create_graph {
            let ids: Vec<usize> = wrt.iter().map(|w| w.id).collect();
            let grads = self.backward_values(loss.id, &loss_value, &ids)?;
            return grads
                .into_iter()
                .enumerate()
                .map(|(index, g)| Ok(self.constant(g.ok_or(Error::Disconnected { index })?)))
                .collect();
        }

        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; loss.id + 1];
        if self.tracked(loss.id) {
            adjoint[loss.id] = Some(self.constant(Tensor::full(loss_value.shape(), 1.0)));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = adjoint[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            self.backward_rule(id, &op, g, &mut adjoint)?;
        }

        wrt.iter()
            .enumerate()
            .map(|(index, w)| {
                let g = adjoint
                    .get(w.id)
                    .copied()
                    .flatten()
                    .ok_or(Error::Disconnected { index })?;
                Ok(if create_graph {
                    g
                } else {
                    self.constant((*g.value()).clone())
                })
            })
            .collect()
    }

    fn backward_rule<'t>(&'t self, id: usize, op: &Op, g: Var<'t>, adjoint: &mut [Option<Var<'t>>]) -> Result<()> {
        let var = |i: usize| Var { tape: self, id: i };
        let mut acc = |i: usize, contrib: Var<'t>| -> Result<()> {
            adjoint[i] = Some(match adjoint[i] {
                Some(prev) => prev.add(contrib)?,
                None => contrib,
            });
            Ok(())
        };
        let tracked = |i: usize| self.tracked(i);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if tracked(a) {
                    acc(a, g.matmul(var(b).transpose()?)?)?;
                }
                if tracked(b) {
                    acc(b, var(a).transpose()?.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => acc(a, g.transpose()?)?,
            Op::Add(a, b) => {
                if tracked(a) {
                    acc(a, g)?;
                }
                if tracked(b) {
                    acc(b, g)?;
                }
            }
            Op::AddRow(a, b) => {
                if tracked(a) {
                    acc(a, g)?;
                }
                if tracked(b) {
                    let (m, _) = self.value(a).dims2()?;
                    let ones = self.constant(Tensor::full(&[1, m], 1.0));
                    acc(b, ones.matmul(g)?)?;
                }
            }
            Op::Mul(a, b) => {
                if tracked(a) {
                    acc(a, g.mul(var(b))?)?;
                }
                if tracked(b) {
                    acc(b, g.mul(var(a))?)?;
                }
            }
            Op::Scale(a, c) => acc(a, g.scale(c)?)?,
            Op::MulScalar(a, s) => {
                if tracked(a) {
                    acc(a, g.mul_scalar(var(s))?)?;
                }
                if tracked(s) {
                    acc(s, g.mul(var(a))?.sum()?)?;
                }
            }
            Op::Tanh(a) => {
                let y = var(id);
                let ones = self.constant(Tensor::full(y.value().shape(), 1.0));
                let slope = ones.sub(y.mul(y)?)?;
                acc(a, g.mul(slope)?)?;
            }
            Op::Relu(a) => {
                let x = self.value(a);
                let mask = Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                )?;
                acc(a, g.mul(self.constant(mask))?)?;
            }
            Op::Exp(a) => acc(a, g.mul(var(id))?)?,
            Op::LogSoftmax(a) => {
                let y = var(id);
                let (_, n) = y.value().dims2()?;
                let probs = y.exp()?;
                let col = self.constant(Tensor::full(&[n, 1], 1.0));
                let row = self.constant(Tensor::full(&[1, n], 1.0));
                let row_sums = g.matmul(col)?.matmul(row)?;
                acc(a, g.sub(probs.mul(row_sums)?)?)?;
            }
            Op::Nll(a, ref labels) => {
                let x = self.value(a);
                let (m, n) = x.dims2()?;
                let mut coef = Tensor::zeros(x.shape());
                for (i, &y) in labels.iter().enumerate() {
                    coef.data_mut()[i * n + y] = -1.0 / m as f64;
                }
                acc(a, self.constant(coef).mul_scalar(g)?)?;
            }
            Op::Sum(a) => {
                let ones = self.constant(Tensor::full(self.value(a).shape(), 1.0));
                acc(a, ones.mul_scalar(g)?)?;
            }
            Op::SqNorm(a) => acc(a, var(a).scale(2.0)?.mul_scalar(g)?)?,
        }
        Ok(())
    }

    /// Reverse sweep on plain tensors, with the same arithmetic as the
    /// recorded rules but nothing pushed onto the tape.
    fn backward_values(&self, loss: usize, loss_value: &Tensor, wrt: &[usize]) -> Result<Vec<Option<Tensor>>> {
        let nodes = self.nodes.borrow();
        let mut kept: Vec<Option<Tensor>> = vec![None; wrt.len()];
        let mut adjoint: Vec<Option<Tensor>> = vec![None; loss + 1];
        if nodes[loss].tracked {
            adjoint[loss] = Some(Tensor::full(loss_value.shape(), 1.0));
        }
        let tracked = |i: usize| nodes[i].tracked;
        let val = |i: usize| &*nodes[i].value;
        for id in (0..=loss).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            for (slot, _) in kept.iter_mut().zip(wrt).filter(|(_, &w)| w == id) {
                *slot = Some(g.clone());
            }
            let mut acc = |i: usize, contrib: Tensor, op: &'static str| -> Result<()> {
                let contrib = contrib.checked(op)?;
                adjoint[i] = Some(match adjoint[i].take() {
                    Some(prev) => prev.add(&contrib)?.checked("add")?,
                    None => contrib,
                });
                Ok(())
            };
            match nodes[id].op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    if tracked(a) {
                        acc(a, g.matmul(&val(b).transpose()?)?, "matmul")?;
                    }
                    if tracked(b) {
                        acc(b, val(a).transpose()?.matmul(&g)?, "matmul")?;
                    }
                }
                Op::Transpose(a) => acc(a, g.transpose()?, "transpose")?,
                Op::Add(a, b) => {
                    if tracked(a) && tracked(b) {
                        acc(a, g.clone(), "add")?;
                        acc(b, g, "add")?;
                    } else if tracked(a) {
                        acc(a, g, "add")?;
                    } else if tracked(b) {
                        acc(b, g, "add")?;
                    }
                }
                Op::AddRow(a, b) => {
                    if tracked(b) {
                        let (m, _) = val(a).dims2()?;
                        acc(b, Tensor::full(&[1, m], 1.0).matmul(&g)?, "matmul")?;
                    }
                    if tracked(a) {
                        acc(a, g, "add_row")?;
                    }
                }
                Op::Mul(a, b) => {
                    if tracked(a) {
                        acc(a, g.mul(val(b))?, "mul")?;
                    }
                    if tracked(b) {
                        acc(b, g.mul(val(a))?, "mul")?;
                    }
                }
                Op::Scale(a, c) => acc(a, g.scale(c), "scale")?,
                Op::MulScalar(a, s) => {
                    if tracked(a) {
                        acc(a, g.scale(val(s).item()), "mul_scalar")?;
                    }
                    if tracked(s) {
                        acc(s, g.mul(val(a))?.sum(), "sum")?;
                    }
                }
                Op::Tanh(a) => {
                    let y = val(id);
                    let slope = Tensor::full(y.shape(), 1.0).sub(&y.mul(y)?)?;
                    acc(a, g.mul(&slope)?, "mul")?;
                }
                Op::Relu(a) => {
                    let x = val(a);
                    let mask = Tensor::new(
                        x.shape().to_vec(),
                        x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                    )?;
                    acc(a, g.mul(&mask)?, "mul")?;
                }
                Op::Exp(a) => acc(a, g.mul(val(id))?, "mul")?,
                Op::LogSoftmax(a) => {
                    let y = val(id);
                    let (_, n) = y.dims2()?;
                    let probs = y.exp();
                    let row_sums = g
                        .matmul(&Tensor::full(&[n, 1], 1.0))?
                        .matmul(&Tensor::full(&[1, n], 1.0))?;
                    acc(a, g.sub(&probs.mul(&row_sums)?)?, "sub")?;
                }
                Op::Nll(a, ref labels) => {
                    let x = val(a);
                    let (m, n) = x.dims2()?;
                    let mut coef = Tensor::zeros(x.shape());
                    for (i, &y) in labels.iter().enumerate() {
                        coef.data_mut()[i * n + y] = -1.0 / m as f64;
                    }
                    acc(a, coef.scale(g.item()), "mul_scalar")?;
                }
                Op::Sum(a) => {
                    acc(a, Tensor::full(val(a).shape(), 1.0).scale(g.item()), "mul_scalar")?;
                }
                Op::SqNorm(a) => acc(a, val(a).scale(2.0).scale(g.item()), "mul_scalar")?,
            }
        }
        Ok(kept)
    }

    /// Recomputes every node from the recorded leaves and constants.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = |i: usize| &out[i];
            let value = match node.op {
                Op::Leaf | Op::Constant => (*node.value).clone(),
                Op::MatMul(a, b) => v(a).matmul(v(b))?,
                Op::Transpose(a) => v(a).transpose()?,
                Op::Add(a, b) => v(a).add(v(b))?,
                Op::AddRow(a, b) => v(a).add_row(v(b))?,
                Op::Mul(a, b) => v(a).mul(v(b))?,
                Op::Scale(a, c) => v(a).scale(c),
                Op::MulScalar(a, s) => v(a).scale(v(s).item()),
                Op::Tanh(a) => v(a).tanh(),
                Op::Relu(a) => v(a).relu(),
                Op::Exp(a) => v(a).exp(),
                Op::LogSoftmax(a) => v(a).log_softmax()?,
                Op::Nll(a, ref labels) => v(a).nll(labels)?,
                Op::Sum(a) => v(a).sum(),
                Op::SqNorm(a) => v(a).sq_norm(),
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Values currently stored on the tape, in recording order.
    pub fn recorded_values(&self) -> Vec<Tensor> {
        self.nodes.borrow().iter().map(|n| (*n.value).clone()).collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// True when a leaf reaches this value.
    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignTape)
        }
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = f(&self.value(), &other.value())?;
        self.tape.record(op, value)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        self.tape.record(Op::Transpose(self.id), value)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a.add(b))
    }

    /// `self - other`, composed from `add` and `scale`.
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.add(other.scale(-1.0)?)
    }

    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, b| a.add_row(b))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.mul(b))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let value = self.value().scale(c);
        self.tape.record(Op::Scale(self.id, c), value)
    }

    /// Multiplies every entry by a rank-0 tensor.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.binary(s, Op::MulScalar(self.id, s.id), |a, s| {
            if !s.shape().is_empty() {
                return Err(Error::Shape {
                    op: "mul_scalar",
                    detail: format!("expected rank-0 scalar, got {:?}", s.shape()),
                });
            }
            Ok(a.scale(s.item()))
        })
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let value = self.value().tanh();
        self.tape.record(Op::Tanh(self.id), value)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let value = self.value().relu();
        self.tape.record(Op::Relu(self.id), value)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let value = self.value().exp();
        self.tape.record(Op::Exp(self.id), value)
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let value = self.value().log_softmax()?;
        self.tape.record(Op::LogSoftmax(self.id), value)
    }

    /// Mean negative log-likelihood of `labels` given row-wise log-probabilities.
    pub fn nll(self, labels: &[usize]) -> Result<Var<'t>> {
        let value = self.value().nll(labels)?;
        self.tape.record(Op::Nll(self.id, labels.into()), value)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let value = self.value().sum();
        self.tape.record(Op::Sum(self.id), value)
    }

    pub fn sq_norm(self) -> Result<Var<'t>> {
        let value = self.value().sq_norm();
        self.tape.record(Op::SqNorm(self.id), value)
    }
}

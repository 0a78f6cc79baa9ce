//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its variables. Nodes are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep. Tapes are rebuilt
//! for every forward pass.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Whether every recorded op output is scanned for NaN/Inf.
///
/// Always on in debug builds; `UNSQ_CHECK_FINITE=1` enables it in release.
pub fn finite_checks_enabled() -> bool {
    static ENABLED: OnceLock<bool> = OnceLock::new();
    *ENABLED
        .get_or_init(|| cfg!(debug_assertions) || std::env::var("UNSQ_CHECK_FINITE").is_ok_and(|v| v == "1"))
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

pub(crate) struct BackwardCtx<'a, T: Real> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

impl<T: Real> BackwardCtx<'_, T> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
    leaves: Vec<usize>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: Vec::new(),
            check_finite: finite_checks_enabled(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. It is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: "leaf",
            value: tensor,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        if requires_grad {
            self.leaves.push(id);
        }
        Var { id, tape: self.id }
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    /// Registers a non-trainable leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.id].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].requires_grad
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.id].op
    }

    /// Every branch taken by piecewise ops: one entry per ReLU element (on/off)
    /// and one per max-pool cell (winning offset in its 2x2 window). Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                "relu" => out.extend(node.value.data().iter().map(|&v| u8::from(v > T::zero()))),
                "max_pool2d" => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let s = x.shape();
                    let d = x.data();
                    for nc in 0..s.n * s.c {
                        for i in 0..s.h / 2 {
                            for j in 0..s.w / 2 {
                                let top = nc * s.h * s.w + 2 * i * s.w + 2 * j;
                                let mut best = 0u8;
                                let mut best_v = d[top];
                                for (k, idx) in [top + 1, top + s.w, top + s.w + 1].into_iter().enumerate() {
                                    if d[idx] > best_v {
                                        best = k as u8 + 1;
                                        best_v = d[idx];
                                    }
                                }
                                out.push(best);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.leaves.iter().map(|&id| Var { id, tape: self.id })
    }

    pub(crate) fn owns(&self, var: Var) -> bool {
        var.tape == self.id && var.id < self.nodes.len()
    }

    /// Appends an op node. The backward rule is dropped when no input
    /// requires a gradient.
    pub(crate) fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        for v in inputs {
            if !self.owns(*v) {
                return Err(Error::ForeignVar);
            }
        }
        if self.check_finite {
            value.check_finite(op)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value: value.with_grad(false),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var { id, tape: self.id })
    }

    /// Reverse sweep from a scalar loss. Gradients of a tensor feeding several
    /// nodes are summed; trainable leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.owns(loss) {
            return Err(Error::ForeignVar);
        }
        let loss_shape = self.nodes[loss.id].value.shape();
        if !loss_shape.is_scalar() {
            return Err(Error::NotScalar(loss_shape.to_string()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[input].value.shape(),
                    "gradient shape from {}",
                    node.op
                );
                match &mut grads[input] {
                    Some(acc) => accumulate(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let leaves = self
            .leaves
            .iter()
            .map(|&id| {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

fn accumulate<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Gradients of a loss with respect to every trainable leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f64> {
    tape: u64,
    leaves: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves.iter().find(|(id, _)| *id == var.id).map(|(_, g)| g)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        let pos = self.leaves.iter().position(|(id, _)| *id == var.id)?;
        Some(std::mem::replace(
            &mut self.leaves[pos].1,
            Tensor::zeros(Shape::scalar()),
        ))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Kinds accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    ScalarMul,
    ScalarAdd,
    Exp,
    Log,
    Negate,
}

/// Right-hand operand of an elementwise op.
#[derive(Debug, Clone, Copy)]
pub enum Operand<T> {
    None,
    Var(Var),
    Scalar(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl<T: Real> Tape<T> {
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, rhs: Operand<T>) -> Result<Var> {
        use ElementwiseOp::*;
        match (op, rhs) {
            (Add | Sub | Mul, Operand::Var(b)) => self.binary(op, a, b),
            (ScalarMul | ScalarAdd, Operand::Scalar(s)) => self.scalar_op(op, a, s),
            (Exp | Log | Negate, Operand::None) => self.unary(op, a),
            _ => Err(Error::invalid(
                "elementwise",
                format!("operand kind does not match {op:?}"),
            )),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Result<Var> {
        self.scalar_op(ElementwiseOp::ScalarMul, a, s)
    }

    pub fn scalar_add(&mut self, a: Var, s: T) -> Result<Var> {
        self.scalar_op(ElementwiseOp::ScalarAdd, a, s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Negate, a)
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        if !self.owns(a) || !self.owns(b) {
            return Err(Error::ForeignVar);
        }
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                expected: x.shape().to_string(),
                got: y.shape().to_string(),
            });
        }
        let f: fn(T, T) -> T = match op {
            ElementwiseOp::Add => |p, q| p + q,
            ElementwiseOp::Sub => |p, q| p - q,
            _ => |p, q| p * q,
        };
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_raw(x.shape(), data);
        let (name, backward): (&'static str, BackwardFn<T>) = match op {
            ElementwiseOp::Add => (
                "add",
                Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
            ),
            ElementwiseOp::Sub => (
                "sub",
                Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]),
            ),
            _ => (
                "mul",
                Box::new(|ctx| {
                    let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                    let prod = |other: &Tensor<T>| {
                        let d = ctx
                            .grad
                            .data()
                            .iter()
                            .zip(other.data())
                            .map(|(&g, &o)| g * o)
                            .collect();
                        Tensor::from_raw(other.shape(), d)
                    };
                    vec![ctx.needs(0).then(|| prod(y)), ctx.needs(1).then(|| prod(x))]
                }),
            ),
        };
        self.record(name, &[a, b], out, backward)
    }

    fn scalar_op(&mut self, op: ElementwiseOp, a: Var, s: T) -> Result<Var> {
        if !self.owns(a) {
            return Err(Error::ForeignVar);
        }
        let x = self.value(a);
        if op == ElementwiseOp::ScalarMul {
            let out = x.map(|v| v * s);
            self.record(
                "scalar_mul",
                &[a],
                out,
                Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]),
            )
        } else {
            let out = x.map(|v| v + s);
            self.record(
                "scalar_add",
                &[a],
                out,
                Box::new(|ctx| vec![Some(ctx.grad.clone())]),
            )
        }
    }

    fn unary(&mut self, op: ElementwiseOp, a: Var) -> Result<Var> {
        if !self.owns(a) {
            return Err(Error::ForeignVar);
        }
        let x = self.value(a);
        match op {
            ElementwiseOp::Exp => {
                let out = x.map(T::exp);
                self.record(
                    "exp",
                    &[a],
                    out,
                    Box::new(|ctx| {
                        let d = ctx
                            .grad
                            .data()
                            .iter()
                            .zip(ctx.output.data())
                            .map(|(&g, &y)| g * y)
                            .collect();
                        vec![Some(Tensor::from_raw(ctx.output.shape(), d))]
                    }),
                )
            }
            ElementwiseOp::Log => {
                if let Some(index) = x.data().iter().position(|&v| v <= T::zero()) {
                    return Err(Error::NonPositiveLog {
                        index,
                        value: x.data()[index].as_f64(),
                    });
                }
                let out = x.map(T::ln);
                self.record(
                    "log",
                    &[a],
                    out,
                    Box::new(|ctx| {
                        let x = ctx.inputs[0];
                        let d = ctx
                            .grad
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(&g, &v)| g / v)
                            .collect();
                        vec![Some(Tensor::from_raw(x.shape(), d))]
                    }),
                )
            }
            _ => {
                let out = x.map(|v| -v);
                self.record("neg", &[a], out, Box::new(|ctx| vec![Some(ctx.grad.map(|g| -g))]))
            }
        }
    }

    /// Sum or mean over all elements in flat index order.
    pub fn reduce(&mut self, op: Reduction, a: Var) -> Result<Var> {
        if !self.owns(a) {
            return Err(Error::ForeignVar);
        }
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::invalid("reduce", "empty tensor"));
        }
        let count = T::lit(x.len() as f64);
        let total = x.sum();
        let shape = x.shape();
        match op {
            Reduction::Sum => self.record(
                "sum",
                &[a],
                Tensor::scalar(total),
                Box::new(move |ctx| vec![Some(Tensor::full(shape, ctx.grad.item()))]),
            ),
            Reduction::Mean => self.record(
                "mean",
                &[a],
                Tensor::scalar(total / count),
                Box::new(move |ctx| vec![Some(Tensor::full(shape, ctx.grad.item() / count))]),
            ),
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a)
    }
}

//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is an append-only arena of nodes; a [`Var`] is a cheap `Copy`
//! handle into it. Every vector-Jacobian product is itself expressed with
//! [`Var`] operations, so a backward pass run with `create_graph = true`
//! yields gradients that can be differentiated again. This is what lets a
//! loss contain input-gradients of a network (`∇_z log p(x|z)`,
//! `∇_x log q(z|x)`) and still be trained by gradient descent.
//!
//! Tapes are single-threaded (`!Sync`); build one per thread.

mod backward;
pub mod gradcheck;
mod ops;

pub use ops::concat_cols;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Dense real array of arbitrary rank.
pub type Tensor = ArrayD<f64>;

/// Builds a tensor from a shape and row-major data.
pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("data length matches shape")
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    SumAll(usize),
    SumAxis(usize),
    SumTo(usize),
    BroadcastTo(usize),
    Square(usize),
    Powi(usize, i32),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    /// Piecewise-linear ops carry the constant slope mask as a node.
    Masked(usize, usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    ConcatCols(Vec<usize>),
}

impl Op {
    pub(crate) fn for_each_parent(&self, mut f: impl FnMut(usize)) {
        use Op::*;
        match self {
            Leaf => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => {
                f(*a);
                f(*b);
            }
            Masked(a, _) => f(*a),
            Neg(a) | Scale(a, _) | Offset(a) | Transpose(a) | SumAll(a) | SumAxis(a)
            | SumTo(a) | BroadcastTo(a) | Square(a) | Powi(a, _) | Sqrt(a) | Exp(a) | Log(a)
            | Tanh(a) | Sigmoid(a) | Softplus(a) | SliceCols(a, _) | PadCols(a, _) => f(*a),
            ConcatCols(parts) => parts.iter().copied().for_each(f),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
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

    /// True once a backward pass without `create_graph` has run.
    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        })
    }

    /// Leaf that gradients are taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&self, shape: &[usize]) -> Var<'_> {
        self.constant(ArrayD::ones(IxDyn(shape)))
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push_op(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            let mut any = false;
            op.for_each_parent(|p| any |= nodes[p].requires_grad);
            any
        };
        self.push_node(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    pub(crate) fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradient of a scalar `root` with respect to each of `wrt`.
    ///
    /// With `create_graph`, the returned gradients are graph nodes that can
    /// be differentiated again. Without it, the tape is marked consumed and
    /// the gradients are returned as constants. A `wrt` node that does not
    /// influence `root` receives a zero gradient.
    pub fn grad<'t>(
        &'t self,
        root: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        let shape = root.shape();
        if !shape.iter().all(|&d| d == 1) {
            return Err(Error::shape("grad (root must be scalar)", &shape, &[]));
        }
        let seed = self.ones(&shape);
        self.vjp(&[root], &[seed], wrt, create_graph)
    }

    /// Vector-Jacobian product: `Σ_r seed_rᵀ · ∂root_r/∂w` for each `w`.
    ///
    /// Seeds are treated as constants for this pass but remain graph nodes,
    /// so with `create_graph` the result still depends on whatever the
    /// seeds were computed from.
    pub fn vjp<'t>(
        &'t self,
        roots: &[Var<'t>],
        seeds: &[Var<'t>],
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        backward::run(self, roots, seeds, wrt, create_graph)
    }

    /// Plain-array gradients; the tape is consumed.
    pub fn grad_values<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Tensor>> {
        let grads = self.grad(root, wrt, false)?;
        Ok(grads.iter().map(|g| (*g.value()).clone()).collect())
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
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Whether this node was produced by an operation (not a leaf).
    pub fn has_op(&self) -> bool {
        !matches!(self.tape.nodes.borrow()[self.id].op, Op::Leaf)
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a node with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Constant copy of this node's value; gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}

//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! Every forward primitive appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes once in reverse and accumulates gradients into leaves
//! created with `requires_grad`. Repeated `backward` calls add up until
//! [`Tape::zero_grad`].
//!
//! Shape rules (`R×C` means rank 2):
//!
//! | primitive              | inputs                                   | output        |
//! |------------------------|------------------------------------------|---------------|
//! | `add`, `mul`           | `a`, `b` same shape, or `b` of len `C`   | shape of `a`  |
//! | `matmul`               | `M×K`, `K×N`                             | `M×N`         |
//! | `transpose`            | `R×C`                                    | `C×R`         |
//! | `concat(axis)`         | rank-2 parts agreeing off `axis`         | rank 2        |
//! | `slice(axis, s..e)`    | `R×C`                                    | rank 2        |
//! | `embedding_lookup`     | table `V×D`, ids                         | `n×D`         |
//! | `conv1d`               | `T×Cin`, weight `(K·Cin)×Cout`           | `T'×Cout`     |
//! | `conv1d_depthwise`     | `T×C`, weight `K×C` (K odd)              | `T×C`         |
//! | `softmax`, `log_softmax` | any rank, `axis` < rank                | same          |
//! | `layer_norm`           | `R×D`, gain `D`, bias `D`                | `R×D`         |
//! | `scaled_dot_attention` | q `Tq×D`, k,v `Tk×D`, bias `H×(2W+1)`?   | `Tq×D`        |
//! | `sum`                  | any                                      | scalar        |

mod backward;
mod ops;
mod tensor;

use thiserror::Error;

use crate::scalar::Scalar;

pub use ops::AttentionMask;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    Scale { a: Var, c: T },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Conv1d { x: Var, w: Var, cols: Vec<T>, kernel: usize, stride: usize, pad: usize },
    DepthwiseConv { x: Var, w: Var },
    Relu { a: Var },
    Swish { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T>, rel: Option<(Var, usize)>, q_offset: usize },
    Sum { a: Var },
    Custom { a: Var, grad: Vec<T> },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Non-finite checks follow `debug_assertions`.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var, AutodiffError> {
        if self.check_finite && !value.all_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }
}

//! Shaped real arrays with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor created during one forward evaluation. Each
//! operation appends a node that remembers its inputs; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! was marked as requiring them.
//!
//! Image-like tensors use the `[H, W, C]` layout (channels last). Convolution
//! weights use `[kh, kw, c_in, c_out]`.
//!
//! The graph is generic over the scalar type. Models run in `f32`; the same
//! code instantiated at `f64` is what the finite-difference checks use.

mod conv;
pub mod gradcheck;
mod norm;
mod ops;
mod resize;
pub mod snapshot;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use conv::{ConvSpec, Padding};
pub use norm::{BatchNormMode, BatchStats, BN_EPS};
pub use ops::NORM_EPS;
pub use resize::half_pixel_source;

/// Scalar type a [`Graph`] can be instantiated with.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Row-major `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where
    /// `op(a)` is `m × k` and `op(b)` is `k × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, ta: bool, tb: bool) -> [isize; 6] {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    [
        rsa as isize,
        csa as isize,
        rsb as isize,
        csb as isize,
        n as isize,
        1,
    ]
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = gemm_strides(m, k, n, trans_a, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every index the strides can reach.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: {dim} is {got}, expected {expected}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("mask has no foreground pixels")]
    EmptyMask,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// A shaped array that may take part in differentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> DiffTensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Dimensions of a rank-3 `[H, W, C]` tensor.
    pub fn hwc(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T: Real> {
    tensor: DiffTensor<T>,
    op: ops::Op<T>,
}

/// Tape of tensors and the operations that produced them.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: DiffTensor<T>) -> TensorId {
        tensor.grad = None;
        self.nodes.push(Node {
            tensor,
            op: ops::Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Constant input, excluded from differentiation.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId> {
        Ok(self.leaf(DiffTensor::new(shape, data)?))
    }

    /// Trainable leaf.
    pub fn param(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId> {
        Ok(self.leaf(DiffTensor::new(shape, data)?.with_grad(true)))
    }

    pub fn tensor(&self, id: TensorId) -> &DiffTensor<T> {
        &self.nodes[id.0].tensor
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: ops::Op<T>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.inputs().iter().any(|&i| self.requires_grad(i));
        self.nodes.push(Node {
            tensor: DiffTensor {
                shape,
                data,
                grad: None,
                requires_grad,
            },
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Adds `contribution` into the gradient of `id`, allocating it on first use.
    fn accumulate(&mut self, id: TensorId, contribution: &[T]) {
        let t = &mut self.nodes[id.0].tensor;
        if !t.requires_grad {
            return;
        }
        match &mut t.grad {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(g, &c)| *g += c),
            None => t.grad = Some(contribution.to_vec()),
        }
    }

    /// Back-propagates from a single-element tensor. Gradients accumulate, so
    /// call [`Graph::zero_grad`] before a second pass over the same tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.accumulate(loss, &[T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].tensor.grad.take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, ops::Op::Leaf) {
                self.backprop(TensorId(i), &grad);
            }
            self.nodes[i].tensor.grad = Some(grad);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }
}

#[cfg(test)]
mod gradcheck_tests;

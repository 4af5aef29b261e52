//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Design in one paragraph: a [`Tensor`] is a flat row-major buffer behind an
//! `Arc` plus a shape; if it participates in differentiation it also carries a
//! handle into a [`Tape`](tape::Tape). Operators compute eagerly and, when any
//! input is tracked, push a backward closure onto the tape. `backward` replays
//! closures in exact reverse execution order, accumulating gradients per value
//! id. Everything is generic over [`Real`] — `f32` is the training dtype,
//! `f64` the verification dtype for finite-difference checks.
//!
//! Broadcasting is deliberately restricted to scalar-with-tensor and
//! exact-shape; anything richer is a shape error.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub mod gradcheck;
pub mod ops;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Grads, Tape};

/// Float dtype the engine is generic over. Hand-rolled rather than pulled from
/// a traits crate: the handful of methods below is all the lab needs.
pub trait Real:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// 1 / (1 + e^-x), written to be stable for large |x|.
    fn sigmoid(self) -> Self {
        if self >= Self::ZERO {
            Self::ONE / (Self::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::ONE + e)
        }
    }
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn maxv(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: bad shape {shape:?}: {detail}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: operands belong to different tapes")]
    TapeMismatch { op: &'static str },
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. Cheap to clone (buffer is shared); buffers are
/// never mutated in place once wrapped, which is what makes sharing across
/// tape nodes and threads sound.
#[derive(Clone)]
pub struct Tensor<F: Real> {
    data: Arc<Vec<F>>,
    shape: Vec<usize>,
    /// (tape handle, value id) when tracked for differentiation.
    node: Option<(Tape<F>, usize)>,
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(TensorError::BadShape {
                op: "from_vec",
                shape: shape.to_vec(),
                detail: format!("buffer has {} elements, shape wants {}", data.len(), len),
            });
        }
        Ok(Tensor {
            data: Arc::new(data),
            shape: shape.to_vec(),
            node: None,
        })
    }

    pub fn from_shared(data: Arc<Vec<F>>, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(TensorError::BadShape {
                op: "from_shared",
                shape: shape.to_vec(),
                detail: format!("buffer has {} elements, shape wants {}", data.len(), len),
            });
        }
        Ok(Tensor {
            data,
            shape: shape.to_vec(),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            data: Arc::new(vec![F::ZERO; len]),
            shape: shape.to_vec(),
            node: None,
        }
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            data: Arc::new(vec![x]),
            shape: vec![1],
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn shared(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub(crate) fn tape(&self) -> Option<&Tape<F>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    pub(crate) fn with_node(mut self, tape: Tape<F>, id: usize) -> Self {
        self.node = Some((tape, id));
        self
    }

    /// Same buffer, no tape handle. Gradients will not flow into or through
    /// the returned tensor.
    pub fn detach(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
        }
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    /// Shares storage; the result keeps the same tape id (pure relabeling).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                detail: format!("cannot view {} elements as {:?}", self.data.len(), shape),
            });
        }
        Ok(Tensor {
            data: Arc::clone(&self.data),
            shape: shape.to_vec(),
            node: self.node.clone(),
        })
    }

    /// Rows × cols view of a 2-d tensor (1-d counts as a single row).
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(TensorError::BadShape {
                op,
                shape: self.shape.clone(),
                detail: "expected rank ≤ 2".into(),
            }),
        }
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}(tracked={}, first={:?})",
            self.shape,
            self.node.is_some(),
            self.data.first()
        )
    }
}

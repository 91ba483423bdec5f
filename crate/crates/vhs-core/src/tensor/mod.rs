//! Dense f32 tensors with define-by-run reverse-mode differentiation.
//!
//! Tensors are cheap handles (`Rc` inside); cloning shares storage. A forward
//! op records a node on the thread-local tape whenever a tape is active and
//! any input requires gradients. [`backward`] replays the tape in reverse and
//! accumulates gradients into leaf tensors. Everything is single-threaded by
//! construction: workers each own their tensors and their tape.

mod checkpoint;
mod conv;
mod gradcheck;
pub mod init;
mod ops;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Entry, EntryData};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use ops::{
    add, batchnorm2d, concat, conv2d, exp, forward_primitive, gather_index, l2_normalize, log,
    matmul, mean_all, mul, relu, sigmoid, softmax, square, sum_all, sum_last, tanh, BatchNormAttrs,
    OpAttrs, OpKind,
};
pub use optim::{clip_global_norm, AdamConfig, AdamState};
pub use tape::{backward, tape_begin, tape_clear, tape_is_active, tape_len, tape_nodes, NodeInfo};

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called without an active tape")]
    NoTape,
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    /// False for op outputs. Gradients persist only on leaves.
    leaf: bool,
}

/// Dense row-major f32 tensor. Clone is shallow.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, leaf: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                leaf,
            }),
        }
    }

    /// Non-differentiable constant tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                details: format!("shape {:?} vs {} values", shape, data.len()),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, false, true))
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(vec![1], vec![value], false, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![0.0; n], false, true)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                details: format!("shape {:?} vs {} values", shape, data.len()),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, true, true))
    }

    pub(crate) fn op_output(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor::build(shape, data, requires_grad, false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.leaf
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    /// Overwrite the stored values. Shape is fixed at construction.
    pub fn set_data(&self, values: &[f32]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn set_element(&self, index: usize, value: f32) {
        self.inner.data.borrow_mut()[index] = value;
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Copy of the values as a fresh constant leaf; gradients do not flow back.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.to_vec(), false, true)
    }

    /// Update values in place: `data += scale * delta`.
    pub fn add_scaled(&self, delta: &[f32], scale: f32) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), delta.len());
        for (x, dx) in d.iter_mut().zip(delta) {
            *x += scale * dx;
        }
    }
}

#[cfg(test)]
mod tests;

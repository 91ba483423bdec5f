//! Thread-local computation tape and the reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;

use super::ops::{Node, OpKind};
use super::{Result, Tensor, TensorError};

thread_local! {
    static ACTIVE: RefCell<Option<Vec<Node>>> = const { RefCell::new(None) };
}

/// Start (or restart) recording on this thread. Any previous tape is dropped.
pub fn tape_begin() {
    ACTIVE.with(|t| *t.borrow_mut() = Some(Vec::new()));
}

/// Stop recording and drop the tape.
pub fn tape_clear() {
    ACTIVE.with(|t| *t.borrow_mut() = None);
}

pub fn tape_is_active() -> bool {
    ACTIVE.with(|t| t.borrow().is_some())
}

pub fn tape_len() -> usize {
    ACTIVE.with(|t| t.borrow().as_ref().map_or(0, |n| n.len()))
}

pub(crate) fn record(node: Node) {
    ACTIVE.with(|t| {
        if let Some(nodes) = t.borrow_mut().as_mut() {
            nodes.push(node);
        }
    });
}

/// Introspection view of one recorded node, for tests and debugging.
#[derive(Debug, Clone)]
pub struct NodeInfo {
    pub kind: OpKind,
    pub input_ids: Vec<u64>,
    pub output_id: u64,
}

pub fn tape_nodes() -> Vec<NodeInfo> {
    ACTIVE.with(|t| {
        t.borrow()
            .as_ref()
            .map(|nodes| {
                nodes
                    .iter()
                    .map(|n| NodeInfo {
                        kind: n.kind(),
                        input_ids: n.input_ids(),
                        output_id: n.output().id(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    })
}

/// Gradient accumulation during one reverse sweep. Non-leaf gradients flow
/// through a scratch map and are discarded; leaf gradients are added onto the
/// tensors' persistent buffers at the end, so repeated backward calls over the
/// same tape accumulate additively.
pub(crate) struct GradSink {
    flow: HashMap<u64, Vec<f32>>,
    leaves: HashMap<u64, (Tensor, Vec<f32>)>,
}

impl GradSink {
    fn new() -> GradSink {
        GradSink {
            flow: HashMap::new(),
            leaves: HashMap::new(),
        }
    }

    /// Whether `t` participates in differentiation at all.
    pub(crate) fn needs(&self, t: &Tensor) -> bool {
        t.requires_grad()
    }

    pub(crate) fn add(&mut self, t: &Tensor, delta: &[f32]) {
        if !t.requires_grad() {
            return;
        }
        if t.is_leaf() {
            let entry = self
                .leaves
                .entry(t.id())
                .or_insert_with(|| (t.clone(), vec![0.0; t.numel()]));
            for (b, d) in entry.1.iter_mut().zip(delta) {
                *b += d;
            }
        } else {
            let buf = self
                .flow
                .entry(t.id())
                .or_insert_with(|| vec![0.0; t.numel()]);
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
    }

    /// Zeroed accumulation buffer for scatter-style rules. None when the
    /// tensor does not require gradients.
    pub(crate) fn entry(&mut self, t: &Tensor) -> Option<&mut [f32]> {
        if !t.requires_grad() {
            return None;
        }
        if t.is_leaf() {
            let e = self
                .leaves
                .entry(t.id())
                .or_insert_with(|| (t.clone(), vec![0.0; t.numel()]));
            Some(&mut e.1)
        } else {
            Some(
                self.flow
                    .entry(t.id())
                    .or_insert_with(|| vec![0.0; t.numel()]),
            )
        }
    }
}

/// Reverse sweep from a scalar loss over the active tape. Leaf tensors that
/// require gradients receive `grad += dL/dt`; the tape itself is left intact
/// so a second call accumulates again.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    ACTIVE.with(|t| {
        let tape = t.borrow();
        let nodes = tape.as_ref().ok_or(TensorError::NoTape)?;
        let mut sink = GradSink::new();
        if loss.is_leaf() {
            // Constant loss: nothing depends on parameters.
            if loss.requires_grad() {
                loss.accumulate_grad(&[1.0]);
            }
            return Ok(());
        }
        sink.flow.insert(loss.id(), vec![1.0]);
        for node in nodes.iter().rev() {
            let out_id = node.output().id();
            let Some(d_out) = sink.flow.remove(&out_id) else {
                continue;
            };
            node.backward(&d_out, &mut sink);
        }
        for (_, (tensor, grad)) in sink.leaves.into_iter() {
            tensor.accumulate_grad(&grad);
        }
        Ok(())
    })
}

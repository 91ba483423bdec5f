//! Primitive forward ops and their backward rules.

use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{col2im, conv_out_dim, gemm, gemm_at, gemm_bt, im2col};
use super::tape::{self, GradSink};
use super::{Result, Tensor, TensorError};

/// The primitive set. Everything else in the crate composes these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Matmul,
    Conv2d,
    BatchNorm2d,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Log,
    Exp,
    Add,
    Mul,
    Concat,
    Mean,
    Sum,
    L2Normalize,
    GatherIndex,
    Square,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Matmul,
        OpKind::Conv2d,
        OpKind::BatchNorm2d,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::L2Normalize,
        OpKind::GatherIndex,
        OpKind::Square,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm2d => "batchnorm2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::GatherIndex => "gather_index",
            OpKind::Square => "square",
        }
    }
}

/// Batch-normalization state and mode flags. The running buffers are owned by
/// the layer and shared into each forward call.
#[derive(Clone)]
pub struct BatchNormAttrs {
    pub training: bool,
    /// Fold this batch's statistics into the running buffers.
    pub update_running: bool,
    pub momentum: f32,
    pub eps: f32,
    pub running_mean: Rc<RefCell<Vec<f32>>>,
    pub running_var: Rc<RefCell<Vec<f32>>>,
}

impl BatchNormAttrs {
    pub fn new(channels: usize) -> BatchNormAttrs {
        BatchNormAttrs {
            training: true,
            update_running: false,
            momentum: 0.1,
            eps: 1e-5,
            running_mean: Rc::new(RefCell::new(vec![0.0; channels])),
            running_var: Rc::new(RefCell::new(vec![1.0; channels])),
        }
    }
}

/// Attribute bag for the generic [`forward_primitive`] entry point.
#[derive(Default, Clone)]
pub struct OpAttrs {
    pub stride: usize,
    pub padding: usize,
    pub transpose_b: bool,
    /// Concat axis, or reduction over the last axis when set for mean/sum.
    pub axis: Option<usize>,
    pub indices: Vec<usize>,
    pub batchnorm: Option<BatchNormAttrs>,
}

fn shape_err(op: &'static str, details: String) -> TensorError {
    TensorError::ShapeMismatch { op, details }
}

fn all_finite(t: &Tensor) -> bool {
    t.data().iter().all(|v| v.is_finite())
}

/// Generic dispatch over the primitive set. Inputs are validated for shape
/// and finiteness; the typed functions below are the hot paths.
pub fn forward_primitive(kind: OpKind, inputs: &[Tensor], attrs: &OpAttrs) -> Result<Tensor> {
    for t in inputs {
        if !all_finite(t) {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
    }
    let arity_err = || shape_err(kind.name(), format!("wrong input count {}", inputs.len()));
    match kind {
        OpKind::Matmul => match inputs {
            [a, b] => matmul(a, b, attrs.transpose_b),
            _ => Err(arity_err()),
        },
        OpKind::Conv2d => match inputs {
            [x, w] => conv2d(x, w, attrs.stride.max(1), attrs.padding),
            _ => Err(arity_err()),
        },
        OpKind::BatchNorm2d => match inputs {
            [x, g, b] => {
                let bn = attrs
                    .batchnorm
                    .clone()
                    .unwrap_or_else(|| BatchNormAttrs::new(g.numel()));
                batchnorm2d(x, g, b, &bn)
            }
            _ => Err(arity_err()),
        },
        OpKind::Relu => match inputs {
            [x] => relu(x),
            _ => Err(arity_err()),
        },
        OpKind::Sigmoid => match inputs {
            [x] => sigmoid(x),
            _ => Err(arity_err()),
        },
        OpKind::Tanh => match inputs {
            [x] => tanh(x),
            _ => Err(arity_err()),
        },
        OpKind::Softmax => match inputs {
            [x] => softmax(x),
            _ => Err(arity_err()),
        },
        OpKind::Log => match inputs {
            [x] => log(x),
            _ => Err(arity_err()),
        },
        OpKind::Exp => match inputs {
            [x] => exp(x),
            _ => Err(arity_err()),
        },
        OpKind::Add => match inputs {
            [a, b] => add(a, b),
            _ => Err(arity_err()),
        },
        OpKind::Mul => match inputs {
            [a, b] => mul(a, b),
            _ => Err(arity_err()),
        },
        OpKind::Concat => concat(inputs, attrs.axis.unwrap_or(0)),
        OpKind::Mean => match inputs {
            [x] => match attrs.axis {
                None => mean_all(x),
                Some(_) => mean_last(x),
            },
            _ => Err(arity_err()),
        },
        OpKind::Sum => match inputs {
            [x] => match attrs.axis {
                None => sum_all(x),
                Some(_) => sum_last(x),
            },
            _ => Err(arity_err()),
        },
        OpKind::L2Normalize => match inputs {
            [x] => l2_normalize(x),
            _ => Err(arity_err()),
        },
        OpKind::GatherIndex => match inputs {
            [x] => gather_index(x, attrs.indices.clone()),
            _ => Err(arity_err()),
        },
        OpKind::Square => match inputs {
            [x] => square(x),
            _ => Err(arity_err()),
        },
    }
}

// ── Broadcast shapes for add/mul ─────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    /// b has a single element.
    Scalar,
    /// b is [n] applied along the last axis of a.
    LastDim,
    /// b is [C] applied per channel of a: [N, C, H, W].
    Channel,
}

fn infer_bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Bcast::Scalar);
    }
    if a.shape().len() == 4 && b.shape().len() == 1 && b.numel() == a.shape()[1] {
        return Ok(Bcast::Channel);
    }
    if b.shape().len() == 1 && !a.shape().is_empty() && b.numel() == *a.shape().last().unwrap() {
        return Ok(Bcast::LastDim);
    }
    Err(shape_err(
        op,
        format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
    ))
}

// ── Recorded nodes ───────────────────────────────────────────────────

pub(crate) enum Node {
    Matmul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
        transpose_b: bool,
    },
    Conv2d {
        x: Tensor,
        w: Tensor,
        out: Tensor,
        stride: usize,
        pad: usize,
        cols: Vec<f32>,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        out: Tensor,
        x_hat: Vec<f32>,
        inv_std: Vec<f32>,
        train_stats: bool,
    },
    Unary {
        kind: OpKind,
        x: Tensor,
        out: Tensor,
    },
    Softmax {
        x: Tensor,
        out: Tensor,
    },
    Binary {
        kind: OpKind,
        a: Tensor,
        b: Tensor,
        out: Tensor,
        bcast: Bcast,
    },
    Concat {
        inputs: Vec<Tensor>,
        out: Tensor,
        axis: usize,
    },
    Reduce {
        kind: OpKind,
        x: Tensor,
        out: Tensor,
        last_axis: bool,
    },
    L2Normalize {
        x: Tensor,
        out: Tensor,
        divisors: Vec<f32>,
    },
    Gather {
        x: Tensor,
        out: Tensor,
        indices: Vec<usize>,
    },
}

impl Node {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Node::Matmul { .. } => OpKind::Matmul,
            Node::Conv2d { .. } => OpKind::Conv2d,
            Node::BatchNorm { .. } => OpKind::BatchNorm2d,
            Node::Unary { kind, .. } => *kind,
            Node::Softmax { .. } => OpKind::Softmax,
            Node::Binary { kind, .. } => *kind,
            Node::Concat { .. } => OpKind::Concat,
            Node::Reduce { kind, .. } => *kind,
            Node::L2Normalize { .. } => OpKind::L2Normalize,
            Node::Gather { .. } => OpKind::GatherIndex,
        }
    }

    pub(crate) fn output(&self) -> &Tensor {
        match self {
            Node::Matmul { out, .. }
            | Node::Conv2d { out, .. }
            | Node::BatchNorm { out, .. }
            | Node::Unary { out, .. }
            | Node::Softmax { out, .. }
            | Node::Binary { out, .. }
            | Node::Concat { out, .. }
            | Node::Reduce { out, .. }
            | Node::L2Normalize { out, .. }
            | Node::Gather { out, .. } => out,
        }
    }

    pub(crate) fn input_ids(&self) -> Vec<u64> {
        match self {
            Node::Matmul { a, b, .. } | Node::Binary { a, b, .. } => vec![a.id(), b.id()],
            Node::Conv2d { x, w, .. } => vec![x.id(), w.id()],
            Node::BatchNorm { x, gamma, beta, .. } => vec![x.id(), gamma.id(), beta.id()],
            Node::Unary { x, .. }
            | Node::Softmax { x, .. }
            | Node::Reduce { x, .. }
            | Node::L2Normalize { x, .. }
            | Node::Gather { x, .. } => vec![x.id()],
            Node::Concat { inputs, .. } => inputs.iter().map(|t| t.id()).collect(),
        }
    }

    pub(crate) fn backward(&self, d_out: &[f32], sink: &mut GradSink) {
        match self {
            Node::Matmul {
                a,
                b,
                transpose_b,
                ..
            } => backward_matmul(a, b, *transpose_b, d_out, sink),
            Node::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
                ..
            } => backward_conv2d(x, w, *stride, *pad, cols, d_out, sink),
            Node::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train_stats,
                ..
            } => backward_batchnorm(x, gamma, beta, x_hat, inv_std, *train_stats, d_out, sink),
            Node::Unary { kind, x, out } => backward_unary(*kind, x, out, d_out, sink),
            Node::Softmax { x, out } => backward_softmax(x, out, d_out, sink),
            Node::Binary {
                kind,
                a,
                b,
                bcast,
                ..
            } => backward_binary(*kind, a, b, *bcast, d_out, sink),
            Node::Concat { inputs, axis, out } => backward_concat(inputs, *axis, out, d_out, sink),
            Node::Reduce {
                kind, x, last_axis, ..
            } => backward_reduce(*kind, x, *last_axis, d_out, sink),
            Node::L2Normalize { x, out, divisors } => {
                backward_l2_normalize(x, out, divisors, d_out, sink)
            }
            Node::Gather { x, indices, .. } => {
                if let Some(buf) = sink.entry(x) {
                    for (k, &i) in indices.iter().enumerate() {
                        buf[i] += d_out[k];
                    }
                }
            }
        }
    }
}

fn maybe_record(node: Node) {
    tape::record(node);
}

fn wants_grad(inputs: &[&Tensor]) -> bool {
    tape::tape_is_active() && inputs.iter().any(|t| t.requires_grad())
}

// ── Matmul ───────────────────────────────────────────────────────────

/// a: [m, k] times b: [k, n], or b: [n, k] with `transpose_b`.
pub fn matmul(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 {
        return Err(shape_err("matmul", format!("{ash:?} x {bsh:?}")));
    }
    let (m, k) = (ash[0], ash[1]);
    let (kb, n) = if transpose_b {
        (bsh[1], bsh[0])
    } else {
        (bsh[0], bsh[1])
    };
    if k != kb {
        return Err(shape_err(
            "matmul",
            format!("{ash:?} x {bsh:?} (transpose_b={transpose_b})"),
        ));
    }
    let mut out = vec![0.0; m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        if transpose_b {
            gemm_bt(m, k, n, 1.0, &ad, &bd, 0.0, &mut out);
        } else {
            gemm(m, k, n, 1.0, &ad, &bd, 0.0, &mut out);
        }
    }
    let rg = wants_grad(&[a, b]);
    let out = Tensor::op_output(vec![m, n], out, rg);
    if rg {
        maybe_record(Node::Matmul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
            transpose_b,
        });
    }
    Ok(out)
}

fn backward_matmul(a: &Tensor, b: &Tensor, tb: bool, d_out: &[f32], sink: &mut GradSink) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = if tb { b.shape()[0] } else { b.shape()[1] };
    if sink.needs(a) {
        let bd = b.data();
        let mut da = vec![0.0; m * k];
        if tb {
            // dA = dOut (m,n) * B (n,k)
            gemm(m, n, k, 1.0, d_out, &bd, 0.0, &mut da);
        } else {
            // dA = dOut (m,n) * B^T (n,k)
            gemm_bt(m, n, k, 1.0, d_out, &bd, 0.0, &mut da);
        }
        drop(bd);
        sink.add(a, &da);
    }
    if sink.needs(b) {
        let ad = a.data();
        if tb {
            // dB (n,k) = dOut^T (n,m) * A (m,k)
            let mut db = vec![0.0; n * k];
            gemm_at(n, m, k, 1.0, d_out, &ad, 0.0, &mut db);
            drop(ad);
            sink.add(b, &db);
        } else {
            // dB (k,n) = A^T (k,m) * dOut (m,n)
            let mut db = vec![0.0; k * n];
            gemm_at(k, m, n, 1.0, &ad, d_out, 0.0, &mut db);
            drop(ad);
            sink.add(b, &db);
        }
    }
}

// ── Conv2d ───────────────────────────────────────────────────────────

/// x: [N, C, H, W], w: [OC, C, KH, KW]. Zero padding, square stride.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(shape_err("conv2d", format!("input {xs:?} kernel {ws:?}")));
    }
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(shape_err("conv2d", format!("kernel {ws:?} exceeds padded input {xs:?}")));
    }
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let ckk = c * kh * kw;
    let patch = oh * ow;
    let mut cols = vec![0.0; n * ckk * patch];
    let mut out = vec![0.0; n * oc * patch];
    {
        let xd = x.data();
        let wd_ = w.data();
        for i in 0..n {
            let col_n = &mut cols[i * ckk * patch..(i + 1) * ckk * patch];
            im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, col_n);
            gemm(
                oc,
                ckk,
                patch,
                1.0,
                &wd_,
                col_n,
                0.0,
                &mut out[i * oc * patch..(i + 1) * oc * patch],
            );
        }
    }
    let rg = wants_grad(&[x, w]);
    let out = Tensor::op_output(vec![n, oc, oh, ow], out, rg);
    if rg {
        maybe_record(Node::Conv2d {
            x: x.clone(),
            w: w.clone(),
            out: out.clone(),
            stride,
            pad,
            cols,
        });
    } // cols dropped when not recording
    Ok(out)
}

fn backward_conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    cols: &[f32],
    d_out: &[f32],
    sink: &mut GradSink,
) {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let ckk = c * kh * kw;
    let patch = oh * ow;
    if sink.needs(w) {
        let mut dw = vec![0.0; oc * ckk];
        for i in 0..n {
            // dW += dOut_n (oc, patch) * cols_n^T (patch, ckk)
            gemm_bt(
                oc,
                patch,
                ckk,
                1.0,
                &d_out[i * oc * patch..(i + 1) * oc * patch],
                &cols[i * ckk * patch..(i + 1) * ckk * patch],
                1.0,
                &mut dw,
            );
        }
        sink.add(w, &dw);
    }
    if sink.needs(x) {
        let wd_ = w.data();
        let mut dx = vec![0.0; n * c * h * wd];
        let mut dcols = vec![0.0; ckk * patch];
        for i in 0..n {
            // dcols = W^T (ckk, oc) * dOut_n (oc, patch)
            gemm_at(
                ckk,
                oc,
                patch,
                1.0,
                &wd_,
                &d_out[i * oc * patch..(i + 1) * oc * patch],
                0.0,
                &mut dcols,
            );
            col2im(
                &dcols,
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                &mut dx[i * c * h * wd..(i + 1) * c * h * wd],
            );
        }
        drop(wd_);
        sink.add(x, &dx);
    }
}

// ── BatchNorm2d ──────────────────────────────────────────────────────

/// x: [N, C, H, W], gamma/beta: [C]. Training mode normalizes with batch
/// statistics (biased variance); eval mode uses the running buffers.
pub fn batchnorm2d(x: &Tensor, gamma: &Tensor, beta: &Tensor, attrs: &BatchNormAttrs) -> Result<Tensor> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(shape_err("batchnorm2d", format!("input {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.numel() != c || beta.numel() != c {
        return Err(shape_err(
            "batchnorm2d",
            format!("gamma {:?} beta {:?} for {} channels", gamma.shape(), beta.shape(), c),
        ));
    }
    let spatial = h * w;
    let m = n * spatial;
    let mut x_hat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; c];
    let mut out = vec![0.0; x.numel()];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let (mean, var): (Vec<f32>, Vec<f32>) = if attrs.training {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    let mut s = 0.0f64;
                    for v in &xd[base..base + spatial] {
                        s += *v as f64;
                    }
                    mean[ch] += s;
                }
            }
            for mch in mean.iter_mut() {
                *mch /= m as f64;
            }
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    let mu = mean[ch];
                    let mut s = 0.0f64;
                    for v in &xd[base..base + spatial] {
                        let d = *v as f64 - mu;
                        s += d * d;
                    }
                    var[ch] += s;
                }
            }
            for vch in var.iter_mut() {
                *vch /= m as f64;
            }
            if attrs.update_running {
                let mut rm = attrs.running_mean.borrow_mut();
                let mut rv = attrs.running_var.borrow_mut();
                let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
                for ch in 0..c {
                    rm[ch] = (1.0 - attrs.momentum) * rm[ch] + attrs.momentum * mean[ch] as f32;
                    rv[ch] =
                        (1.0 - attrs.momentum) * rv[ch] + attrs.momentum * (var[ch] * unbias) as f32;
                }
            }
            (
                mean.iter().map(|v| *v as f32).collect(),
                var.iter().map(|v| *v as f32).collect(),
            )
        } else {
            (
                attrs.running_mean.borrow().clone(),
                attrs.running_var.borrow().clone(),
            )
        };
        for ch in 0..c {
            inv_std[ch] = 1.0 / (var[ch] + attrs.eps).sqrt();
        }
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (mu, istd, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for j in base..base + spatial {
                    let xh = (xd[j] - mu) * istd;
                    x_hat[j] = xh;
                    out[j] = g * xh + b;
                }
            }
        }
    }
    let rg = wants_grad(&[x, gamma, beta]);
    let out = Tensor::op_output(xs, out, rg);
    if rg {
        maybe_record(Node::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: out.clone(),
            x_hat,
            inv_std,
            train_stats: attrs.training,
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn backward_batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    x_hat: &[f32],
    inv_std: &[f32],
    train_stats: bool,
    d_out: &[f32],
    sink: &mut GradSink,
) {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let spatial = h * w;
    let m = (n * spatial) as f64;
    if sink.needs(beta) {
        let mut db = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let mut s = 0.0f64;
                for v in &d_out[base..base + spatial] {
                    s += *v as f64;
                }
                db[ch] += s as f32;
            }
        }
        sink.add(beta, &db);
    }
    if sink.needs(gamma) {
        let mut dg = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let mut s = 0.0f64;
                for j in base..base + spatial {
                    s += d_out[j] as f64 * x_hat[j] as f64;
                }
                dg[ch] += s as f32;
            }
        }
        sink.add(gamma, &dg);
    }
    if sink.needs(x) {
        let gd = gamma.data();
        let mut dx = vec![0.0; x.numel()];
        if train_stats {
            // Per channel: dx = istd * (dxh - mean(dxh) - xh * mean(dxh*xh))
            let mut sum_dxh = vec![0.0f64; c];
            let mut sum_dxh_xh = vec![0.0f64; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    let g = gd[ch] as f64;
                    for j in base..base + spatial {
                        let dxh = d_out[j] as f64 * g;
                        sum_dxh[ch] += dxh;
                        sum_dxh_xh[ch] += dxh * x_hat[j] as f64;
                    }
                }
            }
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    let g = gd[ch] as f64;
                    let istd = inv_std[ch] as f64;
                    let mean_dxh = sum_dxh[ch] / m;
                    let mean_dxh_xh = sum_dxh_xh[ch] / m;
                    for j in base..base + spatial {
                        let dxh = d_out[j] as f64 * g;
                        dx[j] = (istd * (dxh - mean_dxh - x_hat[j] as f64 * mean_dxh_xh)) as f32;
                    }
                }
            }
        } else {
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    let scale = gd[ch] * inv_std[ch];
                    for j in base..base + spatial {
                        dx[j] = d_out[j] * scale;
                    }
                }
            }
        }
        drop(gd);
        sink.add(x, &dx);
    }
}

// ── Elementwise unaries ──────────────────────────────────────────────

fn unary(kind: OpKind, x: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor> {
    let out: Vec<f32> = x.data().iter().map(|&v| f(v)).collect();
    let rg = wants_grad(&[x]);
    let out = Tensor::op_output(x.shape().to_vec(), out, rg);
    if rg {
        maybe_record(Node::Unary {
            kind,
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    unary(OpKind::Relu, x, |v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary(OpKind::Sigmoid, x, |v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    unary(OpKind::Tanh, x, f32::tanh)
}

pub fn square(x: &Tensor) -> Result<Tensor> {
    unary(OpKind::Square, x, |v| v * v)
}

/// Natural log. Inputs must be strictly positive.
pub fn log(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "log" });
    }
    unary(OpKind::Log, x, f32::ln)
}

/// Exponential. Errors if the result overflows f32.
pub fn exp(x: &Tensor) -> Result<Tensor> {
    let out = unary(OpKind::Exp, x, f32::exp)?;
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "exp" });
    }
    Ok(out)
}

fn backward_unary(kind: OpKind, x: &Tensor, out: &Tensor, d_out: &[f32], sink: &mut GradSink) {
    if !sink.needs(x) {
        return;
    }
    let mut dx = vec![0.0; x.numel()];
    match kind {
        OpKind::Relu => {
            let od = out.data();
            for i in 0..dx.len() {
                dx[i] = if od[i] > 0.0 { d_out[i] } else { 0.0 };
            }
        }
        OpKind::Sigmoid => {
            let od = out.data();
            for i in 0..dx.len() {
                dx[i] = d_out[i] * od[i] * (1.0 - od[i]);
            }
        }
        OpKind::Tanh => {
            let od = out.data();
            for i in 0..dx.len() {
                dx[i] = d_out[i] * (1.0 - od[i] * od[i]);
            }
        }
        OpKind::Square => {
            let xd = x.data();
            for i in 0..dx.len() {
                dx[i] = d_out[i] * 2.0 * xd[i];
            }
        }
        OpKind::Log => {
            let xd = x.data();
            for i in 0..dx.len() {
                dx[i] = d_out[i] / xd[i];
            }
        }
        OpKind::Exp => {
            let od = out.data();
            for i in 0..dx.len() {
                dx[i] = d_out[i] * od[i];
            }
        }
        _ => unreachable!("not a unary op"),
    }
    sink.add(x, &dx);
}

// ── Softmax over the last axis ───────────────────────────────────────

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.is_empty() {
        return Err(shape_err("softmax", "rank-0 input".into()));
    }
    let n = *shape.last().unwrap();
    if n == 0 {
        return Err(shape_err("softmax", "empty last axis".into()));
    }
    let rows = x.numel() / n;
    let mut out = vec![0.0; x.numel()];
    {
        let xd = x.data();
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o /= sum;
            }
        }
    }
    let rg = wants_grad(&[x]);
    let out = Tensor::op_output(shape, out, rg);
    if rg {
        maybe_record(Node::Softmax {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

fn backward_softmax(x: &Tensor, out: &Tensor, d_out: &[f32], sink: &mut GradSink) {
    if !sink.needs(x) {
        return;
    }
    let n = *x.shape().last().unwrap();
    let rows = x.numel() / n;
    let od = out.data();
    let mut dx = vec![0.0; x.numel()];
    for r in 0..rows {
        let y = &od[r * n..(r + 1) * n];
        let d = &d_out[r * n..(r + 1) * n];
        let dot: f32 = y.iter().zip(d).map(|(a, b)| a * b).sum();
        for i in 0..n {
            dx[r * n + i] = y[i] * (d[i] - dot);
        }
    }
    drop(od);
    sink.add(x, &dx);
}

// ── Add / Mul with limited broadcasting ──────────────────────────────

fn binary(kind: OpKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bcast = infer_bcast(kind.name(), a, b)?;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; a.numel()];
    let combine = |x: f32, y: f32| -> f32 {
        match kind {
            OpKind::Add => x + y,
            OpKind::Mul => x * y,
            _ => unreachable!(),
        }
    };
    match bcast {
        Bcast::Same => {
            for i in 0..out.len() {
                out[i] = combine(ad[i], bd[i]);
            }
        }
        Bcast::Scalar => {
            let s = bd[0];
            for i in 0..out.len() {
                out[i] = combine(ad[i], s);
            }
        }
        Bcast::LastDim => {
            let n = bd.len();
            for (i, o) in out.iter_mut().enumerate() {
                *o = combine(ad[i], bd[i % n]);
            }
        }
        Bcast::Channel => {
            let (nn, c) = (a.shape()[0], a.shape()[1]);
            let spatial = a.shape()[2] * a.shape()[3];
            for i in 0..nn {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    let v = bd[ch];
                    for j in base..base + spatial {
                        out[j] = combine(ad[j], v);
                    }
                }
            }
        }
    }
    drop(ad);
    drop(bd);
    let rg = wants_grad(&[a, b]);
    let out = Tensor::op_output(a.shape().to_vec(), out, rg);
    if rg {
        maybe_record(Node::Binary {
            kind,
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
            bcast,
        });
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(OpKind::Add, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(OpKind::Mul, a, b)
}

/// Reduce a full-size gradient onto the broadcast operand's shape.
fn reduce_to_bcast(a: &Tensor, b: &Tensor, bcast: Bcast, full: &[f32]) -> Vec<f32> {
    match bcast {
        Bcast::Same => full.to_vec(),
        Bcast::Scalar => vec![full.iter().map(|v| *v as f64).sum::<f64>() as f32],
        Bcast::LastDim => {
            let n = b.numel();
            let mut acc = vec![0.0f64; n];
            for (i, v) in full.iter().enumerate() {
                acc[i % n] += *v as f64;
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
        Bcast::Channel => {
            let (nn, c) = (a.shape()[0], a.shape()[1]);
            let spatial = a.shape()[2] * a.shape()[3];
            let mut acc = vec![0.0f64; c];
            for i in 0..nn {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    for v in &full[base..base + spatial] {
                        acc[ch] += *v as f64;
                    }
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    }
}

fn backward_binary(
    kind: OpKind,
    a: &Tensor,
    b: &Tensor,
    bcast: Bcast,
    d_out: &[f32],
    sink: &mut GradSink,
) {
    match kind {
        OpKind::Add => {
            if sink.needs(a) {
                sink.add(a, d_out);
            }
            if sink.needs(b) {
                let db = reduce_to_bcast(a, b, bcast, d_out);
                sink.add(b, &db);
            }
        }
        OpKind::Mul => {
            if sink.needs(a) {
                let bd = b.data();
                let mut da = vec![0.0; a.numel()];
                match bcast {
                    Bcast::Same => {
                        for i in 0..da.len() {
                            da[i] = d_out[i] * bd[i];
                        }
                    }
                    Bcast::Scalar => {
                        for i in 0..da.len() {
                            da[i] = d_out[i] * bd[0];
                        }
                    }
                    Bcast::LastDim => {
                        let n = bd.len();
                        for i in 0..da.len() {
                            da[i] = d_out[i] * bd[i % n];
                        }
                    }
                    Bcast::Channel => {
                        let (nn, c) = (a.shape()[0], a.shape()[1]);
                        let spatial = a.shape()[2] * a.shape()[3];
                        for i in 0..nn {
                            for ch in 0..c {
                                let base = (i * c + ch) * spatial;
                                for j in base..base + spatial {
                                    da[j] = d_out[j] * bd[ch];
                                }
                            }
                        }
                    }
                }
                drop(bd);
                sink.add(a, &da);
            }
            if sink.needs(b) {
                let ad = a.data();
                let prod: Vec<f32> = d_out.iter().zip(ad.iter()).map(|(d, x)| d * x).collect();
                drop(ad);
                let db = reduce_to_bcast(a, b, bcast, &prod);
                sink.add(b, &db);
            }
        }
        _ => unreachable!(),
    }
}

// ── Concat ───────────────────────────────────────────────────────────

pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(shape_err("concat", "no inputs".into()));
    }
    let rank = inputs[0].shape().len();
    if axis >= rank {
        return Err(shape_err("concat", format!("axis {axis} for rank {rank}")));
    }
    for t in inputs {
        if t.shape().len() != rank {
            return Err(shape_err("concat", "rank mismatch".into()));
        }
        for (d, (s, s0)) in t.shape().iter().zip(inputs[0].shape()).enumerate() {
            if d != axis && s != s0 {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", t.shape(), inputs[0].shape()),
                ));
            }
        }
    }
    let outer: usize = inputs[0].shape()[..axis].iter().product();
    let inner: usize = inputs[0].shape()[axis + 1..].iter().product();
    let axis_total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = inputs[0].shape().to_vec();
    shape[axis] = axis_total;
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis] * inner;
            let d = t.data();
            out.extend_from_slice(&d[o * len..(o + 1) * len]);
        }
    }
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let rg = wants_grad(&refs);
    let out = Tensor::op_output(shape, out, rg);
    if rg {
        maybe_record(Node::Concat {
            inputs: inputs.to_vec(),
            out: out.clone(),
            axis,
        });
    }
    Ok(out)
}

fn backward_concat(
    inputs: &[Tensor],
    axis: usize,
    out: &Tensor,
    d_out: &[f32],
    sink: &mut GradSink,
) {
    let outer: usize = out.shape()[..axis].iter().product();
    let inner: usize = out.shape()[axis + 1..].iter().product();
    let total_len = out.shape()[axis] * inner;
    let mut offset = 0usize;
    for t in inputs {
        let len = t.shape()[axis] * inner;
        if sink.needs(t) {
            let mut dt = vec![0.0; t.numel()];
            for o in 0..outer {
                dt[o * len..(o + 1) * len]
                    .copy_from_slice(&d_out[o * total_len + offset..o * total_len + offset + len]);
            }
            sink.add(t, &dt);
        }
        offset += len;
    }
}

// ── Reductions ───────────────────────────────────────────────────────

pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let s = x.data().iter().map(|v| *v as f64).sum::<f64>() as f32;
    reduce_node(OpKind::Sum, x, vec![1], vec![s], false)
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let s = x.data().iter().map(|v| *v as f64).sum::<f64>() as f32;
    let n = x.numel() as f32;
    reduce_node(OpKind::Mean, x, vec![1], vec![s / n], false)
}

/// Sum over the last axis; a [m, n] input yields [m].
pub fn sum_last(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().ok_or_else(|| shape_err("sum", "rank-0".into()))?;
    let rows = x.numel() / n;
    let xd = x.data();
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        out[r] = xd[r * n..(r + 1) * n].iter().map(|v| *v as f64).sum::<f64>() as f32;
    }
    drop(xd);
    let shape = if x.shape().len() == 1 {
        vec![1]
    } else {
        x.shape()[..x.shape().len() - 1].to_vec()
    };
    reduce_node(OpKind::Sum, x, shape, out, true)
}

fn mean_last(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().ok_or_else(|| shape_err("mean", "rank-0".into()))?;
    let out = sum_last(x)?;
    // Composed op: scale by 1/n without recording an extra primitive.
    let scaled: Vec<f32> = out.data().iter().map(|v| v / n as f32).collect();
    let shape = out.shape().to_vec();
    drop(out);
    reduce_node(OpKind::Mean, x, shape, scaled, true)
}

fn reduce_node(
    kind: OpKind,
    x: &Tensor,
    shape: Vec<usize>,
    data: Vec<f32>,
    last_axis: bool,
) -> Result<Tensor> {
    let rg = wants_grad(&[x]);
    let out = Tensor::op_output(shape, data, rg);
    if rg {
        maybe_record(Node::Reduce {
            kind,
            x: x.clone(),
            out: out.clone(),
            last_axis,
        });
    }
    Ok(out)
}

fn backward_reduce(kind: OpKind, x: &Tensor, last_axis: bool, d_out: &[f32], sink: &mut GradSink) {
    if !sink.needs(x) {
        return;
    }
    let numel = x.numel();
    let mut dx = vec![0.0; numel];
    if last_axis {
        let n = *x.shape().last().unwrap();
        let scale = if kind == OpKind::Mean { 1.0 / n as f32 } else { 1.0 };
        for (i, d) in dx.iter_mut().enumerate() {
            *d = d_out[i / n] * scale;
        }
    } else {
        let scale = if kind == OpKind::Mean {
            1.0 / numel as f32
        } else {
            1.0
        };
        let g = d_out[0] * scale;
        dx.fill(g);
    }
    sink.add(x, &dx);
}

// ── L2 normalization over the last axis ──────────────────────────────

const L2_EPS: f32 = 1e-12;

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("l2_normalize", "rank-0".into()))?;
    let rows = x.numel() / n;
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    let mut divisors = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * n..(r + 1) * n];
        let norm = (row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>()).sqrt() as f32;
        let div = norm.max(L2_EPS);
        divisors[r] = div;
        for i in 0..n {
            out[r * n + i] = row[i] / div;
        }
    }
    drop(xd);
    let rg = wants_grad(&[x]);
    let out = Tensor::op_output(x.shape().to_vec(), out, rg);
    if rg {
        maybe_record(Node::L2Normalize {
            x: x.clone(),
            out: out.clone(),
            divisors,
        });
    }
    Ok(out)
}

fn backward_l2_normalize(
    x: &Tensor,
    out: &Tensor,
    divisors: &[f32],
    d_out: &[f32],
    sink: &mut GradSink,
) {
    if !sink.needs(x) {
        return;
    }
    let n = *x.shape().last().unwrap();
    let rows = x.numel() / n;
    let od = out.data();
    let mut dx = vec![0.0; x.numel()];
    for r in 0..rows {
        let y = &od[r * n..(r + 1) * n];
        let d = &d_out[r * n..(r + 1) * n];
        let div = divisors[r];
        if div <= L2_EPS {
            for i in 0..n {
                dx[r * n + i] = d[i] / div;
            }
        } else {
            let dot: f32 = y.iter().zip(d).map(|(a, b)| a * b).sum();
            for i in 0..n {
                dx[r * n + i] = (d[i] - y[i] * dot) / div;
            }
        }
    }
    drop(od);
    sink.add(x, &dx);
}

// ── Gather by flat index ─────────────────────────────────────────────

/// Pick elements of `x` (treated flat) at `indices`; output is 1-D.
pub fn gather_index(x: &Tensor, indices: Vec<usize>) -> Result<Tensor> {
    let numel = x.numel();
    if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
        return Err(shape_err(
            "gather_index",
            format!("index {bad} out of range for {numel} elements"),
        ));
    }
    let xd = x.data();
    let out: Vec<f32> = indices.iter().map(|&i| xd[i]).collect();
    drop(xd);
    let rg = wants_grad(&[x]);
    let shape = vec![indices.len()];
    let out = Tensor::op_output(shape, out, rg);
    if rg {
        maybe_record(Node::Gather {
            x: x.clone(),
            out: out.clone(),
            indices,
        });
    }
    Ok(out)
}

// ── Convenience methods ──────────────────────────────────────────────

impl Tensor {
    pub fn relu(&self) -> Result<Tensor> {
        relu(self)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        sigmoid(self)
    }

    pub fn tanh_t(&self) -> Result<Tensor> {
        tanh(self)
    }

    pub fn square(&self) -> Result<Tensor> {
        square(self)
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        mul(self, &Tensor::scalar(c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        add(self, &other.neg()?)
    }

    pub fn add_t(&self, other: &Tensor) -> Result<Tensor> {
        add(self, other)
    }

    pub fn mul_t(&self, other: &Tensor) -> Result<Tensor> {
        mul(self, other)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        sum_all(self)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        mean_all(self)
    }
}

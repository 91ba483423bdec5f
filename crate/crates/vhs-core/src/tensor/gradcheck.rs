//! Central finite-difference gradient checking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{backward, tape_begin, tape_clear, Result, Tensor};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f32,
    pub probes: usize,
}

/// Compare analytic gradients of `build_loss` against central finite
/// differences at `probes` randomly chosen input elements.
///
/// `build_loss` must be a pure function of the `inputs` data: it is re-run
/// many times with perturbed values, so it must not mutate external state
/// (batchnorm running updates stay off, rng draws fixed). Relative error is
/// |a - fd| / max(|a|, |fd|, 1).
pub fn check_gradients<F>(
    build_loss: F,
    inputs: &[Tensor],
    probes: usize,
    step: f32,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for t in inputs {
        t.zero_grad();
    }
    tape_begin();
    let loss = build_loss()?;
    backward(&loss)?;
    tape_clear();
    let analytic: Vec<Vec<f32>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for t in inputs {
        t.zero_grad();
    }

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let mut max_rel = 0.0f32;
    for _ in 0..probes {
        let mut pick = rng.gen_range(0..total);
        let mut which = 0usize;
        while pick >= inputs[which].numel() {
            pick -= inputs[which].numel();
            which += 1;
        }
        let t = &inputs[which];
        let orig = t.data()[pick];

        t.set_element(pick, orig + step);
        let up = build_loss()?.item() as f64;
        t.set_element(pick, orig - step);
        let down = build_loss()?.item() as f64;
        t.set_element(pick, orig);

        let fd = ((up - down) / (2.0 * step as f64)) as f32;
        let a = analytic[which][pick];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        probes,
    })
}

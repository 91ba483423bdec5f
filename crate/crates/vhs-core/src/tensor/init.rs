//! Weight initialization helpers and a small normal sampler.

use rand::Rng;

/// Standard normal draw via Box-Muller. Two uniform draws per sample keeps
/// the stream layout simple and reproducible.
pub fn randn<R: Rng>(rng: &mut R) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

pub fn randn_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| randn(rng)).collect()
}

/// Fan-in scaled uniform values in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fan_in<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
}

/// Orthogonal-like square matrix: Gram-Schmidt over a seeded Gaussian,
/// computed in f64. Row-major dim x dim.
pub fn orthogonal<R: Rng>(dim: usize, rng: &mut R) -> Vec<f32> {
    let mut rows: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| randn(rng) as f64).collect())
        .collect();
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                rows[i][k] -= dot * rows[j][k];
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        } else {
            // Degenerate draw; fall back to a unit basis vector.
            rows[i].iter_mut().for_each(|v| *v = 0.0);
            rows[i][i % dim] = 1.0;
        }
    }
    rows.into_iter()
        .flat_map(|r| r.into_iter().map(|v| v as f32))
        .collect()
}

// Helpers shared by the integration suites: deterministic instance
// generation, relative-error comparison, a central finite-difference
// harness, and a brute-force cross-entropy oracle kept deliberately naive
// so it cannot share bugs with the production implementation.

#![allow(dead_code)]

use genshift::encoders::PatchTokenGrid;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for generating test instances.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with an absolute floor so near-zero pairs are compared
/// absolutely instead of dividing by noise. The floor must sit well above
/// the central-difference rounding noise (about 1e-10 for unit-scale losses
/// at step 1e-6) divided by the tolerance in use, or vanishing gradient
/// components fail on difference noise alone.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Central finite difference of `f` along one coordinate of `point`.
pub fn central_difference<F>(f: &F, point: &[f64], index: usize, step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut forward = point.to_vec();
    forward[index] += step;
    let mut backward = point.to_vec();
    backward[index] -= step;
    (f(&forward) - f(&backward)) / (2.0 * step)
}

/// Uniform random vector with entries in [-1, 1).
pub fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Like [`random_vector`] but rescaled to the requested norm, so callers can
/// stay clear of the degenerate-direction guard.
pub fn random_vector_with_norm(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    loop {
        let v = random_vector(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x * norm / n).collect();
        }
    }
}

/// Builds a 1 x P grid from token rows; the tests never care about the 2-d
/// arrangement, only the position count.
pub fn grid_from_rows(rows: &[Vec<f64>]) -> PatchTokenGrid {
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    PatchTokenGrid::new(flat, dim, 1, rows.len()).expect("test grid dimensions are consistent")
}

/// Brute-force per-position cross-entropy, written straight from the
/// definition with plain exp ratios: position i's logits are the scaled dot
/// products of target token i against every source token, and the per-
/// position loss is the negative log-probability of the matching position.
pub fn naive_cross_entropy(
    target: &[Vec<f64>],
    source: &[Vec<f64>],
    temperature: f64,
    mean_over_positions: bool,
) -> f64 {
    let positions = target.len();
    let mut total = 0.0;
    for i in 0..positions {
        let mut denominator = 0.0;
        for j in 0..positions {
            let mut logit = 0.0;
            for k in 0..target[i].len() {
                logit += target[i][k] * source[j][k];
            }
            denominator += (logit / temperature).exp();
        }
        let mut matching = 0.0;
        for k in 0..target[i].len() {
            matching += target[i][k] * source[i][k];
        }
        total -= ((matching / temperature).exp() / denominator).ln();
    }
    if mean_over_positions {
        total / positions as f64
    } else {
        total
    }
}

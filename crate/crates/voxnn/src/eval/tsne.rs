use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Knobs of the 2D embedding. Iteration counts and rates follow the usual
/// reference implementation, scaled for desk-size feature sets.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 10.0,
            iterations: 500,
            learning_rate: 100.0,
            early_exaggeration: 4.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

/// Row-stochastic conditional affinities: per point, a Gaussian bandwidth is
/// binary-searched so the row entropy matches `ln(perplexity)`.
pub(crate) fn conditional_affinities(
    dist_sq: &[f64],
    n: usize,
    perplexity: f64,
) -> Vec<f64> {
    let target_entropy = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let mut beta = 1.0f64;
        let mut beta_lo = f64::NEG_INFINITY;
        let mut beta_hi = f64::INFINITY;
        for _ in 0..64 {
            let mut sum = 0.0f64;
            for j in 0..n {
                if i == j {
                    p[i * n + j] = 0.0;
                    continue;
                }
                let v = (-beta * dist_sq[i * n + j]).exp();
                p[i * n + j] = v;
                sum += v;
            }
            let mut entropy = 0.0f64;
            if sum > 0.0 {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let q = p[i * n + j] / sum;
                    p[i * n + j] = q;
                    if q > 1e-300 {
                        entropy -= q * q.ln();
                    }
                }
            }
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                beta_lo = beta;
                beta = if beta_hi.is_infinite() {
                    beta * 2.0
                } else {
                    (beta + beta_hi) / 2.0
                };
            } else {
                beta_hi = beta;
                beta = if beta_lo.is_infinite() {
                    beta / 2.0
                } else {
                    (beta + beta_lo) / 2.0
                };
            }
        }
    }
    p
}

/// Projects feature vectors to 2D: perplexity-matched Gaussian affinities,
/// symmetrized and early-exaggerated, minimized against a Student-t
/// low-dimensional kernel by momentum gradient descent with per-coordinate
/// gains. Any non-finite value during optimization aborts with an error, so
/// a returned embedding was finite at every iteration.
pub fn tsne_embed(features: &[Vec<f64>], params: &TsneParams) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if params.perplexity < 2.0 {
        return Err(Error::InvalidParam("perplexity must be >= 2".into()));
    }
    if (n as f64) < 3.0 * params.perplexity {
        return Err(Error::InvalidParam(format!(
            "t-SNE needs at least 3x perplexity points, got {n}"
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidParam(
            "feature vectors must share one dimension".into(),
        ));
    }

    // Pairwise squared distances in the feature space.
    let mut dist_sq = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut d = 0.0;
            for k in 0..dim {
                let diff = features[i][k] - features[j][k];
                d += diff * diff;
            }
            dist_sq[i * n + j] = d;
            dist_sq[j * n + i] = d;
        }
    }

    let cond = conditional_affinities(&dist_sq, n, params.perplexity);

    // Symmetrize and apply early exaggeration.
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = Normal::new(0.0, 1e-4).expect("static sd");
    let mut y: Vec<f64> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let mut velocity = vec![0.0f64; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut q = vec![0.0f64; n * n];

    for iter in 0..params.iterations {
        let exaggeration = if iter < params.exaggeration_iters {
            params.early_exaggeration
        } else {
            1.0
        };

        // Student-t kernel in the plane.
        let mut q_sum = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let dy0 = y[2 * i] - y[2 * j];
                let dy1 = y[2 * i + 1] - y[2 * j + 1];
                let v = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                q[i * n + j] = v;
                q[j * n + i] = v;
                q_sum += 2.0 * v;
            }
        }

        let mut grad = vec![0.0f64; 2 * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let kernel = q[i * n + j];
                let qij = (kernel / q_sum).max(1e-12);
                let coeff = 4.0 * (exaggeration * p[i * n + j] - qij) * kernel;
                grad[2 * i] += coeff * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += coeff * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }

        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        for d in 0..2 * n {
            gains[d] = if (grad[d] > 0.0) == (velocity[d] > 0.0) {
                (gains[d] * 0.8).max(0.01)
            } else {
                gains[d] + 0.2
            };
            velocity[d] = momentum * velocity[d] - params.learning_rate * gains[d] * grad[d];
            y[d] += velocity[d];
        }

        // Re-center to keep coordinates bounded.
        let mean0 = y.iter().step_by(2).sum::<f64>() / n as f64;
        let mean1 = y.iter().skip(1).step_by(2).sum::<f64>() / n as f64;
        for i in 0..n {
            y[2 * i] -= mean0;
            y[2 * i + 1] -= mean1;
        }

        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIter { iter });
        }
    }

    Ok((0..n).map(|i| [y[2 * i], y[2 * i + 1]]).collect())
}

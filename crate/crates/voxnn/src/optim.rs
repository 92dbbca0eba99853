//! Parameter update rules: plain SGD and Adadelta, plus the seeded shuffle
//! shared by the training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Derives an independent stream seed from a base seed and a salt
/// (SplitMix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic visiting order of `len` samples for one training epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Which update rule a training loop should use, with its hyperparameters.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum OptimizerSpec {
    Sgd { rate: f64 },
    Adadelta { rho: f64, eps: f64 },
}

impl Default for OptimizerSpec {
    /// Canonical Adadelta constants; the method needs no global rate.
    fn default() -> Self {
        OptimizerSpec::Adadelta {
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

/// In-place SGD step: `p <- p - rate * g`, elementwise.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], rate: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidParam("sgd rate must be positive".into()));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p = T::from_f64(p.to_f64() - rate * g.to_f64());
    }
    Ok(())
}

/// Running accumulators of the Adadelta rule, one pair per parameter.
/// Accumulators are kept in `f64` regardless of parameter storage.
#[derive(Clone, Debug)]
pub struct AdadeltaState {
    rho: f64,
    eps: f64,
    accum_grad: Vec<f64>,
    accum_update: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(len: usize, rho: f64, eps: f64) -> Result<Self> {
        if !(0.0 < rho && rho < 1.0) {
            return Err(Error::InvalidParam("adadelta rho must lie in (0, 1)".into()));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParam("adadelta eps must be positive".into()));
        }
        Ok(Self {
            rho,
            eps,
            accum_grad: vec![0.0; len],
            accum_update: vec![0.0; len],
        })
    }

    pub fn len(&self) -> usize {
        self.accum_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum_grad.is_empty()
    }

    pub fn accum_grad(&self) -> &[f64] {
        &self.accum_grad
    }

    pub fn accum_update(&self) -> &[f64] {
        &self.accum_update
    }
}

/// One Adadelta step. Per element:
///
/// ```text
/// E[g²] <- ρ·E[g²] + (1−ρ)·g²
/// Δ      = −sqrt((E[Δx²]+ε) / (E[g²]+ε)) · g
/// E[Δx²] <- ρ·E[Δx²] + (1−ρ)·Δ²
/// p      <- p + Δ
/// ```
pub fn adadelta_step<T: Scalar>(
    state: &mut AdadeltaState,
    params: &mut [T],
    grads: &[T],
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    if state.len() != params.len() {
        return Err(Error::LengthMismatch {
            left: state.len(),
            right: params.len(),
        });
    }
    let (rho, eps) = (state.rho, state.eps);
    for i in 0..params.len() {
        let g = grads[i].to_f64();
        state.accum_grad[i] = rho * state.accum_grad[i] + (1.0 - rho) * g * g;
        let delta = -((state.accum_update[i] + eps) / (state.accum_grad[i] + eps)).sqrt() * g;
        state.accum_update[i] = rho * state.accum_update[i] + (1.0 - rho) * delta * delta;
        params[i] = T::from_f64(params[i].to_f64() + delta);
    }
    Ok(())
}

/// Per-tensor optimizer: owns whatever state the chosen rule needs.
#[derive(Clone, Debug)]
pub enum TensorOptimizer {
    Sgd { rate: f64 },
    Adadelta(AdadeltaState),
}

impl TensorOptimizer {
    pub fn new(spec: OptimizerSpec, len: usize) -> Result<Self> {
        Ok(match spec {
            OptimizerSpec::Sgd { rate } => TensorOptimizer::Sgd { rate },
            OptimizerSpec::Adadelta { rho, eps } => {
                TensorOptimizer::Adadelta(AdadeltaState::new(len, rho, eps)?)
            }
        })
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        match self {
            TensorOptimizer::Sgd { rate } => sgd_step(params, grads, *rate),
            TensorOptimizer::Adadelta(state) => adadelta_step(state, params, grads),
        }
    }
}

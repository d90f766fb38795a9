use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Floor added to the softplus decay rate.
pub const DEFAULT_EPSILON: f64 = 1e-3;
/// Token interval of features sampled every 4 frames at 30 FPS.
pub const DEFAULT_DT: f64 = 4.0 / 30.0;

/// How many raw decay parameters a block owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySharingMode {
    /// One scalar shared by every channel of the block.
    #[default]
    BlockShared,
    /// One value per channel.
    PerChannel,
}

impl DecaySharingMode {
    pub fn num_params(self, channels: usize) -> usize {
        match self {
            DecaySharingMode::BlockShared => 1,
            DecaySharingMode::PerChannel => channels,
        }
    }
}

/// Structural time step of a block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtPolicy {
    /// Seconds per level-0 token.
    pub base_dt: f64,
    /// Scale the step by the cumulative downsampling stride of the level.
    pub align_pyramid: bool,
}

impl Default for DtPolicy {
    fn default() -> Self {
        Self {
            base_dt: DEFAULT_DT,
            align_pyramid: false,
        }
    }
}

impl DtPolicy {
    pub fn effective_dt(&self, level: usize, stride: usize) -> f64 {
        if self.align_pyramid {
            self.base_dt * (stride as f64).powi(level as i32)
        } else {
            self.base_dt
        }
    }
}

/// Learnable decay rate of one block: `lambda = softplus(rho) + epsilon`,
/// `alpha = exp(-lambda * dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayParams {
    pub rho: ParamId,
    pub epsilon: f64,
    pub sharing: DecaySharingMode,
    pub dt_policy: DtPolicy,
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Raw value that puts the retention coefficient at 1/2 for the default
/// token interval.
pub fn default_rho() -> f64 {
    softplus_inverse(std::f64::consts::LN_2 / DEFAULT_DT)
}

/// Scalar evaluation of `(lambda, alpha)`.
pub fn retention(rho: f64, epsilon: f64, dt: f64) -> Result<(f64, f64)> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("time step {dt} must be positive")));
    }
    let lambda = rho.softplus() + epsilon;
    Ok((lambda, (-lambda * dt).exp()))
}

impl DecayParams {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: impl Into<String>,
        channels: usize,
        sharing: DecaySharingMode,
        epsilon: f64,
        dt_policy: DtPolicy,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("decay epsilon must be positive"));
        }
        if !(dt_policy.base_dt > 0.0) {
            return Err(Error::invalid("base_dt must be positive"));
        }
        let n = sharing.num_params(channels);
        let rho = store.add(name, DenseArray::full(&[n], F::of(default_rho())))?;
        Ok(Self {
            rho,
            epsilon,
            sharing,
            dt_policy,
        })
    }
}

/// Records `(lambda, alpha)` for `level` on the graph, differentiable in rho.
pub fn decay_coefficients<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    decay: &DecayParams,
    level: usize,
    stride: usize,
) -> Result<(Var, Var)> {
    let dt = decay.dt_policy.effective_dt(level, stride);
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("effective time step {dt} must be positive")));
    }
    let rho = g.param(store, decay.rho);
    let sp = g.softplus(rho)?;
    let lambda = g.affine(sp, F::one(), F::of(decay.epsilon))?;
    let exponent = g.affine(lambda, F::of(-dt), F::zero())?;
    let alpha = g.exp(exponent)?;
    Ok((lambda, alpha))
}

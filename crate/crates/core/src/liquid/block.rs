use rand::Rng;
use serde::{Deserialize, Serialize};

use super::decay::{decay_coefficients, DecayParams, DecaySharingMode, DtPolicy};
use crate::array::DenseArray;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::seed::derive_seed;

pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DEFAULT_SUBSTEPS: usize = 16;
pub const LN_EPS: f64 = 1e-5;

/// Which recurrence turns the stimulus into the block output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    /// `alpha * x_t + (1 - alpha) * s_t`, independently at every token.
    Parallel,
    /// Closed-form recurrence over a hidden state seeded with the first token.
    CfcSequential,
    /// Fixed-step explicit Euler integration of the relaxation ODE.
    OdeEuler { substeps: usize },
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Parallel
    }
}

impl Backend {
    pub fn ode_default() -> Self {
        Backend::OdeEuler {
            substeps: DEFAULT_SUBSTEPS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Parallel => "parallel",
            Backend::CfcSequential => "cfc_sequential",
            Backend::OdeEuler { .. } => "ode_euler",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Backend::OdeEuler { substeps: 0 } => Err(Error::invalid("ode_euler needs substeps >= 1")),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "parallel" => Ok(Backend::Parallel),
            "cfc_sequential" | "cfc" => Ok(Backend::CfcSequential),
            "ode_euler" | "ode" => Ok(Backend::ode_default()),
            other => Err(format!("unknown backend '{other}'")),
        }
    }
}

/// Dropout behaviour of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardMode {
    pub training: bool,
    pub seed: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            seed,
        }
    }
}

/// Parameters of one Liquid Parallel Temporal Block. Every projection maps
/// `C` channels to `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LptbWeights {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub dw_kernel: ParamId,
    pub pw_weight: ParamId,
    pub pw_bias: ParamId,
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    pub dropout_rate: f64,
    pub decay: DecayParams,
    pub channels: usize,
    pub kernel_size: usize,
    /// Salt mixed into the dropout seed so blocks draw independent masks.
    pub salt: u64,
}

/// Construction knobs for [`LptbWeights::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LptbInit {
    pub channels: usize,
    pub kernel_size: usize,
    pub sharing: DecaySharingMode,
    pub epsilon: f64,
    pub dt_policy: DtPolicy,
    pub dropout_rate: f64,
}

pub(crate) fn uniform<F: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> DenseArray<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::of(rng.random_range(-bound..=bound)))
        .collect();
    DenseArray::new(shape.to_vec(), data).expect("shape product matches")
}

/// FNV-1a of the block name: stable across runs and checkpoint reloads.
fn name_salt(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl LptbWeights {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        cfg: &LptbInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.channels;
        let k = cfg.kernel_size;
        if c == 0 {
            return Err(Error::invalid("block needs at least one channel"));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!("kernel size {k} must be odd")));
        }
        if !(0.0..1.0).contains(&cfg.dropout_rate) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        let fan = 1.0 / (c as f64).sqrt();
        let ln_gamma = store.add(format!("{prefix}.ln_gamma"), DenseArray::full(&[c], F::one()))?;
        let ln_beta = store.add(format!("{prefix}.ln_beta"), DenseArray::zeros(&[c]))?;
        let dw_kernel = store.add(
            format!("{prefix}.dw_kernel"),
            uniform(rng, &[k, c], 1.0 / (k as f64).sqrt()),
        )?;
        let pw_weight = store.add(format!("{prefix}.pw_weight"), uniform(rng, &[c, c], fan))?;
        let pw_bias = store.add(format!("{prefix}.pw_bias"), DenseArray::zeros(&[c]))?;
        let gate_weight = store.add(format!("{prefix}.gate_weight"), uniform(rng, &[c, c], fan))?;
        let gate_bias = store.add(format!("{prefix}.gate_bias"), DenseArray::zeros(&[c]))?;
        let decay = DecayParams::new(
            store,
            format!("{prefix}.decay.rho"),
            c,
            cfg.sharing,
            cfg.epsilon,
            cfg.dt_policy,
        )?;
        Ok(Self {
            ln_gamma,
            ln_beta,
            dw_kernel,
            pw_weight,
            pw_bias,
            gate_weight,
            gate_bias,
            dropout_rate: cfg.dropout_rate,
            decay,
            channels: c,
            kernel_size: k,
            salt: name_salt(prefix),
        })
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [
            self.ln_gamma,
            self.ln_beta,
            self.dw_kernel,
            self.pw_weight,
            self.pw_bias,
            self.gate_weight,
            self.gate_bias,
            self.decay.rho,
        ]
    }
}

/// Gated temporal stimulus `mix * g` with
/// `mix = dropout(pointwise(depthwise(ln(x))))` and `g = sigmoid(gate(ln(x)))`.
/// The normalized input is computed once and feeds both branches.
pub fn stimulus<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    x: Var,
    w: &LptbWeights,
    mode: ForwardMode,
) -> Result<Var> {
    let gamma = g.param(store, w.ln_gamma);
    let beta = g.param(store, w.ln_beta);
    let xn = g.layer_norm(x, gamma, beta, F::of(LN_EPS))?;

    let kernel = g.param(store, w.dw_kernel);
    let dw = g.conv1d_depthwise(xn, kernel)?;
    let (pw, pb) = (g.param(store, w.pw_weight), g.param(store, w.pw_bias));
    let pointwise = g.linear(dw, pw, pb)?;
    let mix = g.dropout(
        pointwise,
        w.dropout_rate,
        derive_seed(mode.seed, w.salt),
        mode.training,
    )?;

    let (gw, gb) = (g.param(store, w.gate_weight), g.param(store, w.gate_bias));
    let gate_logits = g.linear(xn, gw, gb)?;
    let gate = g.sigmoid(gate_logits)?;
    g.mul(mix, gate)
}

/// One LPTB at pyramid `level` (`stride` is the pyramid downsampling factor,
/// used by the aligned time-step policy).
#[allow(clippy::too_many_arguments)]
pub fn lptb_forward<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    x: Var,
    w: &LptbWeights,
    level: usize,
    stride: usize,
    backend: Backend,
    mode: ForwardMode,
) -> Result<Var> {
    backend.validate()?;
    let (t, _) = g.value(x).dims2()?;
    if t == 0 {
        return Err(Error::shape("LPTB over an empty sequence"));
    }
    let s = stimulus(g, store, x, w, mode)?;
    let (lambda, alpha) = decay_coefficients(g, store, &w.decay, level, stride)?;
    match backend {
        Backend::Parallel => g.relax(x, s, alpha),
        Backend::CfcSequential => g.cfc_scan(x, s, alpha),
        Backend::OdeEuler { substeps } => {
            let dt = w.decay.dt_policy.effective_dt(level, stride);
            g.euler_scan(x, s, lambda, F::of(dt), substeps)
        }
    }
}

/// Per-element cost of layer norm: mean, centred square, normalize, scale, shift.
pub const LN_OPS_PER_ELEMENT: u64 = 5;

/// Analytic multiply-accumulate count of one Parallel-backend block on a
/// `T × C` input with a length-`K` depthwise kernel:
///
/// ```text
/// layer_norm   5 T C
/// depthwise    T C K
/// pointwise    T C C + T C   (bias)
/// gate         T C C + T C   (bias) + T C (sigmoid)
/// mix * g      T C
/// relaxation   2 T C
/// ```
///
/// Every term is linear in `T`.
pub fn lptb_flops(t: u64, c: u64, k: u64) -> u64 {
    let tc = t * c;
    LN_OPS_PER_ELEMENT * tc + tc * k + 2 * (tc * c + tc) + tc + tc + 2 * tc
}

/// Operation count of the recurrence alone: a blend for the parallel and
/// closed-form paths, three operations per Euler substep.
pub fn relaxation_flops(backend: Backend, t: u64, c: u64) -> u64 {
    match backend {
        Backend::Parallel | Backend::CfcSequential => 2 * t * c,
        Backend::OdeEuler { substeps } => 3 * substeps as u64 * t * c,
    }
}

/// [`lptb_flops`] with the relaxation term of `backend`.
pub fn lptb_flops_for(backend: Backend, t: u64, c: u64, k: u64) -> u64 {
    lptb_flops(t, c, k) - 2 * t * c + relaxation_flops(backend, t, c)
}

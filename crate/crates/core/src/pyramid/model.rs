use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::PyramidConfig;
use crate::array::DenseArray;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::liquid::{lptb_flops_for, lptb_forward, uniform, Backend, ForwardMode, LptbInit, LptbWeights, LN_EPS, LN_OPS_PER_ELEMENT};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct StemWeights {
    pub weight: ParamId,
    pub bias: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

/// Classification and regression heads, shared by every level.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub trunk: Vec<(ParamId, ParamId)>,
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
    pub reg_weight: ParamId,
    pub reg_bias: ParamId,
}

/// Head outputs of one level, as graph nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelOutput {
    /// `T_l × num_classes`
    pub cls_logits: Var,
    /// `T_l × 2`, distances to start and end in level tokens.
    pub reg_offsets: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub features: Vec<Var>,
    pub heads: Vec<LevelOutput>,
    /// Unpadded input length in level-0 tokens.
    pub valid_len: usize,
    pub padded_len: usize,
}

/// Materialized head outputs of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPrediction<F> {
    pub level: usize,
    /// Level-0 tokens per token of this level.
    pub stride: usize,
    pub cls_logits: DenseArray<F>,
    pub reg_offsets: DenseArray<F>,
}

/// Everything `decode` needs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<F> {
    pub levels: Vec<LevelPrediction<F>>,
    pub valid_len: usize,
    pub base_dt: f64,
}

/// Per-level feature maps with token timestamps in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures<F> {
    pub features: Vec<DenseArray<F>>,
    pub timestamps: Vec<Vec<f64>>,
}

/// Feature-pyramid detector: stem, one stack of blocks per level with
/// max-pool downsampling in between, and shared heads.
#[derive(Debug, Clone)]
pub struct Detector<F> {
    pub cfg: PyramidConfig,
    pub store: ParamStore<F>,
    pub stem: StemWeights,
    pub blocks: Vec<Vec<LptbWeights>>,
    pub head: HeadWeights,
}

impl<F: Real> Detector<F> {
    pub fn new(cfg: PyramidConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (cin, c, k) = (cfg.input_dim, cfg.embed_dim, cfg.num_classes);
        let fan_in = 1.0 / (cin as f64).sqrt();
        let fan = 1.0 / (c as f64).sqrt();

        let stem = StemWeights {
            weight: store.add("stem.weight", uniform(&mut rng, &[cin, c], fan_in))?,
            bias: store.add("stem.bias", DenseArray::zeros(&[c]))?,
            ln_gamma: store.add("stem.ln_gamma", DenseArray::full(&[c], F::one()))?,
            ln_beta: store.add("stem.ln_beta", DenseArray::zeros(&[c]))?,
        };

        let init = LptbInit {
            channels: c,
            kernel_size: cfg.kernel_size,
            sharing: cfg.decay_sharing,
            epsilon: cfg.epsilon,
            dt_policy: cfg.dt_policy,
            dropout_rate: cfg.dropout,
        };
        let mut blocks = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let mut level = Vec::with_capacity(cfg.blocks_per_level);
            for b in 0..cfg.blocks_per_level {
                level.push(LptbWeights::init(&mut store, &format!("pyramid.l{l}.b{b}"), &init, &mut rng)?);
            }
            blocks.push(level);
        }

        let mut trunk = Vec::with_capacity(cfg.head_layers);
        for i in 0..cfg.head_layers {
            let w = store.add(format!("head.trunk{i}.weight"), uniform(&mut rng, &[c, c], fan))?;
            let b = store.add(format!("head.trunk{i}.bias"), DenseArray::zeros(&[c]))?;
            trunk.push((w, b));
        }
        let prior_bias = -((1.0 - cfg.cls_prior) / cfg.cls_prior).ln();
        let head = HeadWeights {
            trunk,
            cls_weight: store.add("head.cls.weight", uniform(&mut rng, &[c, k], fan))?,
            cls_bias: store.add("head.cls.bias", DenseArray::full(&[k], F::of(prior_bias)))?,
            reg_weight: store.add("head.reg.weight", uniform(&mut rng, &[c, 2], fan))?,
            reg_bias: store.add("head.reg.bias", DenseArray::zeros(&[2]))?,
        };

        Ok(Self {
            cfg,
            store,
            stem,
            blocks,
            head,
        })
    }

    /// Overwrites every parameter from `(name, value)` pairs. Names and
    /// shapes must match this architecture exactly.
    pub fn load_values(&mut self, values: Vec<(String, DenseArray<F>)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {} tensors, architecture expects {}",
                values.len(),
                self.store.len()
            )));
        }
        for (name, value) in values {
            let id = self
                .store
                .id(&name)
                .ok_or_else(|| Error::Mismatch(format!("unexpected parameter '{name}'")))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter '{name}': shape {:?} vs expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Scalars held by decay parameters only.
    pub fn num_decay_params(&self) -> usize {
        self.blocks
            .iter()
            .flatten()
            .map(|b| self.store.value(b.decay.rho).len())
            .sum()
    }

    /// Per-token projection to `embed_dim` followed by layer norm.
    pub fn stem(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (t, cin) = g.value(x).dims2()?;
        if t == 0 {
            return Err(Error::shape("stem over an empty sequence"));
        }
        if cin != self.cfg.input_dim {
            return Err(Error::shape(format!(
                "feature width {cin} does not match input_dim {}",
                self.cfg.input_dim
            )));
        }
        let w = g.param(&self.store, self.stem.weight);
        let b = g.param(&self.store, self.stem.bias);
        let h = g.linear(x, w, b)?;
        let gamma = g.param(&self.store, self.stem.ln_gamma);
        let beta = g.param(&self.store, self.stem.ln_beta);
        g.layer_norm(h, gamma, beta, F::of(LN_EPS))
    }

    /// Level 0 is the block stack applied to `x`; each later level pools the
    /// previous one by `downsample_stride` first.
    pub fn build_pyramid(&self, g: &mut Graph<F>, x: Var, backend: Backend, mode: ForwardMode) -> Result<Vec<Var>> {
        let t = g.value(x).dims2()?.0;
        self.build_pyramid_masked(g, x, t, backend, mode)
    }

    /// Zeroes rows at and after `valid` so padding never feeds a layer norm
    /// with anything but an exact zero row.
    fn mask_padding(&self, g: &mut Graph<F>, x: Var, valid: usize) -> Result<Var> {
        let (t, c) = g.value(x).dims2()?;
        if valid >= t {
            return Ok(x);
        }
        let mut mask = DenseArray::zeros(&[t, c]);
        mask.data_mut()[..valid * c].fill(F::one());
        let mask = g.input(mask);
        g.mul(x, mask)
    }

    /// As [`Self::build_pyramid`], with level outputs masked beyond the
    /// tokens covering the first `valid_len` inputs.
    fn build_pyramid_masked(
        &self,
        g: &mut Graph<F>,
        x: Var,
        valid_len: usize,
        backend: Backend,
        mode: ForwardMode,
    ) -> Result<Vec<Var>> {
        let (t, _) = g.value(x).dims2()?;
        let m = self.cfg.length_multiple();
        if t < m || t % m != 0 {
            return Err(Error::shape(format!(
                "pyramid input length {t} must be a positive multiple of {m}"
            )));
        }
        let stride = self.cfg.downsample_stride;
        let mut out = Vec::with_capacity(self.cfg.levels);
        let mut h = x;
        for (l, level) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = g.max_pool(h, stride)?;
            }
            for w in level {
                h = lptb_forward(g, &self.store, h, w, l, stride, backend, mode)?;
            }
            h = self.mask_padding(g, h, valid_len.div_ceil(self.cfg.level_stride(l)))?;
            out.push(h);
        }
        Ok(out)
    }

    pub fn heads(&self, g: &mut Graph<F>, feats: &[Var]) -> Result<Vec<LevelOutput>> {
        let mut out = Vec::with_capacity(feats.len());
        for &f in feats {
            let (_, c) = g.value(f).dims2()?;
            if c != self.cfg.embed_dim {
                return Err(Error::shape(format!("head input width {c}, expected {}", self.cfg.embed_dim)));
            }
            let mut h = f;
            for &(w, b) in &self.head.trunk {
                let (w, b) = (g.param(&self.store, w), g.param(&self.store, b));
                let z = g.linear(h, w, b)?;
                h = g.relu(z)?;
            }
            let (cw, cb) = (g.param(&self.store, self.head.cls_weight), g.param(&self.store, self.head.cls_bias));
            let cls_logits = g.linear(h, cw, cb)?;
            let (rw, rb) = (g.param(&self.store, self.head.reg_weight), g.param(&self.store, self.head.reg_bias));
            let raw = g.linear(h, rw, rb)?;
            let reg_offsets = g.softplus(raw)?;
            out.push(LevelOutput {
                cls_logits,
                reg_offsets,
            });
        }
        Ok(out)
    }

    /// Pads `features` (`T × input_dim`) to the pyramid length multiple and
    /// runs stem, pyramid and heads. Padded tokens enter the pyramid as
    /// zeros.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        features: &DenseArray<F>,
        backend: Backend,
        mode: ForwardMode,
    ) -> Result<DetectorOutput> {
        let (t, _) = features.dims2()?;
        if t == 0 {
            return Err(Error::shape("empty feature sequence"));
        }
        let padded_len = self.cfg.padded_len(t);
        let x = g.input(features.pad_rows(padded_len)?);
        let h = self.stem(g, x)?;
        let h = self.mask_padding(g, h, t)?;
        let feats = self.build_pyramid_masked(g, h, t, backend, mode)?;
        let heads = self.heads(g, &feats)?;
        Ok(DetectorOutput {
            features: feats,
            heads,
            valid_len: t,
            padded_len,
        })
    }

    /// Evaluation-mode forward on an inference graph.
    pub fn predict(&self, features: &DenseArray<F>, backend: Backend) -> Result<Predictions<F>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, features, backend, ForwardMode::eval())?;
        let levels = out
            .heads
            .iter()
            .enumerate()
            .map(|(l, h)| LevelPrediction {
                level: l,
                stride: self.cfg.level_stride(l),
                cls_logits: g.value(h.cls_logits).clone(),
                reg_offsets: g.value(h.reg_offsets).clone(),
            })
            .collect();
        Ok(Predictions {
            levels,
            valid_len: out.valid_len,
            base_dt: self.cfg.token_dt,
        })
    }

    /// Pyramid features only (no heads), evaluation mode.
    pub fn level_features(&self, features: &DenseArray<F>, backend: Backend) -> Result<LevelFeatures<F>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, features, backend, ForwardMode::eval())?;
        let base_dt = self.cfg.token_dt;
        let mut feats = Vec::new();
        let mut timestamps = Vec::new();
        for (l, &v) in out.features.iter().enumerate() {
            let value = g.value(v).clone();
            let s = self.cfg.level_stride(l) as f64;
            timestamps.push((0..value.shape()[0]).map(|t| t as f64 * s * base_dt).collect());
            feats.push(value);
        }
        Ok(LevelFeatures {
            features: feats,
            timestamps,
        })
    }

    /// Analytic operation count of one forward pass over `t` input tokens
    /// (after padding). Pooling counts one comparison per input element.
    pub fn flops(&self, t: usize, include_heads: bool) -> u64 {
        self.flops_for(Backend::Parallel, t, include_heads)
    }

    /// [`Self::flops`] with the recurrence cost of `backend`.
    pub fn flops_for(&self, backend: Backend, t: usize, include_heads: bool) -> u64 {
        let cfg = &self.cfg;
        let (cin, c, k, nc) = (
            cfg.input_dim as u64,
            cfg.embed_dim as u64,
            cfg.kernel_size as u64,
            cfg.num_classes as u64,
        );
        let lengths = cfg.level_lengths(cfg.padded_len(t));
        let t0 = lengths[0] as u64;
        let mut total = t0 * cin * c + t0 * c + LN_OPS_PER_ELEMENT * t0 * c;
        for (l, &tl) in lengths.iter().enumerate() {
            let tl = tl as u64;
            if l > 0 {
                total += lengths[l - 1] as u64 * c;
            }
            total += cfg.blocks_per_level as u64 * lptb_flops_for(backend, tl, c, k);
            if include_heads {
                total += cfg.head_layers as u64 * (tl * c * c + 2 * tl * c);
                total += tl * c * nc + tl * nc;
                total += tl * c * 2 + 2 * tl + 2 * tl;
            }
        }
        total
    }
}

//! Finite-difference check of the full detector loss.

use serde::{Deserialize, Serialize};

use super::assign::assign_targets;
use super::loss::detection_loss;
use super::trainer::TrainConfig;
use crate::autodiff::gradcheck::{check_params, GroupReport};
use crate::autodiff::{Graph, OpKind, ParamStore};
use crate::error::{Error, Result};
use crate::liquid::{Backend, DecaySharingMode, ForwardMode};
use crate::pyramid::{Detector, PyramidConfig};
use crate::synthetic::{generate, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSpec {
    pub seq_len: usize,
    pub channels: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub backend: Backend,
    /// Maximum allowed relative error per entry.
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Run the forward pass with dropout active (fixed mask).
    pub dropout: bool,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            seq_len: 32,
            channels: 8,
            levels: 6,
            num_classes: 3,
            backend: Backend::Parallel,
            tolerance: 1e-4,
            step: 1e-5,
            floor: 1e-6,
            dropout: true,
            seed: 0,
        }
    }
}

impl GradcheckSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 8 || self.channels == 0 || self.levels == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "gradcheck needs seq_len >= 8 and positive channels, levels, num_classes".into(),
            ));
        }
        if !(self.tolerance > 0.0 && self.step > 0.0 && self.floor > 0.0) {
            return Err(Error::Config("tolerance, step and floor must be positive".into()));
        }
        self.backend.validate()
    }

    pub fn model_config(&self, sharing: DecaySharingMode) -> PyramidConfig {
        PyramidConfig {
            input_dim: self.channels,
            embed_dim: self.channels,
            levels: self.levels,
            num_classes: self.num_classes,
            decay_sharing: sharing,
            dropout: if self.dropout { 0.1 } else { 0.0 },
            ..PyramidConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub sharing: DecaySharingMode,
    pub tolerance: f64,
    pub loss: f64,
    pub num_positive: usize,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passes(self.tolerance))
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Names of decay-rate parameters covered by the check.
    pub fn decay_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.name.ends_with(".rho"))
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sharing,group,entries,max_rel_error,max_abs_error,max_abs_grad,pass\n");
        for g in &self.groups {
            s.push_str(&format!(
                "{:?},{},{},{:.3e},{:.3e},{:.3e},{}\n",
                self.sharing,
                g.name,
                g.entries,
                g.max_rel_error,
                g.max_abs_error,
                g.max_abs_grad,
                g.passes(self.tolerance)
            ));
        }
        s
    }
}

/// Checks every parameter of a fresh 64-bit detector against central
/// differences of the detection loss on one synthetic video. `fault`
/// scales the backward rule of one op kind, as a negative control.
pub fn gradcheck_model(
    spec: &GradcheckSpec,
    sharing: DecaySharingMode,
    fault: Option<(OpKind, f64)>,
) -> Result<GradcheckReport> {
    spec.validate()?;
    let cfg = spec.model_config(sharing);
    let tc = TrainConfig::default();
    let data = generate(&SyntheticSpec {
        num_videos: 1,
        test_videos: 0,
        seq_len: spec.seq_len,
        feature_dim: spec.channels,
        num_classes: spec.num_classes,
        min_duration: 2,
        max_duration: (spec.seq_len / 3).max(2),
        seed: spec.seed,
        ..SyntheticSpec::default()
    })?;
    let video = &data.videos[0];
    let features = video.features.cast::<f64>();
    let targets = assign_targets::<f64>(&video.segments, spec.seq_len, &cfg, tc.center_sampling_radius, tc.band_base)?;
    let num_positive = targets.iter().map(|t| t.num_positive()).sum();

    let mut template = Detector::<f64>::new(cfg, spec.seed)?;
    let mut store = std::mem::take(&mut template.store);
    let mode = if spec.dropout {
        ForwardMode::train(spec.seed)
    } else {
        ForwardMode::eval()
    };
    let loss_fn = |g: &mut Graph<f64>, store: &ParamStore<f64>| {
        if let Some((kind, factor)) = fault {
            g.inject_fault(kind, factor);
        }
        let view = Detector {
            store: store.clone(),
            ..template.clone()
        };
        let out = view.forward(g, &features, spec.backend, mode)?;
        Ok(detection_loss(g, &out.heads, &targets, tc.focal_alpha, tc.focal_gamma)?.total)
    };
    let mut g = Graph::new();
    let l = loss_fn(&mut g, &store)?;
    let loss = g.value(l).data()[0];
    let groups = check_params(&mut store, spec.step, spec.floor, loss_fn)?;
    Ok(GradcheckReport {
        sharing,
        tolerance: spec.tolerance,
        loss,
        num_positive,
        groups,
    })
}

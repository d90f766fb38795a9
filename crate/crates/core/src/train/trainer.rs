use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, LevelTargets};
use super::eval::{evaluate, EvalResult, DEFAULT_THRESHOLDS};
use super::loss::{accumulate_terms, finish_loss, LossTerms};
use super::optim::{clip_grad_norm, Sgd};
use crate::array::DenseArray;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::liquid::{Backend, ForwardMode};
use crate::pyramid::{decode, nms, ActionSegment, DecodeConfig, Detector, PyramidConfig};
use crate::real::Real;
use crate::seed::derive_seed;
use crate::synthetic::{Dataset, Split, Video};

const SHUFFLE_SALT: u64 = 0x5348_5546;
const DROPOUT_SALT: u64 = 0x4452_4f50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// In level tokens around the segment midpoint.
    pub center_sampling_radius: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Upper edge of the level-0 duration band, in level-0 tokens.
    pub band_base: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub max_grad_norm: f64,
    pub backend: Backend,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 0,
            center_sampling_radius: 1.5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            band_base: 4.0,
            max_grad_norm: 5.0,
            backend: Backend::Parallel,
            eval_each_epoch: true,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.center_sampling_radius > 0.0) || !(self.band_base > 0.0) {
            return fail("center_sampling_radius and band_base must be positive");
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return fail("focal_gamma must be >= 0 and focal_alpha in [0, 1]");
        }
        if !(self.max_grad_norm >= 0.0) {
            return fail("max_grad_norm must be >= 0");
        }
        self.backend.validate()?;
        self.decode.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean normalized batch loss.
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub seconds: f64,
    pub eval_avg_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of the untrained model over one pass of the training
    /// split, same dropout and batching as epoch 1.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub best_avg_map: Option<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.loss)
    }

    /// `epoch,loss,cls_loss,reg_loss,seconds,avg_map`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,cls_loss,reg_loss,seconds,avg_map\n");
        s.push_str(&format!("0,{:.6},,,,\n", self.initial_loss));
        for e in &self.epochs {
            let m = e.eval_avg_map.map(|m| format!("{m:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.4},{m}\n",
                e.epoch, e.loss, e.cls_loss, e.reg_loss, e.seconds
            ));
        }
        s
    }
}

pub struct TrainOutcome<F> {
    pub model: Detector<F>,
    /// Snapshot with the best test mAP (the final model when evaluation is
    /// off).
    pub best: Detector<F>,
    pub report: TrainReport,
    pub best_eval: Option<EvalResult>,
}

struct Prepared<F> {
    features: DenseArray<F>,
    targets: Vec<LevelTargets<F>>,
}

fn prepare<F: Real>(videos: &[&Video], cfg: &PyramidConfig, tc: &TrainConfig) -> Result<Vec<Prepared<F>>> {
    videos
        .iter()
        .map(|v| {
            let t = v.features.shape()[0];
            Ok(Prepared {
                features: v.features.cast(),
                targets: assign_targets(&v.segments, t, cfg, tc.center_sampling_radius, tc.band_base)?,
            })
        })
        .collect()
}

/// Decoded and suppressed detections for each video.
pub fn detect<F: Real>(
    model: &Detector<F>,
    videos: &[&Video],
    backend: Backend,
    decode_cfg: &DecodeConfig,
) -> Result<Vec<Vec<ActionSegment>>> {
    decode_cfg.validate()?;
    videos
        .iter()
        .map(|v| {
            let preds = model.predict(&v.features.cast(), backend)?;
            let cands = decode(&preds, decode_cfg.score_threshold)?;
            nms(&cands, decode_cfg.iou_threshold, decode_cfg.max_keep)
        })
        .collect()
}

/// Detects on the test split and scores against its ground truth.
pub fn evaluate_model<F: Real>(
    model: &Detector<F>,
    dataset: &Dataset,
    backend: Backend,
    decode_cfg: &DecodeConfig,
    thresholds: &[f64],
) -> Result<EvalResult> {
    let videos: Vec<&Video> = dataset.split(Split::Test).collect();
    let preds = detect(model, &videos, backend, decode_cfg)?;
    let gt: Vec<Vec<ActionSegment>> = videos.iter().map(|v| v.segments.clone()).collect();
    evaluate(&preds, &gt, thresholds)
}

struct BatchLoss {
    total: f64,
    cls: f64,
    reg: f64,
}

fn run_batch<F: Real>(
    model: &mut Detector<F>,
    batch: &[&Prepared<F>],
    tc: &TrainConfig,
    dropout_seed: u64,
    update: Option<&mut Sgd<F>>,
) -> Result<BatchLoss> {
    let mut g = Graph::new();
    let mut terms = LossTerms::empty();
    for (i, item) in batch.iter().enumerate() {
        let mode = ForwardMode::train(derive_seed(dropout_seed, i as u64));
        let out = model.forward(&mut g, &item.features, tc.backend, mode)?;
        terms = accumulate_terms(&mut g, terms, &out.heads, &item.targets, tc.focal_alpha, tc.focal_gamma)?;
    }
    let loss = finish_loss(&mut g, terms)?;
    let read = |v| g.value(v).data()[0].to_f64_lossy();
    let result = BatchLoss {
        total: read(loss.total),
        cls: read(loss.cls),
        reg: read(loss.reg),
    };
    if !result.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if let Some(opt) = update {
        model.store.zero_grad();
        g.backward_into(loss.total, &mut model.store)?;
        clip_grad_norm(&mut model.store, tc.max_grad_norm);
        opt.step(&mut model.store)?;
    }
    Ok(result)
}

/// Trains a fresh detector on the train split. Single-threaded and fully
/// determined by `tc.seed`.
pub fn train<F: Real>(dataset: &Dataset, model_cfg: &PyramidConfig, tc: &TrainConfig) -> Result<TrainOutcome<F>> {
    tc.validate()?;
    model_cfg.validate()?;
    if model_cfg.input_dim != dataset.feature_dim || model_cfg.num_classes != dataset.num_classes {
        return Err(Error::Config(format!(
            "model expects {} features / {} classes, dataset has {} / {}",
            model_cfg.input_dim, model_cfg.num_classes, dataset.feature_dim, dataset.num_classes
        )));
    }
    if (model_cfg.token_dt - dataset.base_dt).abs() > 1e-12 * dataset.base_dt {
        return Err(Error::Config(format!(
            "model token_dt {} differs from dataset base_dt {}",
            model_cfg.token_dt, dataset.base_dt
        )));
    }
    let train_videos: Vec<&Video> = dataset.split(Split::Train).collect();
    if train_videos.is_empty() {
        return Err(Error::Config("dataset has no training videos".into()));
    }
    let evaluate_each = tc.eval_each_epoch && dataset.split(Split::Test).next().is_some();
    let prepared = prepare::<F>(&train_videos, model_cfg, tc)?;
    let mut model = Detector::<F>::new(model_cfg.clone(), tc.seed)?;
    let mut opt = Sgd::new(&model.store, tc.learning_rate, tc.momentum, tc.weight_decay)?;

    let batches_for = |epoch: usize| -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed ^ SHUFFLE_SALT, epoch as u64)));
        order.chunks(tc.batch_size).map(|c| c.to_vec()).collect()
    };
    let batch_seed = |epoch: usize, b: usize| derive_seed(derive_seed(tc.seed ^ DROPOUT_SALT, epoch as u64), b as u64);

    let mut initial = 0.0;
    let first = batches_for(1);
    for (b, idx) in first.iter().enumerate() {
        let batch: Vec<&Prepared<F>> = idx.iter().map(|&i| &prepared[i]).collect();
        initial += run_batch(&mut model, &batch, tc, batch_seed(1, b), None)
            .map_err(|e| abort(e, 0, b))?
            .total;
    }
    let initial_loss = initial / first.len() as f64;

    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, Detector<F>, EvalResult)> = None;
    for epoch in 1..=tc.epochs {
        let started = Instant::now();
        let batches = batches_for(epoch);
        let (mut tot, mut cls, mut reg) = (0.0, 0.0, 0.0);
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Prepared<F>> = idx.iter().map(|&i| &prepared[i]).collect();
            let l = run_batch(&mut model, &batch, tc, batch_seed(epoch, b), Some(&mut opt))
                .map_err(|e| abort(e, epoch, b))?;
            tot += l.total;
            cls += l.cls;
            reg += l.reg;
        }
        let seconds = started.elapsed().as_secs_f64();
        let n = batches.len() as f64;
        let eval_avg_map = if evaluate_each {
            let r = evaluate_model(&model, dataset, tc.backend, &tc.decode, &DEFAULT_THRESHOLDS)?;
            let m = r.avg_map;
            if best.as_ref().is_none_or(|(_, bm, _, _)| m > *bm) {
                best = Some((epoch, m, model.clone(), r));
            }
            Some(m)
        } else {
            None
        };
        epochs.push(EpochStats {
            epoch,
            loss: tot / n,
            cls_loss: cls / n,
            reg_loss: reg / n,
            seconds,
            eval_avg_map,
        });
    }

    let (best_epoch, best_avg_map, best_model, best_eval) = match best {
        Some((e, m, d, r)) => (Some(e), Some(m), d, Some(r)),
        None => (None, None, model.clone(), None),
    };
    Ok(TrainOutcome {
        model,
        best: best_model,
        report: TrainReport {
            initial_loss,
            epochs,
            best_epoch,
            best_avg_map,
        },
        best_eval,
    })
}

fn abort(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {batch}")),
        other => other,
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{iou, ActionSegment};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// Detection quality over a set of IoU thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// Class id -> AP at each threshold. Only classes with ground truth.
    pub per_class_ap: BTreeMap<usize, Vec<f64>>,
    /// Threshold (two decimals) -> mAP.
    pub map_per_threshold: BTreeMap<String, f64>,
    pub avg_map: f64,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl EvalResult {
    /// mAP in threshold order.
    pub fn maps(&self) -> Vec<f64> {
        self.thresholds
            .iter()
            .map(|t| self.map_per_threshold[&threshold_key(*t)])
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `class,ap@0.30,...` rows, then a `mAP` row with the average in the
    /// last column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for t in &self.thresholds {
            let _ = write!(s, ",ap@{t:.2}");
        }
        s.push_str(",mean\n");
        for (class, aps) in &self.per_class_ap {
            let _ = write!(s, "{class}");
            for ap in aps {
                let _ = write!(s, ",{ap:.6}");
            }
            let _ = writeln!(s, ",{:.6}", aps.iter().sum::<f64>() / aps.len() as f64);
        }
        s.push_str("mAP");
        for m in self.maps() {
            let _ = write!(s, ",{m:.6}");
        }
        let _ = writeln!(s, ",{:.6}", self.avg_map);
        s
    }
}

/// Area under the monotone precision envelope of a ranked TP/FP list.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    tp.iter()
        .zip(&precision)
        .filter(|(t, _)| **t)
        .map(|(_, p)| p / num_gt as f64)
        .fold(0.0, |a, b| a + b)
}

/// Ranked TP flags for one class at one threshold. Predictions are visited
/// by descending score (ties keep input order); each takes the unmatched
/// ground-truth segment of its video with the highest IoU, if that IoU
/// reaches `threshold`.
pub fn match_class(
    predictions: &[Vec<ActionSegment>],
    ground_truth: &[Vec<ActionSegment>],
    class_id: usize,
    threshold: f64,
) -> Vec<bool> {
    let mut ranked: Vec<(usize, &ActionSegment)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(v, p)| p.iter().filter(|s| s.class_id == class_id).map(move |s| (v, s)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .into_iter()
        .map(|(v, p)| {
            let best = ground_truth[v]
                .iter()
                .enumerate()
                .filter(|(j, g)| g.class_id == class_id && !used[v][*j])
                .map(|(j, g)| (j, iou(p, g)))
                .fold(None, |acc: Option<(usize, f64)>, (j, o)| match acc {
                    Some((_, bo)) if bo >= o => acc,
                    _ => Some((j, o)),
                });
            match best {
                Some((j, o)) if o >= threshold => {
                    used[v][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Per-class AP and mAP across `thresholds`. `predictions[v]` and
/// `ground_truth[v]` belong to the same video.
pub fn evaluate(
    predictions: &[Vec<ActionSegment>],
    ground_truth: &[Vec<ActionSegment>],
    thresholds: &[f64],
) -> Result<EvalResult> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} prediction lists for {} videos",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if thresholds.is_empty()
        || thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0))
        || thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::invalid("IoU thresholds must be strictly ascending inside (0, 1)"));
    }
    let mut gt_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in ground_truth.iter().flatten() {
        *gt_counts.entry(g.class_id).or_default() += 1;
    }
    if gt_counts.is_empty() {
        return Err(Error::invalid("no ground-truth segments to evaluate against"));
    }
    let per_class_ap: BTreeMap<usize, Vec<f64>> = gt_counts
        .iter()
        .map(|(&c, &n)| {
            let aps = thresholds
                .iter()
                .map(|&t| average_precision(&match_class(predictions, ground_truth, c, t), n))
                .collect();
            (c, aps)
        })
        .collect();
    let n_classes = per_class_ap.len() as f64;
    let maps: Vec<f64> = (0..thresholds.len())
        .map(|i| per_class_ap.values().fold(0.0, |acc, a| acc + a[i]) / n_classes)
        .collect();
    Ok(EvalResult {
        thresholds: thresholds.to_vec(),
        map_per_threshold: thresholds.iter().zip(&maps).map(|(t, m)| (threshold_key(*t), *m)).collect(),
        avg_map: maps.iter().fold(0.0, |a, b| a + b) / maps.len() as f64,
        per_class_ap,
    })
}

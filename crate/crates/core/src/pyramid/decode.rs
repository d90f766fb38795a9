use serde::{Deserialize, Serialize};

use super::model::Predictions;
use super::segment::{iou, ActionSegment};
use crate::error::{Error, Result};
use crate::real::Real;

/// Post-processing knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub max_keep: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            iou_threshold: 0.5,
            max_keep: 100,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!("score_threshold {} outside [0, 1]", self.score_threshold)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("iou_threshold {} outside (0, 1]", self.iou_threshold)));
        }
        Ok(())
    }
}

/// Turns head outputs into candidate segments. Every (token, class) pair with
/// `sigmoid(logit) >= score_threshold` emits one segment around the token
/// center, clipped to the unpadded sequence. Padding tokens are skipped.
pub fn decode<F: Real>(preds: &Predictions<F>, score_threshold: f64) -> Result<Vec<ActionSegment>> {
    if !(0.0..=1.0).contains(&score_threshold) {
        return Err(Error::invalid(format!("score threshold {score_threshold} outside [0, 1]")));
    }
    let duration = preds.valid_len as f64 * preds.base_dt;
    let mut out = Vec::new();
    for level in &preds.levels {
        let (t_l, k) = level.cls_logits.dims2()?;
        if level.reg_offsets.shape() != [t_l, 2] {
            return Err(Error::shape(format!(
                "level {}: offsets {:?} do not match {t_l} tokens",
                level.level,
                level.reg_offsets.shape()
            )));
        }
        let unit = level.stride as f64 * preds.base_dt;
        for t in 0..t_l {
            if t * level.stride >= preds.valid_len {
                break;
            }
            let center = t as f64 * unit;
            let off = level.reg_offsets.row(t);
            let start = (center - off[0].to_f64_lossy() * unit).max(0.0);
            let end = (center + off[1].to_f64_lossy() * unit).min(duration);
            if !(end > start) {
                continue;
            }
            for (class_id, &z) in level.cls_logits.row(t).iter().enumerate().take(k) {
                let score = z.sigmoid().to_f64_lossy();
                if score >= score_threshold {
                    out.push(ActionSegment {
                        start,
                        end,
                        class_id,
                        score,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Greedy hard NMS within each class. Output is sorted by descending score
/// (stable for ties) and truncated to `max_keep`.
pub fn nms(segments: &[ActionSegment], iou_threshold: f64, max_keep: usize) -> Result<Vec<ActionSegment>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!("NMS threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<&ActionSegment> = segments.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ActionSegment> = Vec::new();
    for cand in order {
        if kept.len() >= max_keep {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(k, cand) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    Ok(kept)
}

/// One JSON object per line: `{video_id, t_start, t_end, class, score}`,
/// times and scores with six decimals.
pub fn detections_jsonl(video_id: &str, segments: &[ActionSegment]) -> String {
    let id = serde_json::to_string(video_id).expect("string serializes");
    let mut s = String::new();
    for seg in segments {
        s.push_str(&format!(
            "{{\"video_id\":{id},\"t_start\":{:.6},\"t_end\":{:.6},\"class\":{},\"score\":{:.6}}}\n",
            seg.start, seg.end, seg.class_id, seg.score
        ));
    }
    s
}

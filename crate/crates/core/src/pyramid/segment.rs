use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A detected or annotated action: `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

impl ActionSegment {
    pub fn new(start: f64, end: f64, class_id: usize, score: f64) -> Result<Self> {
        let seg = Self {
            start,
            end,
            class_id,
            score,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start >= 0.0 && self.end > self.start && self.end.is_finite()) {
            return Err(Error::invalid(format!(
                "segment [{}, {}] must satisfy 0 <= start < end",
                self.start, self.end
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Temporal intersection over union.
pub fn iou(a: &ActionSegment, b: &ActionSegment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

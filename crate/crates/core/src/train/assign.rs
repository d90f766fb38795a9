use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::pyramid::{ActionSegment, PyramidConfig};
use crate::real::Real;

/// Training targets of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets<F> {
    /// `T_l × num_classes`, one-hot on positive tokens.
    pub cls: DenseArray<F>,
    /// `T_l × 2` distances to start/end in level tokens; zero off positives.
    pub reg: DenseArray<F>,
    /// 1 on tokens inside the unpadded sequence, 0 on padding.
    pub valid: Vec<F>,
    /// 1 on positive tokens.
    pub positive: Vec<F>,
}

impl<F: Real> LevelTargets<F> {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p > F::zero()).count()
    }
}

/// Duration band of `level` in level-0 tokens: `[0, b)`, `[b, b s)`,
/// `[b s, b s^2)`, ... with the last level open-ended.
pub fn duration_band(cfg: &PyramidConfig, level: usize, band_base: f64) -> (f64, f64) {
    let s = cfg.downsample_stride as f64;
    let lo = if level == 0 { 0.0 } else { band_base * s.powi(level as i32 - 1) };
    let hi = if level + 1 == cfg.levels {
        f64::INFINITY
    } else {
        band_base * s.powi(level as i32)
    };
    (lo, hi)
}

/// Level whose duration band contains a segment of `len` level-0 tokens.
pub fn level_for_duration(cfg: &PyramidConfig, len: f64, band_base: f64) -> usize {
    (0..cfg.levels)
        .find(|&l| {
            let (lo, hi) = duration_band(cfg, l, band_base);
            len >= lo && len < hi
        })
        .unwrap_or(cfg.levels - 1)
}

/// Anchor-free assignment. Token `t` of level `l` sits at `t * stride^l`
/// level-0 tokens; it is positive for a segment when it lies strictly inside
/// the segment, within `radius * stride^l` of its midpoint, and the segment
/// length falls in the level's band. Overlapping claims go to the shortest
/// segment.
pub fn assign_targets<F: Real>(
    segments: &[ActionSegment],
    valid_len: usize,
    cfg: &PyramidConfig,
    radius: f64,
    band_base: f64,
) -> Result<Vec<LevelTargets<F>>> {
    if !(radius > 0.0) || !(band_base > 0.0) {
        return Err(Error::invalid("center radius and band base must be positive"));
    }
    let base_dt = cfg.token_dt;
    let padded = cfg.padded_len(valid_len);
    let k = cfg.num_classes;
    let spans: Vec<(f64, f64, usize)> = segments
        .iter()
        .map(|s| (s.start / base_dt, s.end / base_dt, s.class_id))
        .collect();
    if let Some(&(_, _, c)) = spans.iter().find(|s| s.2 >= k) {
        return Err(Error::invalid(format!("class id {c} >= num_classes {k}")));
    }

    let mut out = Vec::with_capacity(cfg.levels);
    for (l, t_l) in cfg.level_lengths(padded).into_iter().enumerate() {
        let stride = cfg.level_stride(l) as f64;
        let (lo, hi) = duration_band(cfg, l, band_base);
        let mut cls = DenseArray::zeros(&[t_l, k]);
        let mut reg = DenseArray::zeros(&[t_l, 2]);
        let mut valid = vec![F::zero(); t_l];
        let mut positive = vec![F::zero(); t_l];
        for t in 0..t_l {
            let c = t as f64 * stride;
            if c >= valid_len as f64 {
                continue;
            }
            valid[t] = F::one();
            let best = spans
                .iter()
                .filter(|(s, e, _)| {
                    let len = e - s;
                    len >= lo && len < hi && *s < c && c < *e && (c - 0.5 * (s + e)).abs() <= radius * stride
                })
                .min_by(|a, b| (a.1 - a.0).total_cmp(&(b.1 - b.0)));
            if let Some(&(s, e, class_id)) = best {
                positive[t] = F::one();
                cls.data_mut()[t * k + class_id] = F::one();
                reg.data_mut()[2 * t] = F::of((c - s) / stride);
                reg.data_mut()[2 * t + 1] = F::of((e - c) / stride);
            }
        }
        out.push(LevelTargets {
            cls,
            reg,
            valid,
            positive,
        });
    }
    Ok(out)
}

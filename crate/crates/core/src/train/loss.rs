use super::assign::LevelTargets;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pyramid::LevelOutput;
use crate::real::Real;

/// Un-normalized loss sums of one video (or several).
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Option<Var>,
    pub reg: Option<Var>,
    pub num_positive: usize,
}

impl LossTerms {
    pub fn empty() -> Self {
        Self {
            cls: None,
            reg: None,
            num_positive: 0,
        }
    }
}

/// Graph nodes of a normalized loss.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub num_positive: usize,
}

fn add_opt<F: Real>(g: &mut Graph<F>, acc: Option<Var>, v: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => g.add(a, v)?,
        None => v,
    }))
}

/// Adds one video's focal (valid tokens) and IoU (positive tokens) sums to
/// `terms`.
pub fn accumulate_terms<F: Real>(
    g: &mut Graph<F>,
    terms: LossTerms,
    heads: &[LevelOutput],
    targets: &[LevelTargets<F>],
    focal_alpha: f64,
    focal_gamma: f64,
) -> Result<LossTerms> {
    if heads.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} head levels vs {} target levels",
            heads.len(),
            targets.len()
        )));
    }
    let mut terms = terms;
    for (h, tg) in heads.iter().zip(targets) {
        let fl = g.focal_loss(h.cls_logits, &tg.cls, &tg.valid, F::of(focal_alpha), F::of(focal_gamma))?;
        terms.cls = add_opt(g, terms.cls, fl)?;
        let npos = tg.num_positive();
        if npos > 0 {
            let il = g.iou_loss(h.reg_offsets, &tg.reg, &tg.positive)?;
            terms.reg = add_opt(g, terms.reg, il)?;
            terms.num_positive += npos;
        }
    }
    Ok(terms)
}

/// `(focal + iou) / max(1, positives)`.
pub fn finish_loss<F: Real>(g: &mut Graph<F>, terms: LossTerms) -> Result<LossOutput> {
    let zero = |g: &mut Graph<F>| g.input(crate::array::DenseArray::scalar(F::zero()));
    let cls_sum = match terms.cls {
        Some(v) => v,
        None => zero(g),
    };
    let reg_sum = match terms.reg {
        Some(v) => v,
        None => zero(g),
    };
    let scale = F::one() / F::of(terms.num_positive.max(1) as f64);
    let cls = g.affine(cls_sum, scale, F::zero())?;
    let reg = g.affine(reg_sum, scale, F::zero())?;
    let total = g.add(cls, reg)?;
    Ok(LossOutput {
        total,
        cls,
        reg,
        num_positive: terms.num_positive,
    })
}

/// Normalized loss of a single video.
pub fn detection_loss<F: Real>(
    g: &mut Graph<F>,
    heads: &[LevelOutput],
    targets: &[LevelTargets<F>],
    focal_alpha: f64,
    focal_gamma: f64,
) -> Result<LossOutput> {
    let terms = accumulate_terms(g, LossTerms::empty(), heads, targets, focal_alpha, focal_gamma)?;
    finish_loss(g, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::DenseArray;

    fn level(logits: Vec<f64>, offsets: Vec<f64>, g: &mut Graph<f64>) -> LevelOutput {
        let t = offsets.len() / 2;
        let k = logits.len() / t;
        LevelOutput {
            cls_logits: g.input(DenseArray::new(vec![t, k], logits).unwrap()),
            reg_offsets: g.input(DenseArray::new(vec![t, 2], offsets).unwrap()),
        }
    }

    fn targets(cls: Vec<f64>, reg: Vec<f64>, valid: Vec<f64>) -> LevelTargets<f64> {
        let t = valid.len();
        let k = cls.len() / t;
        let positive = (0..t).map(|r| if cls[r * k..(r + 1) * k].iter().any(|&c| c > 0.0) { 1.0 } else { 0.0 }).collect();
        LevelTargets {
            cls: DenseArray::new(vec![t, k], cls).unwrap(),
            reg: DenseArray::new(vec![t, 2], reg).unwrap(),
            valid,
            positive,
        }
    }

    #[test]
    fn perfect_prediction_is_nearly_free() {
        let mut g = Graph::new();
        let h = level(vec![30.0, -30.0, -30.0, -30.0], vec![1.5, 2.0, 0.7, 0.7], &mut g);
        let tg = targets(vec![1.0, 0.0, 0.0, 0.0], vec![1.5, 2.0, 0.0, 0.0], vec![1.0, 1.0]);
        let out = detection_loss(&mut g, &[h], &[tg], 0.25, 2.0).unwrap();
        assert!(g.value(out.total).data()[0] < 1e-3);
        assert_eq!(out.num_positive, 1);
    }

    #[test]
    fn no_positives_is_classification_only() {
        let mut g = Graph::new();
        let h = level(vec![0.0, 1.0], vec![1.0, 1.0, 1.0, 1.0], &mut g);
        let tg = targets(vec![0.0, 0.0], vec![0.0; 4], vec![1.0, 1.0]);
        let out = detection_loss(&mut g, &[h], &[tg], 0.25, 2.0).unwrap();
        assert_eq!(g.value(out.reg).data()[0], 0.0);
        let v = g.value(out.total).data()[0];
        assert!(v.is_finite() && v > 0.0);
        assert_eq!(v, g.value(out.cls).data()[0]);
    }

    #[test]
    fn single_token_focal_by_hand() {
        // z = 0.5, positive, alpha 0.25, gamma 2: -0.25 (1 - p)^2 ln p
        let mut g = Graph::new();
        let h = level(vec![0.5], vec![1.0, 1.0], &mut g);
        let tg = targets(vec![1.0], vec![1.0, 1.0], vec![1.0]);
        let out = detection_loss(&mut g, &[h], &[tg], 0.25, 2.0).unwrap();
        let p = 1.0 / (1.0 + (-0.5f64).exp());
        let expected = -0.25 * (1.0 - p).powi(2) * p.ln();
        assert!((g.value(out.cls).data()[0] - expected).abs() < 1e-15);
        assert_eq!(g.value(out.reg).data()[0], 0.0);
        // negative token: -(1 - alpha) p^2 ln(1 - p)
        let mut g = Graph::new();
        let h = level(vec![0.5], vec![1.0, 1.0], &mut g);
        let tg = targets(vec![0.0], vec![0.0, 0.0], vec![1.0]);
        let out = detection_loss(&mut g, &[h], &[tg], 0.25, 2.0).unwrap();
        let expected = -0.75 * p.powi(2) * (1.0 - p).ln();
        assert!((g.value(out.total).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn normalization_and_masking() {
        let mut g = Graph::new();
        // second token is padding with a huge wrong logit
        let h = level(vec![2.0, 50.0, -1.0], vec![1.0, 1.0, 9.0, 9.0, 2.0, 1.0], &mut g);
        let tg = targets(vec![1.0, 0.0, 1.0], vec![1.0, 3.0, 0.0, 0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]);
        let out = detection_loss(&mut g, &[h], &[tg], 0.25, 2.0).unwrap();
        assert_eq!(out.num_positive, 2);
        let f = |z: f64| {
            let p = 1.0 / (1.0 + (-z).exp());
            -0.25 * (1.0 - p).powi(2) * p.ln()
        };
        let cls = (f(2.0) + f(-1.0)) / 2.0;
        // IoU [1,1] vs [1,3] = 2/4; [2,1] vs [1,1] = 2/3
        let reg = ((1.0 - 0.5) + (1.0 - 2.0 / 3.0)) / 2.0;
        assert!((g.value(out.cls).data()[0] - cls).abs() < 1e-14);
        assert!((g.value(out.reg).data()[0] - reg).abs() < 1e-14);
    }

    #[test]
    fn mismatched_levels_error() {
        let mut g = Graph::new();
        let h = level(vec![0.0], vec![1.0, 1.0], &mut g);
        assert!(detection_loss::<f64>(&mut g, &[h], &[], 0.25, 2.0).is_err());
    }
}

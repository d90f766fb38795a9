//! The relaxation operator: decay parameterization, gated stimulus, the
//! parallel block and its two sequential reference backends.

mod block;
mod decay;

pub use block::{
    lptb_flops, lptb_flops_for, lptb_forward, relaxation_flops, stimulus, Backend, ForwardMode, LptbInit, LptbWeights, DEFAULT_DROPOUT,
    DEFAULT_KERNEL, DEFAULT_SUBSTEPS, LN_EPS, LN_OPS_PER_ELEMENT,
};
pub(crate) use block::uniform;
pub use decay::{
    decay_coefficients, default_rho, retention, softplus_inverse, DecayParams, DecaySharingMode,
    DtPolicy, DEFAULT_DT, DEFAULT_EPSILON,
};

use crate::array::DenseArray;
use crate::autodiff::Graph;
use crate::error::Result;
use crate::real::Real;

/// Convex blend `alpha * x + (1 - alpha) * s` on plain arrays. `alpha` holds
/// one value or one per channel, each strictly inside (0, 1).
pub fn parallel_relax<F: Real>(x: &DenseArray<F>, s: &DenseArray<F>, alpha: &DenseArray<F>) -> Result<DenseArray<F>> {
    let mut g = Graph::inference();
    let (xv, sv, av) = (g.input(x.clone()), g.input(s.clone()), g.input(alpha.clone()));
    let out = g.relax(xv, sv, av)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn relax_limits_and_arithmetic() {
        let x = DenseArray::<f64>::from_f64(&[1, 1], &[2.0]).unwrap();
        let s = DenseArray::from_f64(&[1, 1], &[0.0]).unwrap();
        let a = DenseArray::from_f64(&[1], &[0.25]).unwrap();
        assert_eq!(parallel_relax(&x, &s, &a).unwrap().data(), &[0.5]);

        let x = DenseArray::<f64>::from_f64(&[2, 2], &[1.0, -3.0, 2.0, 7.0]).unwrap();
        let s = DenseArray::from_f64(&[2, 2], &[4.0, 4.0, -1.0, 0.0]).unwrap();
        let near_one = DenseArray::from_f64(&[1], &[1.0 - 1e-12]).unwrap();
        let near_zero = DenseArray::from_f64(&[1], &[1e-12]).unwrap();
        assert!(parallel_relax(&x, &s, &near_one).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
        assert!(parallel_relax(&x, &s, &near_zero).unwrap().max_abs_diff(&s).unwrap() < 1e-10);
    }

    #[test]
    fn relax_rejects_alpha_outside_unit_interval() {
        let x = DenseArray::<f64>::zeros(&[2, 2]);
        for bad in [0.0, 1.0, -0.1, 1.5] {
            let a = DenseArray::from_f64(&[1], &[bad]).unwrap();
            assert!(matches!(parallel_relax(&x, &x, &a), Err(Error::AlphaOutOfRange(_))));
        }
        let wrong = DenseArray::from_f64(&[3], &[0.5; 3]).unwrap();
        assert!(parallel_relax(&x, &x, &wrong).is_err());
        let per_channel = DenseArray::from_f64(&[2], &[0.2, 0.8]).unwrap();
        let s = DenseArray::full(&[2, 2], 1.0);
        let out = parallel_relax(&x, &s, &per_channel).unwrap();
        let expected = DenseArray::from_f64(&[2, 2], &[0.8, 0.2, 0.8, 0.2]).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-15);
    }
}

use crate::array::DenseArray;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::real::Real;

/// Gradient descent with heavy-ball momentum and decoupled weight decay:
///
/// ```text
/// v <- mu v + grad
/// p <- p - lr v - lr wd p      (wd only on matrices)
/// ```
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<DenseArray<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(store: &ParamStore<F>, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be >= 0".into()));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: store.iter().map(|p| DenseArray::zeros(p.value.shape())).collect(),
        })
    }

    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::shape("optimizer state does not match the parameter store"));
        }
        let lr = F::of(self.learning_rate);
        let mu = F::of(self.momentum);
        let wd = F::of(self.weight_decay);
        for (p, v) in store.iter_mut().zip(self.velocity.iter_mut()) {
            let decay = if p.value.rank() >= 2 { lr * wd } else { F::zero() };
            let grad = p.grad.data();
            for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
                *vel = mu * *vel + g;
                *w = *w - lr * *vel - decay * *w;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = F::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", DenseArray::from_f64(&[1, 2], &[1.0, -2.0]).unwrap()).unwrap();
        s.add("b", DenseArray::from_f64(&[2], &[0.5, 0.5]).unwrap()).unwrap();
        s
    }

    #[test]
    fn momentum_and_decoupled_decay() {
        let mut s = store();
        let mut opt = Sgd::new(&s, 0.1, 0.9, 0.01).unwrap();
        for p in s.iter_mut() {
            p.grad.fill(1.0);
        }
        opt.step(&mut s).unwrap();
        // w: 1 - 0.1 * 1 - 0.1 * 0.01 * 1
        assert!((s.iter().next().unwrap().value.data()[0] - (1.0 - 0.1 - 0.001)).abs() < 1e-15);
        // bias: no decay
        assert!((s.iter().nth(1).unwrap().value.data()[0] - 0.4).abs() < 1e-15);
        opt.step(&mut s).unwrap();
        // velocity now 1.9
        assert!((s.iter().nth(1).unwrap().value.data()[0] - (0.4 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = store();
        let before: Vec<_> = s.iter().map(|p| p.value.clone()).collect();
        let mut opt = Sgd::new(&s, 0.0, 0.9, 0.1).unwrap();
        for p in s.iter_mut() {
            p.grad.fill(3.0);
        }
        opt.step(&mut s).unwrap();
        let after: Vec<_> = s.iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
        assert!(Sgd::new(&s, -1.0, 0.9, 0.0).is_err());
    }

    #[test]
    fn clipping() {
        let mut s = store();
        for p in s.iter_mut() {
            p.grad.fill(2.0);
        }
        let n = clip_grad_norm(&mut s, 1.0);
        assert!((n - 4.0).abs() < 1e-15);
        let after = clip_grad_norm(&mut s, 0.0);
        assert!((after - 1.0).abs() < 1e-12);
    }
}

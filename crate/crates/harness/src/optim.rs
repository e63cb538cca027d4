//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use std::collections::BTreeMap;

use ssmg_core::params::{Grads, ParamStore};
use ssmg_core::Real;

use crate::error::{config_err, HarnessError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamW<T: Real = f64> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient:
    /// `θ ← θ − lr · (m̂ / (√v̂ + ε) + wd · θ)`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64, wd: f64) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(HarnessError::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name)?;
            if p.len() != g.len() {
                return Err(config_err(format!("gradient for {name} has the wrong size")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(BETA1), T::c(BETA2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, wd, eps) = (T::c(lr), T::c(wd), T::c(EPS));
        for (name, g) in grads {
            let theta = params.get_mut(name)?.data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before scaling. A non-positive `max_norm` disables clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use ssmg_core::Tensor;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_f64([1], &[x]).unwrap()).unwrap();
        p
    }

    fn grad(x: f64) -> Grads<f64> {
        Grads::from([("w".to_string(), vec![x])])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(1.0);
        AdamW::new().update(&mut p, &grad(1.0), 0.1, 0.0).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert_eq!(p.get("w").unwrap().data()[0], expected);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = scalar_store(2.0);
        let mut opt = AdamW::new();
        opt.update(&mut p, &grad(0.0), 0.1, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 2.0);
        let mut opt = AdamW::new();
        opt.update(&mut p, &grad(0.0), 0.1, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = scalar_store(0.7);
        let mut opt = AdamW::new();
        let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        let (lr, wd) = (3e-3, 1e-2);
        for t in 1..=100 {
            let g: f64 = rng.random_range(-2.0..2.0);
            opt.update(&mut p, &grad(g), lr, wd).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * (mh / (vh.sqrt() + 1e-8) + wd * theta);
            assert!((p.get("w").unwrap().data()[0] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = scalar_store(1.0);
        let mut opt = AdamW::new();
        assert!(opt.update(&mut p, &grad(f64::NAN), 0.1, 0.0).is_err());
        let wide = Grads::from([("w".to_string(), vec![1.0, 2.0])]);
        assert!(opt.update(&mut p, &wide, 0.1, 0.0).is_err());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = Grads::from([("a".to_string(), vec![3.0f64]), ("b".to_string(), vec![4.0])]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
        assert!(clip_grad_norm(&mut g, 0.0) > 0.99);
    }

    proptest::proptest! {
        #[test]
        fn first_step_is_bounded_by_lr(
            g in proptest::collection::vec(-1e3f64..1e3, 1..20),
            lr in 1e-5f64..1.0,
        ) {
            let mut p = ParamStore::new();
            p.insert("w", Tensor::zeros([g.len()]).unwrap()).unwrap();
            let grads = Grads::from([("w".to_string(), g.clone())]);
            AdamW::new().update(&mut p, &grads, lr, 0.0).unwrap();
            for (&w, &gi) in p.get("w").unwrap().data().iter().zip(&g) {
                proptest::prop_assert!(w.abs() <= lr * (1.0 + 1e-12));
                proptest::prop_assert!(w * gi <= 0.0);
            }
        }

        #[test]
        fn clipping_preserves_direction(
            g in proptest::collection::vec(-10.0f64..10.0, 1..20),
            max in 0.01f64..5.0,
        ) {
            let mut grads = Grads::from([("w".to_string(), g.clone())]);
            let norm = clip_grad_norm(&mut grads, max);
            let after: f64 = grads["w"].iter().map(|x| x * x).sum::<f64>().sqrt();
            proptest::prop_assert!(after <= max * (1.0 + 1e-12) || after == norm);
            let scale = if norm > max { max / norm } else { 1.0 };
            for (a, b) in grads["w"].iter().zip(&g) {
                proptest::prop_assert!((a - b * scale).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}

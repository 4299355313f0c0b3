//! Cosine learning-rate decay and AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `base * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond schedule of {total_steps}")));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    /// One update. `t` counts optimizer steps from 1 and drives bias
    /// correction. Decay `p -= lr * wd * p` is applied before, and separately
    /// from, the adaptive step.
    pub fn step(&self, params: &mut ParamStore, grads: &ParamStore, m: &mut ParamStore, v: &mut ParamStore, t: u64, lr: f64) -> Result<()> {
        params.check_layout(grads, "gradients")?;
        params.check_layout(m, "first moments")?;
        params.check_layout(v, "second moments")?;
        if t == 0 {
            return Err(Error::Contract("optimizer steps count from 1".into()));
        }
        if !grads.all_finite() {
            let bad = grads
                .tensors()
                .iter()
                .find(|g| g.data.iter().any(|x| !x.is_finite()))
                .map_or("?", |g| g.name.as_str());
            return Err(Error::Numeric(format!("non-finite gradient in {bad}")));
        }
        let bc1 = 1.0 - self.beta1.powf(t as f64);
        let bc2 = 1.0 - self.beta2.powf(t as f64);
        let decay = 1.0 - lr * self.weight_decay;
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(m.tensors_mut().iter_mut().zip(v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p *= decay;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(values: &[f64]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let id = s.add("w", &[values.len()], Init::Zeros, &mut rng);
        s.tensor_mut(id).data.copy_from_slice(values);
        s
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.001).unwrap(), 0.001);
        assert!(cosine_lr(100, 100, 0.001).unwrap().abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.001).unwrap() - 0.0005).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, 0.001), Err(Error::Config(_))));
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = store(&[1.5, -2.0]);
        let g = store(&[0.0, 0.0]);
        let (mut m, mut v) = (g.clone(), g.clone());
        let opt = AdamW { weight_decay: 0.1, ..AdamW::default() };
        opt.step(&mut p, &g, &mut m, &mut v, 1, 0.01).unwrap();
        assert_eq!(p.tensors()[0].data, vec![1.5 * (1.0 - 0.01 * 0.1), -2.0 * (1.0 - 0.01 * 0.1)]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[0.0, 0.0, 5.0]);
        let g = store(&[3.0, -0.25, 3.0]);
        let (mut m, mut v) = (p.zeros_like(), p.zeros_like());
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        opt.step(&mut p, &g, &mut m, &mut v, 1, 0.01).unwrap();
        let d = &p.tensors()[0].data;
        assert!((d[0] + 0.01).abs() < 1e-9);
        assert!((d[1] - 0.01).abs() < 1e-9);
        assert!((d[2] - 4.99).abs() < 1e-9);
        // Same gradient and moments give the same update.
        assert!((d[0] - (d[2] - 5.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = store(&[0.0]);
        let g = store(&[f64::NAN]);
        let (mut m, mut v) = (p.zeros_like(), p.zeros_like());
        let err = AdamW::default().step(&mut p, &g, &mut m, &mut v, 1, 0.01);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }
}

use super::ParamStore;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay. Moment buffers are created lazily on
/// the first step and kept per parameter, in store order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(bad) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {:?}", bad.name)));
        }
        if self.moments.is_empty() {
            self.moments = store
                .iter()
                .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        if self.moments.len() != store.len() {
            return Err(Error::Contract("optimizer bound to a different parameter store".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;

        for (p, (m, v)) in store.iter_mut().zip(&mut self.moments) {
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = single(0.7, 0.0);
        AdamW::new(1e-3, (0.9, 0.999), 1e-8, 0.0).step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [0.3, -5.0] {
            let mut s = single(1.0, g);
            AdamW::new(1e-3, (0.9, 0.999), 1e-8, 0.0).step(&mut s).unwrap();
            let moved = s.iter().next().unwrap().value.item() - 1.0;
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "{moved} vs {expected}");
            assert!((moved + 1e-3 * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn decoupled_decay_scales_value() {
        let mut s = single(2.0, 0.0);
        AdamW::new(0.1, (0.9, 0.999), 1e-8, 0.5).step(&mut s).unwrap();
        assert!((s.iter().next().unwrap().value.item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_aborts_without_update() {
        let mut s = single(1.0, f64::NAN);
        let err = AdamW::new(1e-3, (0.9, 0.999), 1e-8, 0.0).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("\"p\""));
        assert_eq!(s.iter().next().unwrap().value.item(), 1.0);
    }
}

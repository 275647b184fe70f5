use super::params::ParamStore;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
        }
    }

    /// Updates every trainable parameter from its accumulated gradient.
    /// Fails without touching anything if some trainable parameter has none.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let eps = T::from_f64(self.eps);
        for p in store.iter_mut().filter(|p| p.trainable) {
            let grad = p.grad.as_ref().expect("checked above");
            let st = &mut p.state;
            st.step += 1;
            let c1 = T::from_f64(1.0 - self.beta1.powi(st.step as i32));
            let c2 = T::from_f64(1.0 - self.beta2.powi(st.step as i32));
            let lr = T::from_f64(self.lr);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1 * *m + (T::ONE - b1) * g;
                *v = b2 * *v + (T::ONE - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(value: f64) -> (ParamStore<f64>, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut s, id) = single(0.75);
        s.get_mut(id).grad = Some(vec![0.0]);
        Adam::new(0.1, (0.9, 0.999), 1e-8).step(&mut s).unwrap();
        assert_eq!(s.get(id).value.data()[0], 0.75);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = single(1.0);
        s.get_mut(id).grad = Some(vec![1.0]);
        Adam::new(0.1, (0.9, 0.999), 1e-8).step(&mut s).unwrap();
        // m_hat = v_hat = 1, so the update is lr / (1 + eps)
        let moved = 1.0 - s.get(id).value.data()[0];
        assert!((moved - 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let grads = [0.3, -1.7];
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        // scalar reference recurrence
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let (mut s, id) = single(0.5);
        let opt = Adam::new(lr, (b1, b2), eps);
        for g in grads {
            s.zero_grad();
            s.get_mut(id).grad = Some(vec![g]);
            opt.step(&mut s).unwrap();
        }
        assert!((s.get(id).value.data()[0] - w).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_rejected() {
        let (mut s, _) = single(0.0);
        assert!(matches!(Adam::default().step(&mut s), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::<f32>::new();
        let b = s.add_buffer("buf", Tensor::scalar(2.0)).unwrap();
        Adam::default().step(&mut s).unwrap();
        assert_eq!(s.get(b).value.data()[0], 2.0);
    }
}

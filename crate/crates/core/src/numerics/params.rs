use std::collections::HashMap;

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Adam moment buffers for one parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    /// Buffers (e.g. the pre-sampled Gumbel noise) are stored and hashed with
    /// the model but never updated by the optimizer.
    pub trainable: bool,
    pub state: AdamState<T>,
}

/// Named, ordered parameter collection. Identifiers are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter identifier `{name}`")));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
            state: AdamState {
                m: vec![T::ZERO; n],
                v: vec![T::ZERO; n],
                step: 0,
            },
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    /// Adds a parameter initialised uniformly in `±sqrt(1/fan_in)`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)));
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => p.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn touch_grad(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        if p.grad.is_none() {
            p.grad = Some(vec![T::ZERO; p.value.len()]);
        }
    }

    /// Scales every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for p in &self.params {
            if let Some(g) = &p.grad {
                for &v in g {
                    acc += v.to_f64() * v.to_f64();
                }
            }
        }
        acc.sqrt()
    }

    /// Rescales gradients so their global norm does not exceed `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale_grads(T::from_f64(max_norm / norm));
        }
        norm
    }

    /// Snapshot of all values, used to roll back after divergence.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::shape("snapshot does not match the parameter set"));
        }
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(format!("snapshot shape mismatch for `{}`", p.name)));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identifiers_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.id("a.w"), Some(ParamId(0)));
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        let id = s.add_uniform("w", &[8, 4, 3, 3], 36, &mut rng).unwrap();
        let bound = (1.0f32 / 36.0).sqrt();
        assert!(s.get(id).value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        s.accumulate_grad(a, &[3.0, 4.0]);
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}

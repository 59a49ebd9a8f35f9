use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// A named trainable tensor with its accumulated gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let n = value.numel();
        Self {
            value,
            grad: None,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// Ordered collection of parameters. Iteration order is by name, so
/// reductions over parameters are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    step: u64,
}

/// Mapping from parameter names to the leaves bound on one graph.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Registers every parameter as a trainable leaf on `graph`.
    pub fn bind(&self, graph: &Graph<T>) -> Bindings {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), graph.param(p.value.clone())))
                .collect(),
        }
    }

    /// Adds `scale * grad` from one backward pass into each parameter's gradient.
    pub fn accumulate(&mut self, bindings: &Bindings, grads: &Gradients<T>, scale: T) {
        for (name, var) in bindings.iter() {
            let Some(p) = self.params.get_mut(name) else {
                continue;
            };
            let g = grads.get(var);
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += scale * b),
                None => {
                    let mut g = g;
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                    p.grad = Some(g);
                }
            }
        }
    }

    /// Overwrites gradients from a flat name map, as produced by worker threads.
    pub fn set_grad(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if grad.shape() != p.value.shape() {
            return Err(Error::shape(
                "set_grad",
                format!("{name}: {:?} vs {:?}", grad.shape(), p.value.shape()),
            ));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Euclidean norm over all accumulated gradients.
    pub fn grad_norm(&self) -> T {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm {
            let s = max_norm / norm;
            for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update. Gradients are left in place.
    pub fn adam_step(&mut self, lr: T, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for p in self.params.values_mut() {
            let g = p.grad.as_ref().expect("checked above");
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                p.m[k] = b1 * p.m[k] + (T::one() - b1) * gk;
                p.v[k] = b2 * p.v[k] + (T::one() - b2) * gk * gk;
                let m_hat = p.m[k] / c1;
                let v_hat = p.v[k] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param::new(p.value.cast())))
                .collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step decay: `base * gamma^floor(epoch / step_size)`.
pub fn step_lr(epoch: usize, base: f64, step_size: usize, gamma: f64) -> f64 {
    base * gamma.powi((epoch / step_size.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w));
        s.set_grad("w", Tensor::scalar(g)).unwrap();
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store(1.0, 1.0);
        s.adam_step(1e-3, &AdamConfig::default()).unwrap();
        let delta = s.value("w").unwrap().item() - 1.0;
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((delta - expected).abs() < 1e-14, "{delta}");
        assert!((delta + 9.99999990e-4).abs() < 1e-12);
        // Gradients survive the step.
        assert_eq!(s.get("w").unwrap().grad.as_ref().unwrap().item(), 1.0);
    }

    #[test]
    fn adam_zero_grad_keeps_value() {
        let mut s = store(2.0, 0.0);
        s.adam_step(1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("w").unwrap().item(), 2.0);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn adam_identical_params_stay_identical() {
        let mut s = ParamStore::<f64>::new();
        for name in ["z", "a"] {
            s.insert(name, Tensor::filled(&[3], 0.3));
            s.set_grad(name, Tensor::from_vec(&[3], vec![0.1, -2.0, 5.0]).unwrap())
                .unwrap();
        }
        for _ in 0..3 {
            s.adam_step(1e-2, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.value("a").unwrap(), s.value("z").unwrap());
    }

    #[test]
    fn adam_missing_grad_is_named() {
        let mut s = ParamStore::<f64>::new();
        s.insert("enc.w", Tensor::scalar(1.0));
        match s.adam_step(1e-3, &AdamConfig::default()) {
            Err(Error::MissingGrad(n)) => assert_eq!(n, "enc.w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[2]));
        s.insert("b", Tensor::zeros(&[1]));
        s.set_grad("a", Tensor::from_vec(&[2], vec![3.0, 0.0]).unwrap())
            .unwrap();
        s.set_grad("b", Tensor::scalar(4.0)).unwrap();
        assert_eq!(s.clip_grad_norm(10.0), 5.0);
        assert_eq!(s.grad_norm(), 5.0);
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
        let a = s.get("a").unwrap().grad.as_ref().unwrap().data().to_vec();
        assert!((a[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn step_lr_schedule() {
        assert_eq!(step_lr(0, 1e-3, 30, 0.5), 1e-3);
        assert_eq!(step_lr(29, 1e-3, 30, 0.5), 1e-3);
        assert_eq!(step_lr(30, 1e-3, 30, 0.5), 5e-4);
        assert_eq!(step_lr(65, 1e-3, 30, 0.5), 2.5e-4);
    }

    #[test]
    fn accumulate_scales_and_sums() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::filled(&[2], 1.0));
        for _ in 0..2 {
            let g = Graph::new();
            let b = s.bind(&g);
            let a = b.get("a").unwrap();
            let loss = g.sum(g.square(a));
            let grads = g.backward(loss).unwrap();
            s.accumulate(&b, &grads, 0.5);
        }
        assert_eq!(
            s.get("a").unwrap().grad.as_ref().unwrap().data(),
            &[2.0, 2.0]
        );
    }
}

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters together with their Adam moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    step: u64,
}

/// Graph variables for every parameter of a store, bound for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Same binding with one parameter routed through `var` instead.
    pub fn with_override(&self, id: ParamId, var: Var) -> Self {
        let mut vars = self.vars.clone();
        vars[id.0] = var;
        Self { vars }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.numel();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Copies every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.input(p.value.clone())).collect(),
        }
    }

    /// Copies every parameter into `g` as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Adds the gradients that `g` holds for `bound` into the store.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            let n = p.value.numel();
            let dst = p.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(src) = g.grad(*v) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// One bias-corrected Adam update; gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let grad = p.grad.take().unwrap();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(&mut p.m)
                .zip(&mut p.v)
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Replaces parameter values (and optionally Adam state) by name from `other`.
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(shape_err(format!(
                    "`{}`: checkpoint shape {:?}, model {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
            p.m = src.m.clone();
            p.v = src.v.clone();
        }
        self.step = other.step;
        Ok(())
    }
}

/// Deterministic initializer: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights,
/// zero biases.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: Option<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        let id = s.add("theta", Tensor::scalar(value));
        s.get_mut(id).grad = grad.map(|g| vec![g]);
        s
    }

    #[test]
    fn adam_first_step() {
        let mut s = single(0.0, Some(1.0));
        s.adam_step(AdamConfig::with_lr(0.001)).unwrap();
        let theta = s.params()[0].value.item();
        assert!((theta + 0.001).abs() < 1e-9, "theta = {theta}");
        assert!(s.params()[0].grad.is_none());
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut s = single(0.25, Some(0.0));
        s.adam_step(AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.params()[0].value.item(), 0.25);
    }

    #[test]
    fn adam_missing_gradient() {
        let mut s = single(0.25, None);
        assert!(matches!(
            s.adam_step(AdamConfig::with_lr(0.1)),
            Err(Error::MissingGradient(name)) if name == "theta"
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Init::new(7).uniform(&[16, 8], 16);
        let b = Init::new(7).uniform(&[16, 8], 16);
        let c = Init::new(8).uniform(&[16, 8], 16);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = ParameterStore::new();
            let mut init = Init::new(3);
            let w = s.add("w", init.uniform(&[4, 2], 4));
            let b = s.add("b", Tensor::zeros(&[2]));
            for step in 0..5 {
                let mut g = Graph::new();
                let bound = s.bind(&mut g);
                let x = g.constant(Init::new(100 + step).uniform(&[3, 4], 1));
                let y = g.dense(x, bound.var(w), bound.var(b)).unwrap();
                let t = g.constant(Tensor::full(&[3, 2], 0.5));
                let l = g.mse(y, t).unwrap();
                g.backward(l).unwrap();
                s.accumulate_grads(&g, &bound);
                s.adam_step(AdamConfig::with_lr(0.01)).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}

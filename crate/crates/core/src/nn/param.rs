use crate::error::{Error, Result};

use super::{Matrix, RngStream};

/// Trainable tensor with its gradient and Adam moment estimates.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Matrix,
    pub grad: Matrix,
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update using the stored gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let g = self.grad.data();
        let m = self.m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = self.v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = self.m.data();
        let v = self.v.data();
        for ((w, mi), vi) in self.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
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
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    XavierUniform,
    XavierNormal,
    Zeros,
}

/// Named, ordered collection of parameters belonging to one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.params.push(Parameter::new(value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_init(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut RngStream,
    ) -> ParamId {
        self.add(name, init_matrix(rows, cols, init, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grads(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.scale_in_place(s);
            }
        }
        norm
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if self.params.iter().any(|p| !p.grad.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        for p in &mut self.params {
            p.adam_step(cfg)?;
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Matrix]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(values) {
            p.value.check_same_shape(v, "set_values")?;
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
        Ok(())
    }

    /// Hard copy of every parameter value from `other` (names and shapes must agree).
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(
                "parameter sets differ between source and destination".into(),
            ));
        }
        self.set_values(&other.values())
    }
}

pub fn init_matrix(rows: usize, cols: usize, init: Init, rng: &mut RngStream) -> Matrix {
    let fan = (rows + cols) as f64;
    let mut m = Matrix::zeros(rows, cols);
    match init {
        Init::Zeros => {}
        Init::XavierUniform => {
            let limit = (6.0 / fan).sqrt();
            for v in m.data_mut() {
                *v = rng.uniform_range(-limit, limit);
            }
        }
        Init::XavierNormal => {
            let std = (2.0 / fan).sqrt();
            for v in m.data_mut() {
                *v = std * rng.normal();
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new(Matrix::row_vector(&[v]));
        p.grad = Matrix::row_vector(&[g]);
        p
    }

    #[test]
    fn adam_zero_grad_keeps_value() {
        let mut p = scalar(1.5, 0.0);
        for _ in 0..5 {
            p.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        }
        assert_eq!(p.value.get(0, 0), 1.5);
        assert_eq!(p.step_count(), 5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let mut p = scalar(1.0, 1.0);
        p.adam_step(&AdamConfig::with_lr(0.1)).unwrap();
        let delta = p.value.get(0, 0) - 1.0;
        assert!(delta < 0.0);
        assert!((delta + 0.1).abs() < 1e-7, "{delta}");
    }

    #[test]
    fn adam_identical_params_identical_updates() {
        let mut a = scalar(0.3, -0.7);
        let mut b = scalar(0.3, -0.7);
        let cfg = AdamConfig::with_lr(0.01);
        a.adam_step(&cfg).unwrap();
        b.adam_step(&cfg).unwrap();
        assert_eq!(a.value.get(0, 0).to_bits(), b.value.get(0, 0).to_bits());
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut p = scalar(1.0, f64::NAN);
        assert!(matches!(
            p.adam_step(&AdamConfig::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn clip_grad_norm_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::zeros(1, 2));
        store.get_mut(a).grad = Matrix::row_vector(&[3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn xavier_uniform_within_limit() {
        let mut rng = RngStream::new(0);
        let m = init_matrix(10, 20, Init::XavierUniform, &mut rng);
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(m.data().iter().all(|v| v.abs() <= limit));
        assert!(m.data().iter().any(|v| *v != 0.0));
    }
}

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// The four disjoint parameter groups trained by the two-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// User and item embedding tables (`theta_e`).
    Embedding,
    /// The two GRU propensity estimators (`theta_p`).
    Propensity,
    /// The two transformer encoders (`theta_t`).
    Transformer,
    /// The prediction head (`theta_m`).
    Mlp,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Embedding, Group::Propensity, Group::Transformer, Group::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Group::Embedding => "theta_e",
            Group::Propensity => "theta_p",
            Group::Transformer => "theta_t",
            Group::Mlp => "theta_m",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) step: u64,
}

impl Param {
    pub fn adam_step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Gradient buffers indexed by [`ParamId`], produced by a backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &[f64]) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Adds `other` into `self` slot by slot; order-independent per slot pair.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (ParamId(i), g)))
    }
}

/// Named trainable tensors partitioned into [`Group`]s, with Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let n = value.len();
        self.params.push(Param {
            name,
            group,
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("valid shape"))
    }

    /// Xavier/Glorot uniform initialisation for a `fan_in × fan_out` matrix.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, group, Tensor::matrix(fan_in, fan_out, data).expect("valid shape"))
    }

    pub fn add_constant(&mut self, name: impl Into<String>, group: Group, shape: &[usize], value: f64) -> ParamId {
        self.add(name, group, Tensor::filled(shape, value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Stores `grads` into the `grad` fields of the parameters they cover.
    ///
    /// Parameters without a gradient slot get an explicit zero gradient, so
    /// that a later [`adam_step`](Self::adam_step) over their group is legal.
    pub fn set_grads(&mut self, grads: &Gradients) {
        for (i, p) in self.params.iter_mut().enumerate() {
            let g = match grads.get(ParamId(i)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.len()],
            };
            p.grad = Some(Tensor::new(p.value.shape().to_vec(), g).expect("gradient matches parameter"));
        }
    }

    /// One Adam update of every parameter in `groups`; others are untouched.
    ///
    /// Returns a contract error if a selected parameter has no gradient.
    pub fn adam_step(&mut self, groups: &[Group], cfg: &AdamConfig) -> Result<()> {
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            if p.grad.is_none() {
                return Err(Error::Contract(format!(
                    "adam_step: parameter {} ({}) has no gradient",
                    p.name, p.group
                )));
            }
        }
        for p in self.params.iter_mut().filter(|p| groups.contains(&p.group)) {
            let grad = p.grad.as_ref().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
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

    /// Order-sensitive checksum of all values in a group.
    pub fn group_checksum(&self, group: Group) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            p.name.hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Restores Adam state; used by the checkpoint reader.
    pub(crate) fn set_adam_state(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<()> {
        let p = &mut self.params[id.0];
        if m.len() != p.value.len() || v.len() != p.value.len() {
            return Err(Error::Checkpoint(format!(
                "adam moments for {} do not match parameter shape",
                p.name
            )));
        }
        p.m = m;
        p.v = v;
        p.step = step;
        Ok(())
    }
}

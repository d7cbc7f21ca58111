//! Named flat parameter arrays and the Adam optimizer that updates them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named collection of flat `f64` arrays. Iteration order is by name, which
/// keeps serialization and optimizer sweeps deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    arrays: BTreeMap<String, Vec<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.arrays.insert(name.into(), values);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays.get(name).map(Vec::as_slice)
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.arrays.values().map(Vec::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
                .collect(),
        }
    }
}

/// Learning rate `λ₀ (1 + γ t)^{-p}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub gamma: f64,
    pub power: f64,
}

impl LrSchedule {
    pub fn constant(lr0: f64) -> Self {
        Self { lr0, gamma: 0.0, power: 0.0 }
    }

    pub fn at(&self, step: usize) -> f64 {
        self.lr0 * (1.0 + self.gamma * step as f64).powf(-self.power)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { lr0: 1e-3, gamma: 5e-4, power: 0.3 }
    }
}

/// Adam with the usual moment decays. One instance tracks one parameter
/// layout; the layout is fixed by the first call to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ParamSet>,
    v: Vec<ParamSet>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every array in `params` for which `grads` has an
    /// entry. Arrays missing from `grads` are left untouched.
    pub fn step(&mut self, params: &mut [ParamSet], grads: &[ParamSet], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract("parameter and gradient groups differ".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(ParamSet::zeros_like).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (name, values) in p.iter_mut() {
                let Some(grad) = g.get(name) else { continue };
                if grad.len() != values.len() {
                    return Err(Error::Dimension(format!("gradient for `{name}` has wrong length")));
                }
                let m = self.m[k].get_mut(name).expect("layout fixed at first step");
                let v = self.v[k].get_mut(name).expect("layout fixed at first step");
                for i in 0..values.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    values[i] -= lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

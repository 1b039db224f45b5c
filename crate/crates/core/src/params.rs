//! Named parameter tensors with a trainable flag, plus the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{sha256_hex, Fingerprinter};
use crate::rng::{gaussian_scaled, StreamRng};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Parameters ordered by name so hashing and serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    /// Registers a Gaussian-initialized parameter scaled by `std`.
    pub fn init_normal(
        &mut self,
        rng: &mut StreamRng,
        name: &str,
        shape: &[usize],
        std: f64,
        trainable: bool,
    ) {
        self.insert(name, gaussian_scaled(rng, shape, std), trainable);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) {
        self.insert(name, ArrayD::from_elem(shape, value), trainable);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &ArrayD<f64> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not registered"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Canonical byte serialization: names, shapes and little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.value.ndim() as u64).to_le_bytes());
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn fingerprint_into(&self, fp: &mut Fingerprinter) {
        for (name, p) in &self.params {
            fp.str(name).shape(p.value.shape());
            fp.f64s(p.value.as_standard_layout().as_slice().expect("standard layout"));
        }
    }

    /// Replaces values of already-registered parameters, checking shapes.
    pub fn load_values(&mut self, values: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        for (name, v) in values {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::NotFound(format!("parameter '{name}'")))?;
            if p.value.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    expected: p.value.shape().to_vec(),
                    actual: v.shape().to_vec(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Applies `f` to every parameter whose name is in `grads`.
    pub(crate) fn update_with<F>(&mut self, mut f: F)
    where
        F: FnMut(&str, &mut ArrayD<f64>),
    {
        for (name, p) in self.params.iter_mut() {
            f(name, &mut p.value);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for the trainable parameters of one store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update; gradients for non-trainable names are rejected.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
    ) -> Result<()> {
        for name in grads.keys() {
            match store.get(name) {
                Some(p) if p.trainable => {}
                Some(_) => {
                    return Err(Error::invalid(format!(
                        "gradient supplied for frozen parameter '{name}'"
                    )))
                }
                None => return Err(Error::NotFound(format!("parameter '{name}'"))),
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        store.update_with(|name, value| {
            let Some(g) = grads.get(name) else { return };
            let m = m_all
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            let v = v_all
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                });
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.init_const("w", &[2], 1.0, true);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(vec![2], 0.5));
        let mut st = AdamState::new();
        st.step(&AdamConfig::default(), &mut store, &grads).unwrap();
        // first Adam step moves by lr in the sign of -g
        for v in store.value("w").iter() {
            assert!((v - (1.0 - 2e-3)).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_rejects_frozen_gradients() {
        let mut store = ParamStore::new();
        store.init_const("frozen", &[1], 0.0, false);
        let mut grads = BTreeMap::new();
        grads.insert("frozen".to_string(), ArrayD::zeros(vec![1]));
        assert!(AdamState::new()
            .step(&AdamConfig::default(), &mut store, &grads)
            .is_err());
    }

    #[test]
    fn sha_tracks_values() {
        let mut rng = stream(1, "init", 0);
        let mut store = ParamStore::new();
        store.init_normal(&mut rng, "a", &[3, 3], 1.0, false);
        let h = store.sha256();
        store.get_mut("a").unwrap().value[[0, 0]] += 1e-12;
        assert_ne!(h, store.sha256());
    }
}

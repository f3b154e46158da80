//! Named parameter storage and first-order optimizers.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub frozen: bool,
    first_moment: Matrix,
    second_moment: Matrix,
    steps: u64,
}

impl Param {
    fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            frozen: false,
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Insertion-ordered set of named trainable matrices with optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

/// Gradients keyed by parameter name.
pub type NamedGrads = IndexMap<String, Matrix>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.data().len()).sum()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.frozen = frozen;
        }
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        self.params.values_mut().for_each(|p| p.frozen = frozen);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    pub fn all_frozen(&self) -> bool {
        self.params.values().all(|p| p.frozen)
    }

    /// Clears moment accumulators and step counters (start of a new stage).
    pub fn reset_optimizer_state(&mut self) {
        for p in self.params.values_mut() {
            let (r, c) = p.value.shape();
            p.first_moment = Matrix::zeros(r, c);
            p.second_moment = Matrix::zeros(r, c);
            p.steps = 0;
        }
    }

    /// Registers every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let ids = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.var(p.value.clone())))
            .collect();
        Bindings {
            ids,
            fixed: IndexMap::new(),
        }
    }

    /// Binds the selected parameters as differentiable leaves and the rest as
    /// constants. Only the selected names appear in collected gradients.
    pub fn bind_only(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bindings {
        let mut ids = IndexMap::new();
        let mut fixed = IndexMap::new();
        for (k, p) in &self.params {
            if trainable(k) {
                ids.insert(k.clone(), tape.var(p.value.clone()));
            } else {
                fixed.insert(k.clone(), tape.constant(p.value.clone()));
            }
        }
        Bindings { ids, fixed }
    }

    /// Registers every parameter as a constant (no gradient flows into it).
    pub fn bind_constant(&self, tape: &mut Tape) -> Bindings {
        let ids = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.constant(p.value.clone())))
            .collect();
        Bindings {
            ids,
            fixed: IndexMap::new(),
        }
    }

    /// Order-sensitive checksum over names, flags and raw bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, p) in &self.params {
            name.bytes().for_each(|b| mix(u64::from(b)));
            mix(u64::from(p.frozen));
            p.value.data().iter().for_each(|v| mix(v.to_bits()));
        }
        h
    }

    /// Flattens all values in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Applies one optimizer update to every unfrozen parameter that has a
    /// gradient. Frozen parameters and their state are left untouched.
    pub fn step(&mut self, grads: &NamedGrads, lr: f64, optimizer: Optimizer) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
        }
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            if p.frozen {
                continue;
            }
            p.steps += 1;
            match optimizer {
                Optimizer::Sgd => {
                    for (w, gi) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gi;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let t = p.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = p.first_moment.data_mut();
                    let v = p.second_moment.data_mut();
                    let w = p.value.data_mut();
                    for (k, gi) in g.data().iter().enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gi;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gi * gi;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite("optimizer_step"));
            }
        }
        Ok(())
    }
}

/// Map from parameter name to its leaf on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    ids: IndexMap<String, NodeId>,
    /// Leaves bound as constants by [`ParamStore::bind_only`].
    fixed: IndexMap<String, NodeId>,
}

impl Bindings {
    pub fn id(&self, name: &str) -> NodeId {
        self.try_id(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound on this tape"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).or_else(|| self.fixed.get(name)).copied()
    }

    /// Collects gradients for every bound parameter.
    pub fn gradients(&self, grads: &Gradients) -> NamedGrads {
        self.ids
            .iter()
            .map(|(k, id)| (k.clone(), grads.get(*id).clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameter_is_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::scalar(1.5));
        store.set_frozen("w", true);
        let before = store.get("w").unwrap().data()[0].to_bits();
        let mut g = NamedGrads::new();
        g.insert("w".into(), Matrix::scalar(123.0));
        store.step(&g, 0.1, Optimizer::default()).unwrap();
        assert_eq!(store.get("w").unwrap().data()[0].to_bits(), before);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        for g0 in [0.3, -7.0] {
            let mut store = ParamStore::new();
            store.insert("w", Matrix::scalar(0.0));
            let mut g = NamedGrads::new();
            g.insert("w".into(), Matrix::scalar(g0));
            store.step(&g, 0.01, Optimizer::default()).unwrap();
            let expected = -0.01 * g0 / (g0.abs() + 1e-8);
            assert!((store.get("w").unwrap().item() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let c = 0.7;
        let mut store = ParamStore::new();
        store.insert("w", Matrix::scalar(0.0));
        for _ in 0..100 {
            let w = store.get("w").unwrap().item();
            let mut g = NamedGrads::new();
            g.insert("w".into(), Matrix::scalar(w - c));
            store.step(&g, 0.05, Optimizer::default()).unwrap();
        }
        let w = store.get("w").unwrap().item();
        assert!((w - c).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::zeros(2, 2));
        let mut g = NamedGrads::new();
        g.insert("w".into(), Matrix::zeros(2, 1));
        assert!(matches!(
            store.step(&g, 0.1, Optimizer::Sgd),
            Err(Error::Shape { .. })
        ));
    }
}

//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{GapError, Result};
use crate::tensor::{Graph, Scalar, TensorId};

/// One named parameter tensor. Values live behind an `Arc` so binding a
/// parameter into a sample graph is a pointer clone, not a copy.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub shape: Vec<usize>,
    pub trainable: bool,
    values: Arc<Vec<S>>,
}

impl<S: Scalar> Param<S> {
    pub fn values(&self) -> &[S] {
        &self.values
    }
}

/// Map from parameter path (e.g. `layer0.rca.q.h3.w`) to tensor. Names are
/// unique and shapes immutable after insertion; iteration order is the
/// sorted name order, which fixes checkpoint layout and update order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    entries: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        values: Vec<S>,
        trainable: bool,
    ) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(GapError::Config(format!("duplicate parameter name {name}")));
        }
        let need: usize = shape.iter().product();
        if values.len() != need {
            return Err(GapError::Shape(format!(
                "parameter {name}: shape {shape:?} needs {need} values, got {}",
                values.len()
            )));
        }
        self.entries
            .insert(name.to_string(), Param { shape, trainable, values: Arc::new(values) });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.entries.get(name)
    }

    /// Replaces a parameter's values; the shape stays fixed.
    pub fn set_values(&mut self, name: &str, values: Vec<S>) -> Result<()> {
        let param = self
            .entries
            .get_mut(name)
            .ok_or_else(|| GapError::Config(format!("unknown parameter {name}")))?;
        if values.len() != param.values.len() {
            return Err(GapError::Shape(format!(
                "parameter {name}: expected {} values, got {}",
                param.values.len(),
                values.len()
            )));
        }
        param.values = Arc::new(values);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    /// Binds every parameter into `g` as a shared leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Binding {
        let mut ids = BTreeMap::new();
        for (name, param) in &self.entries {
            let id = g
                .leaf_shared(&param.shape, Arc::clone(&param.values))
                .expect("stored shape matches stored values");
            ids.insert(name.clone(), id);
        }
        Binding { ids }
    }
}

/// Parameter-name-to-node mapping for one graph.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: BTreeMap<String, TensorId>,
}

impl Binding {
    /// Panics on unknown names: parameter wiring is a programming error,
    /// not an input error.
    pub fn get(&self, name: &str) -> TensorId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Pulls this graph's gradients for every trainable bound parameter
    /// into `acc`, adding onto existing entries.
    pub fn accumulate_grads<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        acc: &mut GradMap<S>,
    ) {
        for (name, id) in &self.ids {
            if !store.get(name).map(|p| p.trainable).unwrap_or(false) {
                continue;
            }
            let Some(grad) = g.grad(*id) else { continue };
            match acc.entry(name.clone()) {
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(grad) {
                        *a += *b;
                    }
                }
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(grad.to_vec());
                }
            }
        }
    }
}

/// Accumulated gradients keyed by parameter name.
pub type GradMap<S> = BTreeMap<String, Vec<S>>;

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step that sees a gradient for a parameter.
pub struct Adam<S> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(GapError::Config(format!("learning rate {lr} must be > 0")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(GapError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if eps <= 0.0 {
            return Err(GapError::Config("Adam epsilon must be > 0".into()));
        }
        Ok(Self { lr, beta1, beta2, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn with_defaults(lr: f64) -> Result<Self> {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer step over every trainable parameter that has a
    /// gradient. The step counter increments exactly once per call.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &GradMap<S>) -> Result<()> {
        self.step += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let c1 = S::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let c2 = S::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);

        for (name, grad) in grads {
            let param = match store.entries.get_mut(name) {
                Some(p) if p.trainable => p,
                Some(_) => continue,
                None => {
                    return Err(GapError::Config(format!(
                        "gradient for unknown parameter {name}"
                    )))
                }
            };
            if grad.len() != param.values.len() {
                return Err(GapError::Shape(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    grad.len(),
                    param.values.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![S::ZERO; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![S::ZERO; grad.len()]);
            let values = Arc::make_mut(&mut param.values);
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + one_m_b1 * grad[i];
                v[i] = b2 * v[i] + one_m_b2 * grad[i] * grad[i];
                let m_hat = m[i] * c1;
                let v_hat = v[i] * c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

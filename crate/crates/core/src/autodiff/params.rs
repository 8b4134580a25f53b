use std::collections::HashMap;

use super::tape::Tape;

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One trainable tensor with its AdamW state.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

/// Ordered collection of uniquely named parameters. Registration order is
/// stable and defines the checkpoint layout.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn register(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: shape/value length mismatch"
        );
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        let n = values.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Overwrites the values of a parameter, e.g. when loading a checkpoint.
    /// Optimizer moments are reset.
    pub fn set_values(&mut self, id: ParamId, values: Vec<f64>) {
        let e = &mut self.entries[id.0];
        assert_eq!(values.len(), e.values.len(), "parameter {}: size mismatch", e.name);
        e.values = values;
        e.first_moment.iter_mut().for_each(|m| *m = 0.0);
        e.second_moment.iter_mut().for_each(|v| *v = 0.0);
        e.step = 0;
    }
}

/// AdamW hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// One bias-corrected AdamW update on every parameter the tape touched.
///
/// Decay is decoupled from the moment update: `p <- p - lr wd p` first, then
/// `p <- p - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(store: &mut ParamStore, tape: &Tape, config: &OptimizerConfig) {
    let lr = config.learning_rate;
    for (id, leaf) in tape.touched_params() {
        let grad = tape.grad(leaf);
        let e = &mut store.entries[id.0];
        e.step += 1;
        let bc1 = 1.0 - config.beta1.powi(e.step as i32);
        let bc2 = 1.0 - config.beta2.powi(e.step as i32);
        for i in 0..e.values.len() {
            e.values[i] -= lr * config.weight_decay * e.values[i];
            let g = grad[i];
            e.first_moment[i] = config.beta1 * e.first_moment[i] + (1.0 - config.beta1) * g;
            e.second_moment[i] = config.beta2 * e.second_moment[i] + (1.0 - config.beta2) * g * g;
            let m_hat = e.first_moment[i] / bc1;
            let v_hat = e.second_moment[i] / bc2;
            e.values[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Replaces a tensor in place; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape());
        self.values[id.0] = Arc::new(value);
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `named`, which must contain exactly
    /// this store's names with matching shapes.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::ConfigMismatch {
                field: format!(
                    "parameter count (expected {}, found {})",
                    self.values.len(),
                    named.len()
                ),
            });
        }
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let t = named.get(name).ok_or_else(|| Error::ConfigMismatch {
                field: format!("missing parameter {name}"),
            })?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::ConfigMismatch {
                    field: format!(
                        "parameter {name} shape {:?} != {:?}",
                        t.shape(),
                        self.values[i].shape()
                    ),
                });
            }
            self.values[i] = Arc::new(t.clone());
        }
        Ok(())
    }
}

/// Lazily binds a store's parameters onto a tape.
///
/// Frozen bindings (`trainable == false`) enter the tape as constants so no
/// gradient work is spent on them.
pub struct Bound<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: bool,
    vars: RefCell<Vec<Option<usize>>>,
}

impl<'t, 's> Bound<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        if let Some(node) = vars[id.0] {
            return Var {
                tape: self.tape,
                id: node,
            };
        }
        let value = Arc::clone(&self.store.values[id.0]);
        let var = if self.trainable {
            self.tape.leaf_rc(value)
        } else {
            self.tape.constant_rc(value)
        };
        vars[id.0] = Some(var.id);
        var
    }

    /// Moves this store's gradients out of `grads`, aligned with the store.
    pub fn take_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .borrow()
            .iter()
            .map(|slot| slot.and_then(|id| grads.take_id(id)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimiser state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .values
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = Arc::make_mut(&mut store.values[i]);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

use std::collections::HashMap;

use crate::graph::Graph;
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient buffer and EMA shadow.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub shadow: Tensor,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NnError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: vec![0.0; value.len()],
            shadow: value.clone(),
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients of every parameter bound on `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, grad) in graph.param_grads() {
            if let Some(g) = grad {
                let dst = &mut self.params[id.0].grad;
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copy whose live values are the EMA shadows.
    pub fn ema_weights(&self) -> ParamStore {
        let mut out = self.clone();
        for p in &mut out.params {
            p.value = p.shadow.clone();
        }
        out
    }

    /// Shadow <- decay * shadow + (1 - decay) * value.
    pub fn ema_update(&mut self, decay: f64) {
        for p in &mut self.params {
            for (s, v) in p.shadow.data_mut().iter_mut().zip(p.value.data()) {
                *s = decay * *s + (1.0 - decay) * v;
            }
        }
    }

    /// Resets every shadow to the current value.
    pub fn sync_shadows(&mut self) {
        for p in &mut self.params {
            p.shadow = p.value.clone();
        }
    }
}

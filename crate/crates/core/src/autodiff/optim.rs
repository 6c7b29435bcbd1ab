//! Named parameter sets and the Adam optimizer.

use super::{AdError, Graph, NodeId, Result, Tensor};

/// A named, trainable tensor living outside any graph.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Populated by [`ParamSet::harvest_grads`]; empty until then.
    pub grad: Vec<f64>,
    /// Frozen parameters receive no optimizer updates. Gradients still
    /// flow through them during backward.
    pub frozen: bool,
}

/// Ordered collection of parameters with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name '{name}'"
        );
        self.params.push(Param {
            name,
            value,
            grad: Vec::new(),
            frozen: false,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn at(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    /// Total scalar count across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter as a gradient-tracked leaf of `g`.
    /// Returns node ids aligned with parameter order.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), true))
            .collect()
    }

    /// Copy leaf gradients from a finished backward pass into the set.
    pub fn harvest_grads(&mut self, g: &Graph, ids: &[NodeId]) {
        assert_eq!(ids.len(), self.params.len(), "id list mismatch");
        for (p, &id) in self.params.iter_mut().zip(ids) {
            let grad = g.grad(id);
            if p.grad.len() != grad.len() {
                p.grad = vec![0.0; grad.len()];
            }
            p.grad.copy_from_slice(grad);
        }
    }

    /// Concatenated little-endian value bytes, for byte-identity checks.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_values() * 8);
        for p in &self.params {
            for v in p.value.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Set or clear the frozen flag on every parameter of the set.
pub fn freeze(params: &mut ParamSet, flag: bool) {
    for p in params.iter_mut() {
        p.frozen = flag;
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter index
/// and sized lazily on the first step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over every unfrozen parameter; the step counter advances
    /// once per call.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        for p in params.iter() {
            if !p.frozen && p.grad.len() != p.value.numel() {
                return Err(AdError::MissingGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((val, &g), (mi, vi)) in p
                .value
                .values_mut()
                .iter_mut()
                .zip(p.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *val -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

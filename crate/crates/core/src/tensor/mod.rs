//! Dense tensors, reverse-mode autodiff and the AdamW optimizer.

mod graph;
mod optim;

pub use graph::{Graph, Var};
pub(crate) use graph::dot;
pub use optim::{AdamWConfig, OptimizerState};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{bail, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A named, dense, row-major value with an optional gradient slot.
#[derive(Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub id: u64,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
            id: fresh_id(),
        }
    }
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            bail!(Dimension, "shape {shape:?} holds {n} values, got {}", values.len());
        }
        Ok(Tensor { shape, values, grad: None, requires_grad: false, id: fresh_id() })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n], grad: None, requires_grad: false, id: fresh_id() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(rows, cols)` view used by the graph; vectors are a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            bail!(Dimension, "gradient of length {} for tensor of length {}", grad.len(), self.values.len());
        }
        self.grad = Some(grad);
        Ok(())
    }
}

/// Name-to-tensor map with a fixed iteration order.
pub type Registry = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn identity(d: usize, epsilon: f64) -> Self {
        LayerNormParams { gamma: vec![1.0; d], beta: vec![0.0; d], epsilon }
    }
}

pub fn layer_norm(a: &[f64], p: &LayerNormParams) -> Result<Vec<f64>> {
    let d = a.len();
    if p.gamma.len() != d || p.beta.len() != d {
        bail!(Dimension, "input of length {d} with gamma {} and beta {}", p.gamma.len(), p.beta.len());
    }
    let mut g = Graph::new();
    let x = g.constant(1, d, a.to_vec())?;
    let gamma = g.constant(1, d, p.gamma.clone())?;
    let beta = g.constant(1, d, p.beta.clone())?;
    let y = g.layer_norm(x, gamma, beta, p.epsilon)?;
    Ok(g.value(y).to_vec())
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        bail!(Dimension, "vectors of length {} and {}", u.len(), v.len());
    }
    let mut g = Graph::new();
    let a = g.constant(1, u.len(), u.to_vec())?;
    let b = g.constant(1, v.len(), v.to_vec())?;
    let c = g.cosine(a, b)?;
    Ok(g.scalar(c))
}

pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(1, logits.len(), logits.to_vec())?;
    let loss = g.cross_entropy(l, &[target])?;
    Ok(g.scalar(loss))
}

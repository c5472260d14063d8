//! Named parameter storage and small layer helpers over the tape.
//!
//! Every trainable tensor in a model lives in a [`ParamSet`] under a
//! unique name.  Before a forward pass the whole set is bound onto a
//! [`Tape`](crate::tape::Tape) as leaf nodes; after backward the
//! per-parameter gradients are collected back in registration order, so
//! optimizers and checkpoints can treat a model as a flat list.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, NodeId, Tape};

/// Handle to one tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, name-addressed collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a tensor under a unique name.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    /// Replace all tensor values at once, preserving names and shapes.
    pub fn load_values(&mut self, values: Vec<ArrayD<f64>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::LengthMismatch(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}: {:?}", self.names[i], self.values[i].shape()),
                    actual: format!("{:?}", v.shape()),
                });
            }
        }
        self.values = values;
        Ok(())
    }

    /// Record every parameter as a tape leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        BoundParams { ids }
    }

    /// Gradients per parameter in registration order; zeros for tensors the
    /// loss never touched.  Errors if any gradient is non-finite.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients) -> Result<Vec<ArrayD<f64>>> {
        let mut out = Vec::with_capacity(self.values.len());
        for (i, v) in self.values.iter().enumerate() {
            let g = grads.get_or_zeros(bound.ids[i], v.shape());
            if !g.iter().all(|t| t.is_finite()) {
                return Err(Error::NanGradient {
                    role: self.names[i].clone(),
                });
            }
            out.push(g);
        }
        Ok(out)
    }
}

/// Tape leaf ids for a bound [`ParamSet`].
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.index()]
    }
}

// ---------------------------------------------------------------------------
// Initializers

/// Fan-in-scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in).
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

// ---------------------------------------------------------------------------
// Layer parameter bundles

/// Dense layer: (n, d_in) -> (n, d_out).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = ps.register(format!("{name}.w"), fan_in_uniform(rng, &[d_in, d_out], d_in));
        let b = ps.register(format!("{name}.b"), zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &BoundParams, x: NodeId) -> NodeId {
        let m = tape.matmul(x, bound.node(self.w));
        tape.add_bias_last(m, bound.node(self.b))
    }
}

/// Layer normalization over the last axis of (n, d).
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = ps.register(format!("{name}.gamma"), ones(&[d]));
        let beta = ps.register(format!("{name}.beta"), zeros(&[d]));
        LayerNorm { gamma, beta }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &BoundParams, x: NodeId) -> NodeId {
        tape.layer_norm(x, bound.node(self.gamma), bound.node(self.beta), 1e-5)
    }
}

/// 3D convolution parameters: (c_in, X, Y, Z) -> (c_out, X', Y', Z').
#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3d {
    pub fn register<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let fan_in = c_in * k * k * k;
        let w = ps.register(
            format!("{name}.w"),
            fan_in_uniform(rng, &[c_out, c_in, k, k, k], fan_in),
        );
        let b = ps.register(format!("{name}.b"), zeros(&[c_out]));
        Conv3d { w, b }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        tape.conv3d(x, bound.node(self.w), bound.node(self.b), stride, pad)
    }
}

/// Instance normalization over the spatial axes of (C, X, Y, Z).
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn register(ps: &mut ParamSet, name: &str, c: usize) -> Self {
        let gamma = ps.register(format!("{name}.gamma"), ones(&[c]));
        let beta = ps.register(format!("{name}.beta"), zeros(&[c]));
        InstanceNorm { gamma, beta }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &BoundParams, x: NodeId) -> NodeId {
        tape.instance_norm(x, bound.node(self.gamma), bound.node(self.beta), 1e-5)
    }
}

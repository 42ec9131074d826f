//! Ordered, named parameter collections.
//!
//! Every model keeps its trainable tensors in a [`Params`]; the fixed
//! insertion order is what makes optimizer updates, checkpoints and
//! flatten/assign round-trips reproducible.

use super::{Gradients, Record, Tensor};

#[derive(Clone, Debug)]
pub struct Params {
    items: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Params { items: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.items.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.items.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .items
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .items
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.items.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.items.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter as a differentiable leaf on `rec`.
    pub fn bind(&self, rec: &mut Record) -> Bound {
        Bound {
            items: self
                .items
                .iter()
                .map(|(n, t)| (n.clone(), rec.leaf(t)))
                .collect(),
        }
    }

    /// All values in insertion order, for finite-difference checks.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.items {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`Params::flatten`]; shapes stay as they are.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_len(), "flat vector length mismatch");
        let mut offset = 0;
        for (_, t) in &mut self.items {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Bind every parameter as a differentiable view into a flat leaf
    /// tensor starting at `offset`, so finite-difference checks can
    /// perturb individual parameter coordinates. Returns the binding and
    /// the offset just past this parameter set.
    pub fn bind_from_flat(&self, rec: &mut Record, flat: &Tensor, offset: usize) -> (Bound, usize) {
        let mut items = Vec::new();
        let mut offset = offset;
        for (name, t) in self.iter() {
            let n = t.numel();
            let piece = rec
                .slice(flat, 0, offset, n)
                .expect("flat vector shorter than parameter set");
            let shaped = rec.reshape(&piece, t.shape()).expect("reshape to param shape");
            items.push((name.to_string(), shaped));
            offset += n;
        }
        (Bound { items }, offset)
    }
}

impl Default for Params {
    fn default() -> Self {
        Params::new()
    }
}

/// A parameter set bound to a record: same names, tensors carry node ids.
pub struct Bound {
    items: Vec<(String, Tensor)>,
}

impl Bound {
    /// Assemble a binding from pre-built node-carrying tensors. Used by
    /// gradient checks that view every parameter as a slice of one flat
    /// leaf vector.
    pub fn from_items(items: Vec<(String, Tensor)>) -> Self {
        Bound { items }
    }

    pub fn t(&self, name: &str) -> &Tensor {
        &self
            .items
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown bound parameter {name}"))
            .1
    }

    /// Collect gradients in the same order as the underlying `Params`.
    /// Parameters the loss never touched come back as zeros.
    pub fn grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.items
            .iter()
            .map(|(n, t)| (n.clone(), grads.get_or_zeros(t)))
            .collect()
    }
}

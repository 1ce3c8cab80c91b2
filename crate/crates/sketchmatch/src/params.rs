//! Named, ordered collections of weight tensors.
//!
//! A [`ParamSet`] is what optimizers step, what archives serialize and what
//! freeze plans act on. Insertion order is part of the contract: archives and
//! optimizer traversals follow it, which keeps every run bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Ordered collection of named tensors with per-tensor trainable flags.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    map: HashMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable tensor. Names must be unique.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(true);
        self.names.push(name.to_string());
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| (n.as_str(), &self.map[n]))
    }

    /// Total number of scalar values across all tensors.
    pub fn total_values(&self) -> usize {
        self.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for name in &self.names {
            if let Some(t) = self.map.get_mut(name) {
                t.clear_grad();
            }
        }
    }

    /// Appends every entry of `other`, in order, under its existing name.
    pub fn extend_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in other.iter() {
            let mut copy = t.clone();
            copy.clear_grad();
            let trainable = t.requires_grad();
            self.insert(name, copy)?;
            self.get_mut(name)?.set_requires_grad(trainable);
        }
        Ok(())
    }

    /// New set holding only the entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if name.starts_with(prefix) {
                let mut copy = t.clone();
                copy.clear_grad();
                let trainable = t.requires_grad();
                out.insert(name, copy).expect("names unique by construction");
                out.get_mut(name).unwrap().set_requires_grad(trainable);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert_eq!(p.names(), &["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn filter_prefix_keeps_flags() {
        let mut p = ParamSet::new();
        p.insert("gen.w", Tensor::zeros(&[1])).unwrap();
        p.insert("disc.w", Tensor::zeros(&[1])).unwrap();
        p.get_mut("disc.w").unwrap().set_requires_grad(false);
        let d = p.filter_prefix("disc.");
        assert_eq!(d.len(), 1);
        assert!(!d.get("disc.w").unwrap().requires_grad());
    }
}

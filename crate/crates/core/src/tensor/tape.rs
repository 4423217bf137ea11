use std::collections::{HashMap, HashSet};

use super::{Element, Tensor};
use crate::error::{usage_err, Error, Result};

/// Recorded operations reachable from a loss, in execution order.
///
/// Tensor ids are issued in creation order and every operation is created
/// after its inputs, so sorting the reachable records by id recovers the
/// exact forward execution order.
pub struct GradTape<T: Element> {
    entries: Vec<Tensor<T>>,
}

impl<T: Element> GradTape<T> {
    pub fn record(loss: &Tensor<T>) -> Self {
        let mut seen = HashSet::new();
        let mut stack = vec![loss.clone()];
        let mut entries = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(rec) = &t.0.record {
                stack.extend(rec.parents.iter().filter(|p| p.requires_grad()).cloned());
                entries.push(t.clone());
            }
        }
        entries.sort_by_key(|t| t.id());
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Operation names in forward execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.entries.iter().filter_map(|t| t.op_name()).collect()
    }

    /// Ids in the order the backward pass visits them.
    pub fn reverse_ids(&self) -> Vec<u64> {
        self.entries.iter().rev().map(|t| t.id()).collect()
    }

    /// Propagates `seed` (the gradient of the tape's final output) back to
    /// every leaf that requires gradients, accumulating into their `grad`.
    fn replay(&self, root: &Tensor<T>, seed: Vec<T>) -> Result<()> {
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(root.id(), seed);
        for node in self.entries.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            let rec = node.0.record.as_ref().expect("tape entries carry records");
            let grads = (rec.backward)(&g);
            debug_assert_eq!(grads.len(), rec.parents.len());
            for (parent, grad) in rec.parents.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                if !grad.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: rec.name });
                }
                if parent.is_leaf() {
                    parent.accumulate_grad(&grad);
                } else {
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(parent.id(), grad);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// `grad` of every reachable trainable leaf; call [`Tensor::zero_grad`]
    /// on the leaves to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return usage_err(format!("backward needs a scalar loss, got shape {:?}", self.shape()));
        }
        if !self.requires_grad() {
            return usage_err("loss is not connected to any trainable tensor");
        }
        if self.is_leaf() {
            self.accumulate_grad(&[T::one()]);
            return Ok(());
        }
        GradTape::record(self).replay(self, vec![T::one()])
    }
}

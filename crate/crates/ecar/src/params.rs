//! Named parameter store shared by the models, the optimizer, and the
//! checkpoint codec.
//!
//! Every learnable tensor (and non-trainable buffer) lives in one `ParamSet`;
//! model structs hold `ParamId` handles. Entry order is creation order, which
//! fixes the optimizer walk, gradient reduction order, and checkpoint record
//! order, one source of determinism for all three.

use crate::tape::Engine;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (false) are persisted but skipped by the optimizer.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name, tensor, false)
    }

    fn push(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of stored scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    /// Bind every entry onto an engine: leaves for trainable entries,
    /// constants for buffers. Index the result by `ParamId`.
    pub fn bind<E: Engine>(&self, engine: &E) -> Binding<E> {
        let vals = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    engine.leaf(&e.tensor)
                } else {
                    engine.constant(&e.tensor)
                }
            })
            .collect();
        Binding { vals }
    }
}

/// Engine-side handles of a bound `ParamSet`.
pub struct Binding<E: Engine> {
    vals: Vec<E::Val>,
}

impl<E: Engine> Binding<E> {
    pub fn get(&self, id: ParamId) -> &E::Val {
        &self.vals[id.0]
    }

    pub fn vals(&self) -> &[E::Val] {
        &self.vals
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Eval, Tape};

    #[test]
    fn binding_indexes_by_id() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::scalar(1.0));
        let b = ps.add_buffer("b", Tensor::scalar(2.0));
        let ev = Eval;
        let bound = ps.bind(&ev);
        assert_eq!(bound.get(a).data(), &[1.0]);
        assert_eq!(bound.get(b).data(), &[2.0]);
    }

    #[test]
    fn buffers_get_no_gradient() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::scalar(3.0));
        let buf = ps.add_buffer("buf", Tensor::scalar(4.0));
        let tape = Tape::new();
        let bound = ps.bind(&tape);
        let prod = tape.mul(bound.get(w), bound.get(buf));
        let loss = tape.sum(&prod);
        tape.backward(loss);
        assert_eq!(tape.grad(*bound.get(w)), vec![4.0]);
        // constant side is reported as zeros
        assert_eq!(tape.grad(*bound.get(buf)), vec![0.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::scalar(0.0));
        ps.add("x", Tensor::scalar(1.0));
    }
}

//! Named, ordered parameter storage. Registration order is the canonical
//! order used for graph leafing, gradient accumulation, optimizer state and
//! checkpoints, which keeps whole-pipeline runs reproducible.

use std::collections::BTreeMap;

use vqreg_core::Scalar;

use crate::graph::{Graph, NodeId, Shape};
use crate::Gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Shape, data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.len(), data.len(), "param `{name}` data does not match shape");
        assert!(!self.index.contains_key(&name), "duplicate param `{name}`");
        self.entries.push(ParamEntry { name: name.clone(), shape, data });
        self.index.insert(name, self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Leaf every parameter into a graph, in registration order.
    pub fn leaf_all(&self, g: &mut Graph<T>) -> Vec<NodeId>
    where
        T: Gemm,
    {
        self.entries
            .iter()
            .map(|e| g.leaf(e.data.clone(), e.shape.clone(), true))
            .collect()
    }

    /// Collect per-parameter gradients after a backward pass; zeros for
    /// parameters untouched by the loss.
    pub fn collect_grads(&self, g: &Graph<T>, leaves: &[NodeId]) -> Vec<Vec<T>>
    where
        T: Gemm,
    {
        assert_eq!(leaves.len(), self.entries.len());
        self.entries
            .iter()
            .zip(leaves)
            .map(|(e, &id)| match g.grad(id) {
                Some(gr) => gr.to_vec(),
                None => vec![T::ZERO; e.data.len()],
            })
            .collect()
    }

    /// Convert every buffer to another scalar type (f32 <-> f64).
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.register(
                e.name.clone(),
                e.shape.clone(),
                e.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_is_preserved() {
        let mut store = ParamStore::<f64>::new();
        store.register("z.w", Shape::Tensor(vec![2]), vec![1.0, 2.0]);
        store.register("a.w", Shape::Tensor(vec![1]), vec![3.0]);
        assert_eq!(store.entries()[0].name, "z.w");
        assert_eq!(store.entries()[1].name, "a.w");
        assert_eq!(store.by_name("a.w"), Some(ParamId(1)));
        assert_eq!(store.total_values(), 3);
    }

    #[test]
    #[should_panic(expected = "duplicate param")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Shape::Scalar, vec![0.0]);
        store.register("w", Shape::Scalar, vec![0.0]);
    }
}

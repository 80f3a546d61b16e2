//! Named, ordered parameter storage shared by the model and the trainer.
//!
//! Parameters live outside any graph; each forward pass binds them as leaf
//! tensors. Registration order is the canonical order for optimizer state
//! and checkpoint blobs.

use crate::autodiff::{Graph, Real, Tensor};
use crate::rng::SeededRng;

/// Index of a parameter within its [`ParamSet`].
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Register a parameter; names must be unique.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<T>,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "{name} length"
        );
        self.params.push(Param {
            name,
            shape,
            values,
        });
        self.params.len() - 1
    }

    /// Truncated-normal init, std 0.02, resampled beyond 2 std.
    pub fn register_trunc_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut SeededRng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| T::from(rng.trunc_normal(std)).unwrap())
            .collect();
        self.register(name, shape, values)
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![T::zero(); n])
    }

    pub fn register_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![T::one(); n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Bind every parameter as a differentiable leaf in `graph`,
    /// in registration order.
    pub fn bind(&self, graph: &Graph<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| graph.leaf(&p.shape, p.values.clone()))
            .collect()
    }

    /// Convert the whole set to another precision, keeping names and order.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|&v| U::from(v).unwrap()).collect(),
                })
                .collect(),
        }
    }

    /// Shapes and f64 values, the form `grad_check` consumes.
    pub fn as_f64_pairs(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.shape.clone(),
                    p.values.iter().map(|&v| v.to_f64().unwrap()).collect(),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_is_stable() {
        let mut set = ParamSet::<f32>::new();
        let a = set.register("a", vec![2], vec![1.0, 2.0]);
        let b = set.register_zeros("b", vec![3]);
        assert_eq!(a, 0);
        assert_eq!(b, 1);
        assert_eq!(set.get(b).values, vec![0.0; 3]);
        assert_eq!(set.total_values(), 5);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::<f32>::new();
        set.register("w", vec![1], vec![0.0]);
        set.register("w", vec![1], vec![0.0]);
    }

    #[test]
    fn bind_creates_matching_leaves() {
        let mut set = ParamSet::<f64>::new();
        set.register("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let g = Graph::<f64>::new();
        let leaves = set.bind(&g);
        assert_eq!(leaves.len(), 1);
        assert_eq!(leaves[0].shape(), &[2, 2]);
        assert_eq!(leaves[0].values(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}

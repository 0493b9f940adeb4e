use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named trainable arrays. Shapes are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Scalar at a flat index running over all parameters in registration order.
    pub fn flat(&self, mut i: usize) -> T {
        for t in &self.tensors {
            if i < t.len() {
                return t.data()[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, v: T) {
        for t in &mut self.tensors {
            if i < t.len() {
                t.data_mut()[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn shapes_match(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if !self.shapes_match(other) {
            return Err(Error::Input("parameter layouts differ".into()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// One gradient array per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        GradStore {
            grads: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn grad(&self, idx: usize) -> &Tensor<T> {
        &self.grads[idx]
    }

    pub fn grad_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.grads[idx]
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn flat(&self, mut i: usize) -> T {
        for t in &self.grads {
            if i < t.len() {
                return t.data()[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn is_congruent(&self, params: &ParamStore<T>) -> bool {
        self.grads.len() == params.len()
            && self
                .grads
                .iter()
                .zip(params.tensors())
                .all(|(g, p)| g.shape() == p.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    /// Global L2 norm, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|t| t.data())
            .map(|x| {
                let v = x.f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.grads {
            for x in t.data_mut() {
                *x = *x * s;
            }
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &GradStore<T>, s: T) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + s * *y;
            }
        }
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(T::of(max_norm / norm));
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.push("a", Tensor::vector(vec![1.0, 2.0]));
        p.push("b", Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        p
    }

    #[test]
    fn flat_indexing_spans_tensors() {
        let mut p = store();
        assert_eq!(p.num_scalars(), 6);
        assert_eq!(p.flat(0), 1.0);
        assert_eq!(p.flat(3), 4.0);
        p.set_flat(5, -1.0);
        assert_eq!(p.get("b").unwrap().data()[3], -1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let p = store();
        let mut g = GradStore::zeros_like(&p);
        g.grad_mut(0).data_mut().copy_from_slice(&[6.0, 8.0]);
        let before = g.clip_global_norm(0.2);
        assert!((before - 10.0).abs() < 1e-6);
        assert!(g.global_norm() <= 0.2 * (1.0 + 1e-6));
        assert!((g.global_norm() - 0.2).abs() < 1e-6);
    }
}

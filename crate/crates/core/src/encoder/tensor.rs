use std::collections::BTreeMap;

use super::Float;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.to_f64_lossy())).collect(),
        }
    }
}

/// Named tensors making up a model (or its gradient, or optimizer moments).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Data of a tensor known to exist (shapes are validated up front).
    pub fn data(&self, name: &str) -> &[T] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
            .data
    }

    pub fn data_mut(&mut self, name: &str) -> &mut [T] {
        &mut self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
            .data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    /// Element-wise `self += other` over tensors present in both.
    pub fn add_assign(&mut self, other: &Self) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(name) {
                for (a, b) in t.data.iter_mut().zip(&o.data) {
                    *a += *b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors.values_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Float>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    /// Bitwise equality of the listed tensors (compares bit patterns, so NaN == NaN).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, t)| {
                other.tensors.get(k).is_some_and(|o| {
                    o.shape == t.shape
                        && o.data.len() == t.data.len()
                        && o.data.iter().zip(&t.data).all(|(a, b)| {
                            a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits()
                        })
                })
            })
    }
}

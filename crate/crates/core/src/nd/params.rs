use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{ensure, Error, Result};

/// Named set of trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Graph handles for every tensor of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Adds every tensor to `graph` as a leaf; trainable tensors get gradients.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
                .collect(),
        }
    }

    /// Adds every tensor to `graph` as a constant (inference).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.constant(v.clone())))
                .collect(),
        }
    }

    /// Like [`ParamSet::bind`], restricted to the names accepted by `keep`.
    pub fn bind_where(&self, graph: &mut Graph<T>, keep: impl Fn(&str) -> bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
                .collect(),
        }
    }

    /// Collects the gradients of the bound trainable tensors by name.
    pub fn gradients_from(&self, bound: &BoundParams, grads: &Gradients<T>) -> Result<Self> {
        let mut out = ParamSet::new();
        for (name, &var) in &bound.vars {
            if !self.get(name)?.requires_grad() {
                continue;
            }
            let g = grads
                .get(var)
                .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
            out.insert(name.clone(), g.clone());
        }
        Ok(out)
    }

    /// `self += scale * other` for every name present in `other`.
    pub fn add_scaled(&mut self, other: &ParamSet<T>, scale: T) -> Result<()> {
        for (name, t) in &other.tensors {
            let dst = self.get_mut(name)?;
            ensure!(
                dst.shape() == t.shape(),
                Dimension,
                "shape mismatch for `{name}`: {:?} vs {:?}",
                dst.shape(),
                t.shape()
            );
            for (a, &b) in dst.data_mut().iter_mut().zip(t.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    /// Elementwise sum of gradient sets, in order; absent names count as zero.
    pub fn sum_all(sets: impl IntoIterator<Item = ParamSet<T>>) -> Self {
        let mut total: Option<ParamSet<T>> = None;
        for set in sets {
            match total.as_mut() {
                None => total = Some(set),
                Some(acc) => {
                    for (name, t) in set.tensors {
                        match acc.tensors.get_mut(&name) {
                            Some(dst) => dst.add_assign(&t),
                            None => {
                                acc.tensors.insert(name, t);
                            }
                        }
                    }
                }
            }
        }
        total.unwrap_or_default()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

impl ParamSet<f32> {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, marked trainable.
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-limit..=limit)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape and data agree");
        self.insert(name, t.with_grad());
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape).with_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_limit_and_seed() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        a.init_uniform("w", &[40, 128], 128, 40, &mut ChaCha8Rng::seed_from_u64(3));
        b.init_uniform("w", &[40, 128], 128, 40, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let limit = (6.0f32 / 168.0).sqrt();
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= limit));
        assert!(a.get("w").unwrap().requires_grad());
    }

    #[test]
    fn sum_all_adds_elementwise() {
        let mut a = ParamSet::<f32>::new();
        a.insert("x", Tensor::vector(vec![1.0, 2.0]));
        let mut b = ParamSet::<f32>::new();
        b.insert("x", Tensor::vector(vec![0.5, -2.0]));
        let s = ParamSet::sum_all([a, b]);
        assert_eq!(s.get("x").unwrap().data(), [1.5, 0.0]);
    }
}

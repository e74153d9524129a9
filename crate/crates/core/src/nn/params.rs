//! Named parameter sets and their binding onto a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;

use super::{Elem, Gradients, Graph, Tensor, Var};

/// Flat, name-ordered parameter set (`align.*`, `backbone.*`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor<f32>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor<f32>)> {
        self.map.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Params {
        Params { map: self.map.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

impl FromIterator<(String, Tensor<f32>)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<f32>)>>(iter: I) -> Self {
        Params { map: iter.into_iter().collect() }
    }
}

/// A graph with parameters bound lazily by name.
pub struct Session<'p, T: Elem = f32> {
    pub graph: Graph<T>,
    params: &'p Params,
    bound: BTreeMap<String, Var>,
}

impl<'p, T: Elem> Session<'p, T> {
    pub fn new(params: &'p Params, train: bool) -> Self {
        let graph = if train { Graph::new() } else { Graph::inference() };
        Self { graph, params, bound: BTreeMap::new() }
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Leaf for parameter `name`; panics when it does not exist, which means
    /// the parameter set was built for a different spec.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self.params.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let v = self.graph.leaf(t.cast());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn opt(&mut self, name: &str) -> Option<Var> {
        self.has(name).then(|| self.p(name))
    }

    /// Parameters touched by the forward pass, with their leaves.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient for every parameter in the set; untouched ones get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Params {
        self.params
            .iter()
            .map(|(name, t)| {
                let g = self.bound.get(name).and_then(|&v| grads.get(v)).map(|g| g.cast()).unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` conv weight.
pub fn conv_weight<R: Rng>(rng: &mut R, c_out: usize, c_in_per_group: usize, k: usize) -> Tensor<f32> {
    let fan_in = (c_in_per_group * k * k) as f32;
    let bound = 1.0 / fan_in.sqrt();
    let n = c_out * c_in_per_group * k * k;
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(&[c_out, c_in_per_group, k, k], data)
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::Graph;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// He-normal initialized `fan_in x fan_out` weight.
    pub fn add_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn add_bias(&mut self, name: impl Into<String>, width: usize, value: f64) -> ParamId {
        self.add(name, Tensor::full(vec![1, width], value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Adam optimizer state, one moment pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Collect gradients from `graph` into a dense per-parameter buffer.
    pub fn gather_grads(store: &ParamStore, graph: &Graph) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        for (id, g) in graph.param_grads() {
            if let Some(g) = g {
                out[id.0].iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
        out
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, tensor) in store.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data.iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

//! Named parameter tensors and their gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{input, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(input(format!("tensor of shape {shape:?} given {} values", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with the given std, redrawn outside ±2 std.
    TruncNormal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered parameter collection. Order is part of the checkpoint contract.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, stream: SeedStream) -> usize {
        let name = name.into();
        let mut t = Tensor::zeros(shape);
        if let Init::TruncNormal(std) = init {
            let mut rng = stream.fork(self.params.len() as u64).rng();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut t.data {
                *v = loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * std {
                        break x;
                    }
                };
            }
        }
        self.params.push(Param { name, value: t });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrites every value with zero-mean uniform noise of standard deviation `std`.
    /// Used to build generic (non-identity) test networks.
    pub fn randomize(&mut self, std: f64, stream: SeedStream) {
        let mut rng = stream.rng();
        for p in &mut self.params {
            for v in &mut p.value.data {
                *v = std * (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt();
            }
        }
    }

    /// Replaces all values from `(name, tensor)` pairs in store order.
    pub fn load(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(input(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(tensors) {
            if &p.name != name || p.value.shape != t.shape {
                return Err(input(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    p.name, p.value.shape, name, t.shape
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self { blocks: params.iter().map(|p| vec![0.0; p.value.numel()]).collect() }
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|g| g.is_finite())
    }
}

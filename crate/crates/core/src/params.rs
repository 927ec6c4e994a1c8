//! Named parameter tensors and the AdamW optimizer that updates them.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    /// Inserts a `rows x cols` matrix drawn from N(0, scale^2).
    pub fn insert_normal(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) {
        let m = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * scale);
        self.insert(name, m);
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
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

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.tensors
            .iter()
            .map(|(k, a)| {
                let b = other.get(k);
                a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Read-only view of the scalar at flat `index` in tensor `name`.
    pub fn scalar_at(&self, name: &str, index: usize) -> f64 {
        let m = self.get(name);
        m[[index / m.ncols(), index % m.ncols()]]
    }

    pub fn set_scalar(&mut self, name: &str, index: usize, value: f64) {
        let m = self.tensors.get_mut(name).expect("unknown parameter");
        let cols = m.ncols();
        m[[index / cols, index % cols]] = value;
    }
}

/// Gradient map keyed like a [`ParamStore`].
pub type GradMap = BTreeMap<String, Mat>;

/// Adds `src` into `dst`, creating entries as needed.
pub fn accumulate(dst: &mut GradMap, src: impl IntoIterator<Item = (String, Mat)>) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(existing) => *existing += &g,
            None => {
                dst.insert(name, g);
            }
        }
    }
}

pub fn scale_grads(grads: &mut GradMap, c: f64) {
    for g in grads.values_mut() {
        g.mapv_inplace(|v| v * c);
    }
}

pub fn grads_finite(grads: &GradMap) -> bool {
    grads.values().all(|m| m.iter().all(|v| v.is_finite()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
    pub updates: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (k, v) in p.iter() {
                z.insert(k.clone(), Array2::zeros(v.raw_dim()));
            }
            z
        };
        Self {
            config,
            first_moment: zeros(params),
            second_moment: zeros(params),
            updates: 0,
        }
    }

    /// One descent step. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        if !grads_finite(grads) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.updates += 1;
        let c = self.config;
        let t = self.updates as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                return Err(Error::Contract(format!("gradient for unknown parameter `{name}`")));
            };
            let m = self.first_moment.get_mut(name).expect("moment layout");
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            let v = self.second_moment.get_mut(name).expect("moment layout");
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let m = self.first_moment.get(name);
            let v = self.second_moment.get(name);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let mhat = m / bias1;
                let vhat = v / bias2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            });
        }
        Ok(())
    }
}

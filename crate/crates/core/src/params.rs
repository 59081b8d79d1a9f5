//! Named parameter storage, gradient buffers and the Adam optimizer.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GosumError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform initialised `rows x cols` matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        self.add(name, value, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros((rows, cols)), true)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Sets every entry of every parameter whose name starts with `prefix`.
    /// Returns the number of parameters touched.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) -> usize {
        let mut touched = 0;
        for (name, m) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                m.fill(value);
                touched += 1;
            }
        }
        touched
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// Little-endian binary dump: count, then per parameter the name,
    /// trainable flag, shape and raw `f64` entries.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for ((name, m), &trainable) in self.names.iter().zip(&self.values).zip(&self.trainable) {
            write_str(w, name)?;
            w.write_all(&[trainable as u8])?;
            w.write_all(&(m.nrows() as u64).to_le_bytes())?;
            w.write_all(&(m.ncols() as u64).to_le_bytes())?;
            for x in m.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let count = read_u64(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = read_str(r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(read_f64(r)?);
            }
            let m = Matrix::from_shape_vec((rows, cols), data)
                .map_err(|e| GosumError::Checkpoint(format!("parameter {name}: {e}")))?;
            store.add(name, m, flag[0] != 0);
        }
        Ok(store)
    }
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > 1 << 24 {
        return Err(GosumError::Checkpoint(format!(
            "string length {len} too large"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| GosumError::Checkpoint(e.to_string()))
}

/// Per-parameter gradient buffers. Parameters the loss never touched hold
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Descends along `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self.second[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let (m, v) = (
                self.first[id.0].as_ref().unwrap(),
                self.second[id.0].as_ref().unwrap(),
            );
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| {
                    *p -= learning_rate * (m / c1) / ((v / c2).sqrt() + epsilon);
                });
        }
    }
}

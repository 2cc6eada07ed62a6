use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamTensor {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Named trainable arrays in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.tensors.push(ParamTensor::new(name, value));
        Ok(id)
    }

    /// Xavier/Glorot uniform in +-sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.add(name, xavier_uniform(rows, cols, rng))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0].value
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data().len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.grad.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Serialises every array as `name rows cols` followed by the values,
    /// ordered lexicographically by name.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        for id in self.by_name.values() {
            let t = &self.tensors[id.0];
            let _ = writeln!(out, "{} {} {}", t.name, t.value.rows(), t.value.cols());
            for r in 0..t.value.rows() {
                let line: Vec<String> = t.value.row(r).iter().map(|v| format!("{v:e}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    /// Parses a checkpoint into name -> array pairs.
    pub fn parse_checkpoint(text: &str, path: &Path) -> Result<BTreeMap<String, Matrix>> {
        let mut arrays = BTreeMap::new();
        let mut tokens = text.split_whitespace();
        while let Some(name) = tokens.next() {
            let mut dim = |what: &str| -> Result<usize> {
                tokens
                    .next()
                    .ok_or_else(|| Error::parse(path, format!("{name}: missing {what}")))?
                    .parse()
                    .map_err(|e| Error::parse(path, format!("{name}: bad {what}: {e}")))
            };
            let rows = dim("rows")?;
            let cols = dim("cols")?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let tok = tokens
                    .next()
                    .ok_or_else(|| Error::parse(path, format!("{name}: truncated values")))?;
                let v: f64 = tok
                    .parse()
                    .map_err(|e| Error::parse(path, format!("{name}: bad value {tok:?}: {e}")))?;
                data.push(v);
            }
            arrays.insert(name.to_string(), Matrix::from_vec(rows, cols, data)?);
        }
        Ok(arrays)
    }

    /// Overwrites values from a checkpoint. Every registered array must be
    /// present with a matching shape; extra arrays are an error.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.load_arrays(Self::parse_checkpoint(&text, path)?, path)
    }

    pub fn load_arrays(&mut self, mut arrays: BTreeMap<String, Matrix>, path: &Path) -> Result<()> {
        for t in &mut self.tensors {
            let m = arrays
                .remove(&t.name)
                .ok_or_else(|| Error::parse(path, format!("missing array {}", t.name)))?;
            if m.shape() != t.value.shape() {
                return Err(Error::shape("load_checkpoint", t.value.shape(), m.shape()));
            }
            t.value = m;
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::parse(path, format!("unexpected array {extra}")));
        }
        Ok(())
    }
}

pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::lten;
use crate::tensor::{DType, Tape, Tensor, Var};

use super::CodecError;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal weights of the given shape.
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Puts every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Writes one LTEN1 file per tensor plus `manifest.txt`, a key-value
    /// text file with the given metadata and the parameter table.
    pub fn save(&self, dir: impl AsRef<Path>, meta: &BTreeMap<String, String>) -> Result<(), CodecError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("params")).map_err(lten::LtenError::from)?;
        let mut manifest = String::new();
        for (k, v) in meta {
            writeln!(manifest, "{k} = {v}").unwrap();
        }
        writeln!(manifest, "param_count = {}", self.len()).unwrap();
        for (i, (name, t)) in self.names.iter().zip(&self.values).enumerate() {
            let file = format!("{i:04}.lten");
            lten::save(dir.join("params").join(&file), t, DType::F64)?;
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "param.{i:04} = {name} {file} {}", shape.join("x")).unwrap();
        }
        std::fs::write(dir.join("manifest.txt"), manifest).map_err(lten::LtenError::from)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`]; returns the
    /// parameters and the non-parameter metadata.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>), CodecError> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.txt")).map_err(lten::LtenError::from)?;
        let mut meta = BTreeMap::new();
        let mut store = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let Some((k, v)) = line.split_once(" = ") else {
                return Err(CodecError::Manifest(format!("line {}: {line}", lineno + 1)));
            };
            if k.starts_with("param.") {
                let parts: Vec<&str> = v.split(' ').collect();
                if parts.len() != 3 {
                    return Err(CodecError::Manifest(format!("line {}: {line}", lineno + 1)));
                }
                let t = lten::load(dir.join("params").join(parts[1]))?;
                let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                if shape.join("x") != parts[2] {
                    return Err(CodecError::Manifest(format!("shape of {} does not match its file", parts[0])));
                }
                store.add(parts[0], t);
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        Ok((store, meta))
    }

    /// Replaces the values with those of `other`, matching by name.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), CodecError> {
        if other.len() != self.len() {
            return Err(CodecError::Manifest(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        for i in 0..self.len() {
            let src = other
                .find(&self.names[i])
                .ok_or_else(|| CodecError::Manifest(format!("missing parameter {}", self.names[i])))?;
            let t = other.get(src);
            if t.shape() != self.values[i].shape() {
                return Err(CodecError::Manifest(format!("shape mismatch for {}", self.names[i])));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Routes one parameter through a different tape variable, e.g. a probe
    /// for finite differences.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }
}

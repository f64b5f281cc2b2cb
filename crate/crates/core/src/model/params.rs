use std::fs;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_stf1, write_stf1, Tensor};

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.frozen.push(false);
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

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (n, f) in self.names.iter().zip(self.frozen.iter_mut()) {
            if n.starts_with(prefix) {
                *f = frozen;
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf. Frozen parameters never require
    /// gradients; the rest do when `grad` is set.
    pub fn bind(&self, tape: &mut Tape<T>, grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .zip(&self.frozen)
            .map(|(t, &f)| tape.leaf(t.clone(), grad && !f))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Writes one `<name>.stf1` file per tensor into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (n, t) in self.names.iter().zip(&self.tensors) {
            write_stf1(dir.join(format!("{n}.stf1")), t)?;
        }
        Ok(())
    }

    /// Overwrites every tensor from `dir`, checking names and shapes.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let path = dir.join(format!("{n}.stf1"));
            let loaded: Tensor<T> = read_stf1(&path)?;
            if loaded.shape() != t.shape() {
                return Err(Error::format(
                    &path,
                    format!("shape {:?}, expected {:?}", loaded.shape(), t.shape()),
                ));
            }
            *t = loaded;
        }
        Ok(())
    }
}

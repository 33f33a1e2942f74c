//! Named parameter groups: the unit of freezing, checksumming and
//! checkpoint serialization.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An ordered set of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup {
    pub name: String,
    params: Vec<(String, Var)>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Vec::new(),
        }
    }

    /// Registers `tensor` as a variable and returns the handle.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&tensor)?;
        self.params.push((name.into(), var.clone()));
        Ok(var)
    }

    pub fn push_var(&mut self, name: impl Into<String>, var: Var) {
        self.params.push((name.into(), var));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.params {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?;
            match values.dtype() {
                DType::F64 => {
                    for v in values.to_vec1::<f64>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in values.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Writes the group as a safetensors blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .params
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter in place from a blob written by [`save`](Self::save).
    pub fn load_into(&self, path: &Path, device: &Device) -> Result<()> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let map = candle_core::safetensors::load(path, device)?;
        for (name, var) in &self.params {
            let t = map.get(name).ok_or_else(|| {
                Error::invalid(format!("{}: missing tensor '{name}'", path.display()))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Shape {
                    expected: format!("{name} {:?}", var.dims()),
                    got: format!("{:?}", t.dims()),
                });
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Deep copy with fresh variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.name.clone());
        for (n, v) in &self.params {
            out.add(n.clone(), v.as_tensor().copy()?)?;
        }
        Ok(out)
    }
}

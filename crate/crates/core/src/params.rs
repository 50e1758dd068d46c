//! Named parameter tensors and their on-disk checkpoint form: a directory of
//! `TSR1` snapshots plus `manifest.txt` with one `name file shape sha256` line
//! per tensor.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape as a leaf, in order.
    pub fn to_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let file = format!("{name}.tsr");
            let bytes = t.to_snapshot_bytes();
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            let shape = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            manifest.push_str(&format!("{name} {file} {shape} {}\n", hex::encode(Sha256::digest(&bytes))));
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut set = ParamSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, file, shape, checksum] = fields[..] else {
                return Err(Error::format(&manifest_path, format!("line {}: expected 4 fields", lineno + 1)));
            };
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if hex::encode(Sha256::digest(&bytes)) != checksum {
                return Err(Error::format(&path, "checksum mismatch"));
            }
            let t = Tensor::from_snapshot_bytes(&bytes, &path)?;
            let listed = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            if listed != shape {
                return Err(Error::format(&path, format!("manifest shape {shape}, file shape {listed}")));
            }
            set.push(name, t);
        }
        Ok(set)
    }
}

/// Convolution kernel drawn from N(0, (std / √fan_in)²).
pub fn gaussian_kernel<R: Rng>(rng: &mut R, shape: [usize; 4], std: f64) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let normal = Normal::new(0.0, std / fan_in.sqrt()).expect("finite std");
    Tensor::from_fn(&shape, |_| normal.sample(rng))
}

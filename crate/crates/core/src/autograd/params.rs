//! Named parameter storage, tape binding and checkpoint files.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"COSFCKPT";
pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Ordered list of named tensors; layers refer to entries by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters recorded on a tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, i: usize) -> Var<'t> {
        self.vars[i]
    }

    /// Gradients of every parameter, in parameter order.
    pub fn grads(&self, g: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.take(v)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    model_kind: String,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Conv weight `[cout, cin, k...]` with He-uniform init, plus a zero bias.
    pub fn add_conv(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        kernel: &[usize],
        rng: &mut impl Rng,
    ) -> (usize, usize) {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let fan_in = cin * kernel.iter().product::<usize>();
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n = shape.iter().product();
        let w = Tensor::from_vec(
            shape,
            (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
        );
        let wi = self.add(format!("{name}.weight"), w);
        let bi = self.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        (wi, bi)
    }

    /// Conv with all-zero weights and bias (identity-preserving output heads).
    pub fn add_zero_conv(
        &mut self,
        name: &str,
        cout: usize,
        cin: usize,
        kernel: &[usize],
    ) -> (usize, usize) {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let wi = self.add(format!("{name}.weight"), Tensor::zeros(&shape));
        let bi = self.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        (wi, bi)
    }

    /// Instance-norm scale (ones) and shift (zeros).
    pub fn add_norm(&mut self, name: &str, channels: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let b = self.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        (g, b)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Writes a checkpoint: magic, header length, JSON manifest, raw `f32` little-endian data.
    pub fn save(&self, path: &Path, model_kind: &str) -> Result<()> {
        let mut offset = 0;
        let entries = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = Manifest {
            schema_version: CHECKPOINT_SCHEMA,
            model_kind: model_kind.into(),
            entries,
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut buf = Vec::with_capacity(16 + header.len() + 4 * offset);
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`ParamSet::save`] for the given model kind.
    pub fn load(path: &Path, model_kind: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingModel(path.display().to_string()),
                _ => Error::io(path, e),
            })?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let manifest: Manifest = serde_json::from_slice(header)?;
        if manifest.schema_version != CHECKPOINT_SCHEMA {
            return Err(bad(format!("schema version {}", manifest.schema_version)));
        }
        if manifest.model_kind != model_kind {
            return Err(bad(format!(
                "holds a {} model, expected {model_kind}",
                manifest.model_kind
            )));
        }
        let payload = &bytes[16 + hlen..];
        let mut out = ParamSet::new();
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(4 * e.offset..4 * (e.offset + n))
                .ok_or_else(|| bad(format!("payload too short for {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.add(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(out)
    }

    /// Replaces values with `other`'s after checking names and shapes agree.
    pub fn assign(&mut self, other: ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(
                "parameter names do not match the architecture".into(),
            ));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }
}

//! Named parameter collections and their binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FLSC" | version: u32 | entry count: u64
//! per entry: name length: u64 | UTF-8 name | rank: u64 | extents: u64 x rank | data: f64 x numel
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Suffixes of tensors that are tracked state rather than trainable weights.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer_name(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    entries: IndexMap<String, Tensor>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, deriving `requires_grad` from the name.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        let name = name.into();
        t.requires_grad = !is_buffer_name(&name);
        self.entries.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar values across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    /// Adds all entries of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ModelWeights) {
        for (k, v) in other.entries {
            self.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ModelWeights {
        let mut out = ModelWeights::new();
        for (k, v) in &self.entries {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest.to_string(), v.clone());
            }
        }
        out
    }

    /// Copies values of every entry in `src` into the matching entry under
    /// `prefix`. Shapes must match.
    pub fn assign_prefixed(&mut self, prefix: &str, src: &ModelWeights) -> Result<()> {
        for (k, v) in src.iter() {
            let name = format!("{prefix}{k}");
            let dst = self.get_mut(&name).ok_or_else(|| TensorError::MissingParam(name.clone()))?;
            if dst.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "assign",
                    lhs: dst.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    /// Two sets are aggregable iff they have identical names (in order) and
    /// shapes.
    pub fn check_aggregable(&self, other: &ModelWeights) -> Result<()> {
        if self.len() != other.len() {
            return Err(TensorError::NotAggregable(format!(
                "{} entries vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(TensorError::NotAggregable(format!("`{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(TensorError::NotAggregable(format!(
                    "`{ka}` has shape {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm of the gradients of entries whose name starts with
    /// `prefix`; zero when none are populated.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies queued buffer replacements produced during a forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Vec<f64>)>) -> Result<()> {
        for (name, values) in updates {
            let t = self.get_mut(&name).ok_or_else(|| TensorError::MissingParam(name.clone()))?;
            if t.numel() != values.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "buffer update",
                    lhs: t.shape().to_vec(),
                    rhs: vec![values.len()],
                });
            }
            t.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(&mut r, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u64(&mut r, "entry count")?;
        let mut out = ModelWeights::new();
        for i in 0..count {
            let name_len = read_u64(&mut r, "name length")? as usize;
            if name_len > 1 << 16 {
                return Err(TensorError::Checkpoint(format!("entry {i}: name length {name_len} is implausible")));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Checkpoint(format!("entry {i}: name is not UTF-8")))?;
            let rank = read_u64(&mut r, "rank")? as usize;
            if rank > 16 {
                return Err(TensorError::Checkpoint(format!("`{name}`: rank {rank} is implausible")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r, "extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_array(&mut r, "data")?));
            }
            out.insert(name, Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_checkpoint(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| TensorError::Checkpoint(format!("truncated while reading {what}: {e}")))
}

fn read_array<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, what)?))
}

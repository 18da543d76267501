//! Labeled embedding collections and the `EMB1` binary file format.
//!
//! Every stage of the pipeline exchanges data as an [`EmbeddingSet`]: a
//! class-name table plus a list of `(class_index, f32 vector)` records.
//! Class names are the join key between files; indices are file-local.
//!
//! `EMB1` layout, all integers little-endian:
//!
//! ```text
//! "EMB1" | u32 version=1 | u32 dim | u32 class_count | u32 record_count
//! class_count × (u32 byte_len, UTF-8 name bytes)
//! record_count × (u32 class_index, dim × f32)
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB1_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    class_names: Vec<String>,
    labels: Vec<u32>,
    data: Vec<f32>,
}

impl EmbeddingSet {
    /// Creates an empty set. Fails if `dim` is zero or the class table is
    /// empty, contains an empty name, or repeats a name.
    pub fn new(dim: usize, class_names: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSet("dim must be positive".into()));
        }
        if class_names.is_empty() {
            return Err(Error::InvalidSet("class table is empty".into()));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.is_empty() {
                return Err(Error::InvalidSet("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidSet(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self {
            dim,
            class_names,
            labels: Vec::new(),
            data: Vec::new(),
        })
    }

    pub fn push(&mut self, class_index: usize, vector: &[f32]) -> Result<()> {
        if class_index >= self.class_names.len() {
            return Err(Error::ClassIndexOutOfRange {
                record: self.labels.len(),
                index: class_index as u32,
                classes: self.class_names.len(),
            });
        }
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        self.labels.push(class_index as u32);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn push_f64(&mut self, class_index: usize, vector: &[f64]) -> Result<()> {
        let v: Vec<f32> = vector.iter().map(|&x| x as f32).collect();
        self.push(class_index, &v)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector_f64(&self, i: usize) -> Vec<f64> {
        self.vector(i).iter().map(|&x| x as f64).collect()
    }

    /// Row-major `len × dim` copy in 64-bit precision.
    pub fn to_f64_rows(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        self.labels
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(&l, v)| (l as usize, v))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Appends all records of `other`, joining classes by name.
    pub fn extend_from(&mut self, other: &EmbeddingSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let remap = other
            .class_names
            .iter()
            .map(|n| self.class_index(n).ok_or_else(|| Error::UnknownClass(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        for (label, v) in other.iter() {
            self.labels.push(remap[label] as u32);
            self.data.extend_from_slice(v);
        }
        Ok(())
    }

    /// Returns a copy with every vector scaled to unit Euclidean norm.
    pub fn normalize(&self) -> Result<EmbeddingSet> {
        let mut out = self.clone();
        for (i, chunk) in out.data.chunks_exact_mut(self.dim).enumerate() {
            let norm = chunk
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroVector(i));
            }
            for x in chunk.iter_mut() {
                *x = ((*x as f64) / norm) as f32;
            }
        }
        Ok(out)
    }

    /// Partitions records by class according to `split`. Each returned set
    /// uses the split's own name order as its class table.
    pub fn apply_split(&self, split: &SplitSpec) -> Result<(EmbeddingSet, EmbeddingSet)> {
        split.validate()?;
        let base = self.select_classes(&split.base)?;
        let new = self.select_classes(&split.new)?;
        Ok((base, new))
    }

    /// Keeps only records of the named classes, re-indexed to `names` order.
    pub fn select_classes(&self, names: &[String]) -> Result<EmbeddingSet> {
        let mut remap: HashMap<usize, usize> = HashMap::new();
        for (new_idx, name) in names.iter().enumerate() {
            let old = self
                .class_index(name)
                .ok_or_else(|| Error::UnknownClass(name.clone()))?;
            remap.insert(old, new_idx);
        }
        let mut out = EmbeddingSet::new(self.dim, names.to_vec())?;
        for (label, v) in self.iter() {
            if let Some(&idx) = remap.get(&label) {
                out.labels.push(idx as u32);
                out.data.extend_from_slice(v);
            }
        }
        Ok(out)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self.class_names.iter().map(|n| 4 + n.len()).sum::<usize>()
            + self.len() * (4 + 4 * self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&EMB1_MAGIC);
        buf.extend_from_slice(&EMB1_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.class_names.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        for name in &self.class_names {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        for (label, v) in self.iter() {
            buf.extend_from_slice(&(label as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingSet> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != EMB1_MAGIC {
            return Err(Error::BadMagic {
                expected: EMB1_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != EMB1_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u32()? as usize;
        let class_count = r.u32()? as usize;
        let record_count = r.u32()? as usize;
        let mut names = Vec::with_capacity(class_count.min(1 << 16));
        for _ in 0..class_count {
            let len = r.u32()? as usize;
            let offset = r.pos;
            let raw = r.take(len)?;
            let name = std::str::from_utf8(raw).map_err(|_| {
                Error::InvalidSet(format!("class name at byte offset {offset} is not UTF-8"))
            })?;
            names.push(name.to_owned());
        }
        let mut set = EmbeddingSet::new(dim, names)?;
        set.labels.reserve(record_count.min(1 << 20));
        for record in 0..record_count {
            let index = r.u32()?;
            if index as usize >= class_count {
                return Err(Error::ClassIndexOutOfRange {
                    record,
                    index,
                    classes: class_count,
                });
            }
            let raw = r.take(4 * dim)?;
            set.labels.push(index);
            set.data.extend(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidSet(format!(
                "{} trailing bytes after record {}",
                bytes.len() - r.pos,
                record_count
            )));
        }
        Ok(set)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_emb1(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&set.to_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_emb1(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingSet::from_bytes(&bytes)
}

/// Base/new class partition, serialized as `{"base": [...], "new": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base: Vec<String>,
    pub new: Vec<String>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base.is_empty() || self.new.is_empty() {
            return Err(Error::Config("split needs non-empty base and new lists".into()));
        }
        let base: HashSet<&str> = self.base.iter().map(String::as_str).collect();
        if let Some(dup) = self.new.iter().find(|n| base.contains(n.as_str())) {
            return Err(Error::SplitOverlap(dup.clone()));
        }
        Ok(())
    }

    pub fn all_classes(&self) -> Vec<String> {
        self.base.iter().chain(&self.new).cloned().collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SplitSpec> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: SplitSpec = serde_json::from_str(&text)?;
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

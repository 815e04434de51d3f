//! Named, role-tagged parameter collections and their on-disk container.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic  b"FSPARAM1"
//! u32    entry count
//! per entry: u32 name length, name bytes (UTF-8), u8 role, u32 rank, u64 × rank dims
//! f64 × Σ numel, entries in construction order
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSPARAM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    NormAffine,
    NormRunningStat,
    Weight,
    Bias,
    Frozen,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        matches!(self, ParamRole::NormAffine | ParamRole::Weight | ParamRole::Bias)
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamRole::NormAffine | ParamRole::NormRunningStat)
    }

    /// Participates in aggregation when shared.
    pub fn is_federated(self) -> bool {
        self != ParamRole::Frozen
    }

    fn code(self) -> u8 {
        match self {
            ParamRole::NormAffine => 0,
            ParamRole::NormRunningStat => 1,
            ParamRole::Weight => 2,
            ParamRole::Bias => 3,
            ParamRole::Frozen => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ParamRole::NormAffine,
            1 => ParamRole::NormRunningStat,
            2 => ParamRole::Weight,
            3 => ParamRole::Bias,
            4 => ParamRole::Frozen,
            _ => return Err(FedError::ParamFormat(format!("unknown role code {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub role: ParamRole,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionPolicy {
    All,
    ExcludeNorm,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, role: ParamRole) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(FedError::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry { name, tensor, role });
        Ok(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total scalar count over all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Same names, shapes and roles with every value zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape()),
                    role: e.role,
                })
                .collect(),
        }
    }

    /// Errors unless `other` has identical names, shapes and roles in the
    /// same order.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(FedError::Protocol(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.role != b.role {
                return Err(FedError::Protocol(format!("parameter {} does not match {}", a.name, b.name)));
            }
            if a.tensor.shape() != b.tensor.shape() {
                return Err(FedError::shape("parameter", a.tensor.shape(), b.tensor.shape()));
            }
        }
        Ok(())
    }

    /// Splits into `(shared, local)` under `policy`.
    pub fn partition(&self, policy: PartitionPolicy) -> (ParamSet, ParamSet) {
        let (local, shared): (Vec<_>, Vec<_>) = self
            .entries
            .iter()
            .cloned()
            .partition(|e| policy == PartitionPolicy::ExcludeNorm && e.role.is_norm());
        (ParamSet { entries: shared }, ParamSet { entries: local })
    }

    /// Overwrites entries whose names appear in `other`; returns how many
    /// were replaced. Shapes must agree.
    pub fn overwrite_from(&mut self, other: &ParamSet) -> Result<usize> {
        let mut n = 0;
        for e in &other.entries {
            let i = self
                .index_of(&e.name)
                .ok_or_else(|| FedError::Protocol(format!("unknown parameter {}", e.name)))?;
            self.entries[i].tensor.same_shape(&e.tensor, "overwrite")?;
            self.entries[i].tensor = e.tensor.clone();
            n += 1;
        }
        Ok(n)
    }

    pub fn name_set(&self) -> HashSet<&str> {
        self.names().collect()
    }

    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.tensor.round_to_f32();
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.role.code());
            out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(FedError::ParamFormat("bad magic".into()));
        }
        let count = r.u32()? as usize;
        let mut header = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| FedError::ParamFormat("name is not UTF-8".into()))?;
            let role = ParamRole::from_code(r.take(1)?[0])?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            header.push((name, role, shape));
        }
        let mut set = ParamSet::new();
        for (name, role, shape) in header {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| FedError::ParamFormat(e.to_string()))?;
            set.push(name, t, role).map_err(|e| FedError::ParamFormat(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(FedError::ParamFormat("trailing bytes".into()));
        }
        Ok(set)
    }

    /// Human-readable manifest: name, role, shape and element offset.
    pub fn manifest(&self) -> serde_json::Value {
        let mut offset = 0;
        let entries: Vec<_> = self
            .entries
            .iter()
            .map(|e| {
                let v = serde_json::json!({
                    "name": e.name,
                    "role": e.role,
                    "shape": e.tensor.shape(),
                    "offset": offset,
                });
                offset += e.tensor.numel();
                v
            })
            .collect();
        serde_json::json!({ "format": "FSPARAM1", "total_elements": offset, "entries": entries })
    }

    /// Writes `path` (binary) and `path` with a `.json` extension (manifest).
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::output::write_atomic(path, &self.to_bytes())?;
        let manifest = serde_json::to_vec_pretty(&self.manifest()).expect("manifest serializes");
        crate::harness::output::write_atomic(&path.with_extension("json"), &manifest)
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let bytes = std::fs::read(path).map_err(|e| FedError::io(path, e))?;
        ParamSet::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FedError::ParamFormat("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

//! Binary checkpoint, all integers and floats little-endian:
//!
//! ```text
//! "CRDA" | version u32 | config hash u64 | step u64 | tensor count u32
//! per tensor: name length u32 | name (UTF-8) | rank u32 | dims u32 × rank | f32 × Π dims
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelParams, PARAM_NAMES};

pub const MAGIC: &[u8; 4] = b"CRDA";
pub const VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["student", "teacher", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    /// Completed iterations; also the optimizer's update count.
    pub step: u64,
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        let groups: [Vec<&Tensor<f32>>; 4] = [
            self.student.tensors().iter().map(|n| &n.tensor).collect(),
            self.teacher.tensors().iter().map(|n| &n.tensor).collect(),
            self.adam_m.iter().collect(),
            self.adam_v.iter().collect(),
        ];
        for (group, tensors) in GROUPS.iter().zip(groups) {
            for (name, t) in PARAM_NAMES.iter().zip(tensors) {
                out.push((format!("{group}.{name}"), t));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, tensors.len() as u32);
        for (name, t) in tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a whole checkpoint; nothing is returned unless every record is
    /// present and consistent.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_hash = r.u64("config hash")?;
        let step = r.u64("step")?;
        let count = r.u32("tensor count")? as usize;
        let expected = GROUPS.len() * PARAM_NAMES.len();
        if count != expected {
            // Read on regardless so a damaged count surfaces as truncation when
            // the records run out before it is satisfied.
            if count > expected {
                for _ in 0..count {
                    read_tensor(&mut r)?;
                }
            }
            return Err(CheckpointError::Malformed(format!("{count} tensors, expected {expected}")));
        }
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let (name, t) = read_tensor(&mut r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")));
            }
        }
        if !r.bytes.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.bytes.len())));
        }
        let mut take_group = |group: &str| -> Result<Vec<Tensor<f32>>, CheckpointError> {
            PARAM_NAMES
                .iter()
                .map(|n| {
                    let key = format!("{group}.{n}");
                    tensors.remove(&key).ok_or_else(|| CheckpointError::Malformed(format!("missing tensor `{key}`")))
                })
                .collect()
        };
        let student_t = take_group("student")?;
        let teacher_t = take_group("teacher")?;
        let adam_m = take_group("adam_m")?;
        let adam_v = take_group("adam_v")?;
        let (c_in, c_classes) = match (student_t[0].shape(), student_t[5].shape()) {
            ([_, c_in, _, _], [c]) => (*c_in, *c),
            _ => return Err(CheckpointError::Malformed("unexpected parameter ranks".into())),
        };
        let build = |t: Vec<Tensor<f32>>| {
            ModelParams::from_tensors(c_in, c_classes, t).map_err(|e| CheckpointError::Malformed(e.to_string()))
        };
        let student = build(student_t)?;
        let teacher = build(teacher_t)?;
        for moments in [&adam_m, &adam_v] {
            for (m, p) in moments.iter().zip(student.tensors()) {
                if m.shape() != p.tensor.shape() {
                    return Err(CheckpointError::Malformed(format!("moment shape mismatch for `{}`", p.name)));
                }
            }
        }
        Ok(Checkpoint { config_hash, step, student, teacher, adam_m, adam_v })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>), CheckpointError> {
    let name_len = r.u32("name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
        .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
        .to_string();
    let rank = r.u32("rank")? as usize;
    let dims_bytes = r.take(rank.checked_mul(4).ok_or(CheckpointError::Truncated("dims"))?, "dims")?;
    let dims: Vec<usize> =
        dims_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize).collect();
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or(CheckpointError::Truncated("tensor data"))?;
    let data = r.take(n, "tensor data")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let t = Tensor::new(&dims, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((name, t))
}

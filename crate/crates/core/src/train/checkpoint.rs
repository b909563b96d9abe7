//! Binary checkpoints: little-endian `PSCK`, version 1.
//!
//! ```text
//! magic "PSCK" | u32 version | u64 step | [u8; 32] config hash | u32 count
//! per tensor: u32 name length, name, u32 rank, rank × u64 dims, f32 data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::proposals::Reader;
use crate::tensor::Tensor;
use crate::train::optimizer::AdamW;

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: [u8; 32],
    /// Prefixed `student/`, `teacher/`, `adam.m/`, `adam.v/`.
    pub tensors: Vec<(String, Tensor)>,
}

const GROUPS: [&str; 4] = ["student", "teacher", "adam.m", "adam.v"];

impl Checkpoint {
    pub fn from_state(
        step: u64,
        config_hash: [u8; 32],
        student: &DetectorParams,
        teacher: &DetectorParams,
        optimizer: &AdamW,
    ) -> Self {
        let mut tensors = Vec::new();
        let prefixed = |group: &str, it: &mut dyn Iterator<Item = (&String, &Tensor)>| {
            it.map(|(n, t)| (format!("{group}/{n}"), t.clone())).collect::<Vec<_>>()
        };
        tensors.extend(prefixed("student", &mut student.iter()));
        tensors.extend(prefixed("teacher", &mut teacher.iter()));
        tensors.extend(prefixed("adam.m", &mut optimizer.m.iter()));
        tensors.extend(prefixed("adam.v", &mut optimizer.v.iter()));
        Checkpoint { step, config_hash, tensors }
    }

    fn group(&self, group: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{group}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    /// Splits back into student, teacher and optimizer state.
    pub fn into_state(&self, weight_decay: f64) -> (DetectorParams, DetectorParams, AdamW) {
        let student = DetectorParams::from_map(self.group("student"));
        let teacher = DetectorParams::from_map(self.group("teacher"));
        let optimizer = AdamW { weight_decay, t: self.step, m: self.group("adam.m"), v: self.group("adam.v") };
        (student, teacher, optimizer)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic, expected PSCK".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let step = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| "dimension overflows".to_string())?);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflows")?;
            let raw = r.take(n.checked_mul(4).ok_or("tensor size overflows")?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint { step, config_hash, tensors })
    }

    /// Shapes first, so a cross-config load names both shapes, then the
    /// config hash.
    pub fn validate(&self, cfg: &RunConfig) -> Result<()> {
        let det = cfg.detector_config();
        for group in GROUPS {
            DetectorParams::from_map(self.group(group))
                .check_config(&det)
                .map_err(|e| Error::Config(format!("{group}: {}", e.to_string().trim_start_matches("config error: "))))?;
        }
        let expected = GROUPS.len() * det.parameter_shapes().len();
        if self.tensors.len() != expected {
            return Err(Error::Config(format!("checkpoint holds {} tensors, expected {expected}", self.tensors.len())));
        }
        if self.config_hash != cfg.hash() {
            return Err(Error::Config(
                "checkpoint was written under a different configuration (config hash mismatch)".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

/// Reads and fully validates a checkpoint; nothing is returned on any
/// failure.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::decode(&bytes).map_err(|msg| Error::format(path, msg))?;
    ckpt.validate(cfg)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::init_pair;

    fn small() -> RunConfig {
        RunConfig { queries: 4, k_boxes: 4, d_model: 8, d_proj: 4, projector_hidden: 8, input_size: 16, grid: 4, ..RunConfig::default() }
    }

    fn ckpt(cfg: &RunConfig) -> Checkpoint {
        let (s, t) = init_pair(&cfg.detector_config(), 3).unwrap();
        let opt = AdamW::new(&s, cfg.weight_decay);
        Checkpoint::from_state(7, cfg.hash(), &s, &t, &opt)
    }

    #[test]
    fn round_trip_bytes() {
        let cfg = small();
        let c = ckpt(&cfg);
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        back.validate(&cfg).unwrap();
        let (s, _, opt) = back.into_state(0.0);
        assert_eq!(opt.t, 7);
        assert_eq!(s.len(), 15);
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = ckpt(&small()).encode();
        for cut in [3, 20, 60, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().contains("magic"));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(Checkpoint::decode(&v2).unwrap_err().contains("version"));
    }

    #[test]
    fn cross_config_names_both_shapes() {
        let c = ckpt(&small());
        let other = RunConfig { queries: 6, ..small() };
        let msg = c.validate(&other).unwrap_err().to_string();
        assert!(msg.contains("[4, 8]") && msg.contains("[6, 8]"), "{msg}");
    }

    #[test]
    fn hash_mismatch_rejected() {
        let c = ckpt(&small());
        let other = RunConfig { tau: 0.2, ..small() };
        assert!(matches!(c.validate(&other), Err(Error::Config(m)) if m.contains("hash")));
    }
}

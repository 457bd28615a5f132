//! Binary training checkpoints: student, teacher, optimizer state, and the
//! iteration counter, with a versioned header carrying the run-config hash
//! and the embedded model config.

use std::io::{Read, Write};
use std::path::Path;

use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"BSEGCK01";

#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub config_hash: u64,
    pub model_config: ModelConfig,
    pub iter: u64,
    pub seed: u64,
    pub student: Vec<S>,
    pub teacher: Vec<S>,
    pub velocity: Vec<S>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&self.config_hash.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.model_config).expect("config serializes");
        f.write_all(&(cfg.len() as u64).to_le_bytes())?;
        f.write_all(&cfg)?;
        f.write_all(&self.iter.to_le_bytes())?;
        f.write_all(&self.seed.to_le_bytes())?;
        for arr in [&self.student, &self.teacher, &self.velocity] {
            f.write_all(&(arr.len() as u64).to_le_bytes())?;
            for v in arr.iter() {
                f.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint<S>> {
        let mut f = std::fs::File::open(path).map_err(|e| {
            Error::Checkpoint(format!("{}: {e}", path.display()))
        })?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u64buf)?;
        let config_hash = u64::from_le_bytes(u64buf);
        f.read_exact(&mut u64buf)?;
        let cfg_len = u64::from_le_bytes(u64buf) as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        f.read_exact(&mut cfg_bytes)?;
        let model_config: ModelConfig = serde_json::from_slice(&cfg_bytes).map_err(|e| {
            Error::Checkpoint(format!("{}: bad embedded config: {e}", path.display()))
        })?;
        f.read_exact(&mut u64buf)?;
        let iter = u64::from_le_bytes(u64buf);
        f.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);
        let read_array = |f: &mut std::fs::File| -> Result<Vec<S>> {
            let mut len8 = [0u8; 8];
            f.read_exact(&mut len8)?;
            let n = u64::from_le_bytes(len8) as usize;
            let mut out = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                f.read_exact(&mut buf)?;
                out.push(S::of(f64::from_le_bytes(buf)));
            }
            Ok(out)
        };
        let student = read_array(&mut f)?;
        let teacher = read_array(&mut f)?;
        let velocity = read_array(&mut f)?;
        Ok(Checkpoint {
            config_hash,
            model_config,
            iter,
            seed,
            student,
            teacher,
            velocity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = Checkpoint::<f32> {
            config_hash: 0xDEAD_BEEF,
            model_config: ModelConfig::default(),
            iter: 123,
            seed: 9,
            student: vec![1.0, -2.5, 0.125],
            teacher: vec![0.5, 0.25, -0.75],
            velocity: vec![0.0, 0.1, 0.2],
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back.config_hash, ck.config_hash);
        assert_eq!(back.iter, 123);
        assert_eq!(back.student, ck.student);
        assert_eq!(back.teacher, ck.teacher);
        assert_eq!(back.velocity, ck.velocity);
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::<f32>::load(&path).is_err());
    }
}

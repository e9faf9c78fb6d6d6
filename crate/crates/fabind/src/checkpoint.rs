//! Checkpoint file format: magic `FABK1`, a key=value config block, the
//! named parameter table with little-endian f64 payloads, and optional
//! optimizer state. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::model::{parse_config, render_config, FabindModel, ModelConfig};
use crate::nn::{AdamW, ParamStore};

const MAGIC: &[u8; 5] = b"FABK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("`{path}` is not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("checkpoint `{path}` is truncated or corrupt: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("checkpoint config invalid: {0}")]
    BadConfig(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// Optimizer state carried alongside the parameters.
pub struct OptimizerState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt {
                path: self.path.to_string(),
                detail: format!("need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode(cfg: &ModelConfig, store: &ParamStore, opt: Option<(&AdamW, u64)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_bytes(&mut out, render_config(cfg).as_bytes());
    put_u32(&mut out, store.len() as u32);
    for (name, t) in store.iter() {
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.rows() as u32);
        put_u32(&mut out, t.cols() as u32);
        put_f64s(&mut out, &t.to_vec());
    }
    match opt {
        Some((adam, step)) => {
            out.push(1);
            put_u64(&mut out, step);
            let (m, v) = adam.moments();
            for (mi, vi) in m.iter().zip(v) {
                put_f64s(&mut out, mi);
                put_f64s(&mut out, vi);
            }
        }
        None => out.push(0),
    }
    out
}

pub struct LoadedCheckpoint {
    pub cfg: ModelConfig,
    pub params: Vec<(String, usize, usize, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

pub fn decode(buf: &[u8], path: &str) -> Result<LoadedCheckpoint, CheckpointError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_string() });
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
        path,
    };
    let cfg_text = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| CheckpointError::Corrupt {
        path: path.to_string(),
        detail: e.to_string(),
    })?;
    let cfg = parse_config(&cfg_text, ModelConfig::full_scale()).map_err(CheckpointError::BadConfig)?;
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| CheckpointError::Corrupt {
            path: path.to_string(),
            detail: e.to_string(),
        })?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let vals = r.f64s(rows * cols)?;
        params.push((name, rows, cols, vals));
    }
    let has_opt = r.take(1)?[0];
    let optimizer = if has_opt == 1 {
        let step_count = r.u64()?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (_, rows, cols, _) in &params {
            m.push(r.f64s(rows * cols)?);
            v.push(r.f64s(rows * cols)?);
        }
        Some(OptimizerState { step_count, m, v })
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt {
            path: path.to_string(),
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(LoadedCheckpoint { cfg, params, optimizer })
}

pub fn save(
    path: &Path,
    cfg: &ModelConfig,
    store: &ParamStore,
    opt: Option<(&AdamW, u64)>,
) -> Result<(), CheckpointError> {
    let bytes = encode(cfg, store, opt);
    let mut f = fs::File::create(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load a checkpoint and rebuild the full model from it. Optimizer state,
/// if present, is returned for the trainer to resume from.
pub fn load_model(path: &Path) -> Result<(FabindModel, Option<OptimizerState>), CheckpointError> {
    let buf = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let loaded = decode(&buf, &path.display().to_string())?;
    let model = FabindModel::new(loaded.cfg, 0);
    if model.store.len() != loaded.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} parameters in file, model has {}",
            loaded.params.len(),
            model.store.len()
        )));
    }
    for ((name, rows, cols, vals), (mname, t)) in loaded.params.into_iter().zip(model.store.iter()) {
        if name != mname || rows != t.rows() || cols != t.cols() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter `{name}` ({rows}x{cols}) does not match model `{mname}` ({}x{})",
                t.rows(),
                t.cols()
            )));
        }
        t.set_values(vals);
    }
    Ok((model, loaded.optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::toy();
        let model = FabindModel::new(cfg, 7);
        let bytes = encode(&cfg, &model.store, None);
        let loaded = decode(&bytes, "mem").unwrap();
        assert_eq!(loaded.params.len(), model.store.len());
        for ((name, rows, cols, vals), (mname, t)) in loaded.params.iter().zip(model.store.iter()) {
            assert_eq!(name, mname);
            assert_eq!((*rows, *cols), (t.rows(), t.cols()));
            let orig = t.to_vec();
            for (a, b) in vals.iter().zip(&orig) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // re-encoding the decoded state reproduces the exact bytes
        let model2 = FabindModel::new(cfg, 999);
        for ((_, _, _, vals), (_, t)) in loaded.params.iter().zip(model2.store.iter()) {
            t.set_values(vals.clone());
        }
        let bytes2 = encode(&loaded.cfg, &model2.store, None);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let cfg = ModelConfig::toy();
        let model = FabindModel::new(cfg, 3);
        let mut opt = AdamW::new(&model.store, 1e-3, 1e-2);
        // drive one real step so the moments are nonzero
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let lig = crate::model::tests::toy_ligand(&mut r, 3);
        let prot = crate::model::tests::toy_protein(&mut r, 4);
        model.store.zero_grad();
        let pred = crate::pocket::predict_pocket(&model.pocket, &cfg, &lig, &prot, &mut r);
        crate::pocket::classification_loss(&pred.probs_tensor, &vec![true; 4])
            .backward()
            .unwrap();
        // docking params got no gradient this step; zero-fill them
        for (_, p) in model.store.iter() {
            if p.grad().is_none() {
                p.scale(0.0).sum().backward().unwrap();
            }
        }
        opt.step(&model.store).unwrap();

        let bytes = encode(&cfg, &model.store, Some((&opt, opt.step_count)));
        let loaded = decode(&bytes, "mem").unwrap();
        let state = loaded.optimizer.unwrap();
        assert_eq!(state.step_count, 1);
        let (m, v) = opt.moments();
        assert_eq!(state.m, m);
        assert_eq!(state.v, v);
    }

    #[test]
    fn bad_magic_and_truncation_are_reported() {
        assert!(matches!(
            decode(b"NOPE!", "x"),
            Err(CheckpointError::BadMagic { .. })
        ));
        let cfg = ModelConfig::toy();
        let model = FabindModel::new(cfg, 7);
        let bytes = encode(&cfg, &model.store, None);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], "x"),
            Err(CheckpointError::Corrupt { .. })
        ));
    }

    #[test]
    fn save_and_load_model_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fabk");
        let cfg = ModelConfig::toy();
        let model = FabindModel::new(cfg, 11);
        save(&path, &cfg, &model.store, None).unwrap();
        let (loaded, opt) = load_model(&path).unwrap();
        assert!(opt.is_none());
        for ((_, a), (_, b)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
        assert!(matches!(
            load_model(&dir.path().join("missing.fabk")),
            Err(CheckpointError::Io { .. })
        ));
    }
}

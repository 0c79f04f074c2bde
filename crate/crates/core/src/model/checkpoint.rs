//! Versioned binary checkpoints.
//!
//! Layout: magic + version, config as key=value text, trainer step,
//! optimizer moments and step, full RNG state and the schedule, then the
//! parameter tensors (name, shape, row-major little-endian f32 data).
//! A resumed run continues bit-identically.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{Layout, ModelConfig, OneCycle};
use crate::tokens::Vocab;

const MAGIC: &[u8; 4] = b"CNTK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed checkpoint {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub adam_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub schedule: OneCycle,
    pub params: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

fn config_to_text(c: &ModelConfig) -> String {
    let widths: Vec<String> = c.embed_widths.iter().map(|w| w.to_string()).collect();
    let padded: Vec<String> = c.vocab.padded.iter().map(|p| p.to_string()).collect();
    format!(
        "layers={}\nheads={}\nd_model={}\nd_ff={}\ndropout={}\nembed_widths={}\n\
         vocab_padded={}\nbar_mod={}\nmax_seq={}\nseed={}\n",
        c.layers,
        c.heads,
        c.d_model,
        c.d_ff,
        c.dropout,
        widths.join(","),
        padded.join(","),
        c.vocab.bar_mod.map(|m| m.to_string()).unwrap_or_else(|| "none".into()),
        c.max_seq,
        c.seed,
    )
}

fn config_from_text(text: &str) -> Result<ModelConfig, String> {
    let mut c = ModelConfig::default();
    let get_list = |v: &str| -> Result<Vec<usize>, String> {
        v.split(',').map(|x| x.parse().map_err(|_| format!("bad list item {x}"))).collect()
    };
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else { continue };
        match key {
            "layers" => c.layers = value.parse().map_err(|_| "bad layers")?,
            "heads" => c.heads = value.parse().map_err(|_| "bad heads")?,
            "d_model" => c.d_model = value.parse().map_err(|_| "bad d_model")?,
            "d_ff" => c.d_ff = value.parse().map_err(|_| "bad d_ff")?,
            "dropout" => c.dropout = value.parse().map_err(|_| "bad dropout")?,
            "embed_widths" => {
                let v = get_list(value)?;
                c.embed_widths = v.try_into().map_err(|_| "need 5 widths")?;
            }
            "vocab_padded" => {
                let v = get_list(value)?;
                let padded: [usize; 5] = v.try_into().map_err(|_| "need 5 sizes")?;
                c.vocab = Vocab { padded, ..c.vocab };
            }
            "bar_mod" => {
                c.vocab.bar_mod = match value {
                    "none" => None,
                    v => Some(v.parse().map_err(|_| "bad bar_mod")?),
                };
            }
            "max_seq" => c.max_seq = value.parse().map_err(|_| "bad max_seq")?,
            "seed" => c.seed = value.parse().map_err(|_| "bad seed")?,
            _ => {}
        }
    }
    Ok(c)
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }

    fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.u64(b.len() as u64)?;
        self.out.write_all(b)
    }

    fn floats(&mut self, v: &[f32]) -> io::Result<()> {
        self.u64(v.len() as u64)?;
        let mut buf = Vec::with_capacity(v.len() * 4);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.out.write_all(&buf)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let layout = Layout::new(&ck.config);
    let file = fs::File::create(path).map_err(err)?;
    let mut w = Writer { out: io::BufWriter::new(file) };
    (|| -> io::Result<()> {
        w.out.write_all(MAGIC)?;
        w.u32(VERSION)?;
        w.bytes(config_to_text(&ck.config).as_bytes())?;
        w.u64(ck.step)?;
        w.u64(ck.adam_step)?;
        w.out.write_all(&ck.rng_seed)?;
        w.out.write_all(&ck.rng_word_pos.to_le_bytes())?;
        w.f64(ck.schedule.peak)?;
        w.u64(ck.schedule.warmup)?;
        w.u64(ck.schedule.total)?;
        w.u64(ck.schedule.start)?;
        w.u64(layout.specs.len() as u64)?;
        for spec in &layout.specs {
            w.bytes(spec.name.as_bytes())?;
            w.u64(spec.rows as u64)?;
            w.u64(spec.cols as u64)?;
            w.floats(&ck.params[spec.offset..spec.offset + spec.len()])?;
        }
        w.floats(&ck.adam_m)?;
        w.floats(&ck.adam_v)?;
        w.out.flush()
    })()
    .map_err(err)
}

struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> io::Result<u32> {
        let mut b = [0u8; 4];
        self.inp.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> io::Result<u64> {
        let mut b = [0u8; 8];
        self.inp.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> io::Result<f64> {
        let mut b = [0u8; 8];
        self.inp.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn bytes(&mut self) -> io::Result<Vec<u8>> {
        let len = self.u64()? as usize;
        let mut b = vec![0u8; len];
        self.inp.read_exact(&mut b)?;
        Ok(b)
    }

    fn floats(&mut self) -> io::Result<Vec<f32>> {
        let len = self.u64()? as usize;
        let mut bytes = vec![0u8; len * 4];
        self.inp.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let bad = |reason: &str| CheckpointError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut r = Reader { inp: io::BufReader::new(file) };

    let mut magic = [0u8; 4];
    r.inp.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u32().map_err(io_err)? != VERSION {
        return Err(bad("unsupported version"));
    }
    let config_text = String::from_utf8(r.bytes().map_err(io_err)?)
        .map_err(|_| bad("config is not utf-8"))?;
    let config = config_from_text(&config_text).map_err(|e| bad(&e))?;
    let layout = Layout::new(&config);

    let step = r.u64().map_err(io_err)?;
    let adam_step = r.u64().map_err(io_err)?;
    let mut rng_seed = [0u8; 32];
    r.inp.read_exact(&mut rng_seed).map_err(io_err)?;
    let mut wp = [0u8; 16];
    r.inp.read_exact(&mut wp).map_err(io_err)?;
    let rng_word_pos = u128::from_le_bytes(wp);
    let schedule = OneCycle {
        peak: r.f64().map_err(io_err)?,
        warmup: r.u64().map_err(io_err)?,
        total: r.u64().map_err(io_err)?,
        start: r.u64().map_err(io_err)?,
    };

    let n_tensors = r.u64().map_err(io_err)? as usize;
    if n_tensors != layout.specs.len() {
        return Err(bad("tensor count does not match config"));
    }
    let mut params = vec![0f32; layout.total];
    for spec in &layout.specs {
        let name = String::from_utf8(r.bytes().map_err(io_err)?)
            .map_err(|_| bad("tensor name is not utf-8"))?;
        if name != spec.name {
            return Err(bad(&format!("tensor order mismatch: {name} vs {}", spec.name)));
        }
        let rows = r.u64().map_err(io_err)? as usize;
        let cols = r.u64().map_err(io_err)? as usize;
        if rows != spec.rows || cols != spec.cols {
            return Err(bad(&format!("tensor {name} has shape {rows}x{cols}")));
        }
        let data = r.floats().map_err(io_err)?;
        if data.len() != spec.len() {
            return Err(bad(&format!("tensor {name} data truncated")));
        }
        params[spec.offset..spec.offset + spec.len()].copy_from_slice(&data);
    }
    let adam_m = r.floats().map_err(io_err)?;
    let adam_v = r.floats().map_err(io_err)?;
    if adam_m.len() != layout.total || adam_v.len() != layout.total {
        return Err(bad("optimizer state does not match parameter count"));
    }

    Ok(Checkpoint {
        config,
        step,
        adam_step,
        rng_seed,
        rng_word_pos,
        schedule,
        params,
        adam_m,
        adam_v,
    })
}

/// Stable hash of a checkpoint file, for manifests.
pub fn checkpoint_hash(path: &Path) -> Result<u64, CheckpointError> {
    let bytes = fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Ok(crate::stablehash::hash_bytes(0xc4ec, &bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn round_trip_is_exact() {
        let config = ModelConfig { layers: 1, heads: 2, d_model: 8, d_ff: 16, ..ModelConfig::desk() };
        let layout = Layout::new(&config);
        let params: Vec<f32> = init_params(&config, &layout);
        let ck = Checkpoint {
            config: config.clone(),
            step: 42,
            adam_step: 42,
            rng_seed: [7u8; 32],
            rng_word_pos: 123456789,
            schedule: OneCycle { peak: 5e-4, warmup: 10, total: 100, start: 0 },
            adam_m: vec![0.25; layout.total],
            adam_v: vec![0.5; layout.total],
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ck);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Malformed { .. })));
    }
}

//! Training state and its on-disk container.
//!
//! Layout of a `.ckpt` file, all integers little-endian:
//!
//! ```text
//! magic "J4RCKPT\0" | version u32 | section count u32
//! per section: name length u16 | name | offset u64 | length u64
//! section payloads
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! The `meta` section is JSON; `context`, `target`, `adam.m` and `adam.v`
//! hold tensors as `count u32`, then per tensor `name length u16 | name |
//! rows u64 | cols u64 | f64 data`. A `<file>.json` sidecar mirrors the
//! configuration for humans.

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"J4RCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub stopped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub holdout_loss: Option<f64>,
}

/// Everything needed to continue training bit-identically. Random streams
/// are derived from `train_config.seed` and the epoch counter, so those two
/// fields are the whole generator state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: TrainConfig,
    pub vocab_hash: String,
    pub stage: Stage,
    /// Completed epochs of the current stage.
    pub epoch: usize,
    pub context: ParamStore,
    pub target: ParamStore,
    pub optimizer: Adam,
    pub early_stop: EarlyStop,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    vocab_hash: String,
    stage: Stage,
    epoch: usize,
    learning_rate: f64,
    optimizer_steps: u64,
    early_stop: EarlyStop,
    history: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    vocab_hash: &'a str,
    stage: Stage,
    epoch: usize,
    num_parameters: usize,
    sha256: String,
}

impl Checkpoint {
    /// Fresh parameters; the target starts as a copy of the context.
    pub fn new(model_config: ModelConfig, train_config: TrainConfig, vocab_hash: impl Into<String>) -> Result<Self> {
        let (model, context) = Model::init(model_config, train_config.seed)?;
        let optimizer = Adam::new(&context, train_config.learning_rate);
        Ok(Self {
            model,
            target: context.clone(),
            context,
            optimizer,
            train_config,
            vocab_hash: vocab_hash.into(),
            stage: Stage::Pretrain,
            epoch: 0,
            early_stop: EarlyStop::default(),
            history: Vec::new(),
        })
    }

    pub fn check_vocab(&self, expected: &str) -> Result<()> {
        if self.vocab_hash != expected {
            return Err(Error::VocabMismatch { expected: expected.into(), found: self.vocab_hash.clone() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (m, v) = self.optimizer.moments();
        let meta = Meta {
            model: self.model.config.clone(),
            train: self.train_config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            stage: self.stage,
            epoch: self.epoch,
            learning_rate: self.optimizer.learning_rate,
            optimizer_steps: self.optimizer.steps(),
            early_stop: self.early_stop.clone(),
            history: self.history.clone(),
        };
        let names: Vec<&str> = self.context.iter().map(|(n, _)| n).collect();
        let sections: Vec<(&str, Vec<u8>)> = vec![
            ("meta", serde_json::to_vec(&meta)?),
            ("context", encode_tensors(self.context.iter())),
            ("target", encode_tensors(self.target.iter())),
            ("adam.m", encode_tensors(names.iter().copied().zip(m))),
            ("adam.v", encode_tensors(names.iter().copied().zip(v))),
        ];

        let header_len: usize = 16 + sections.iter().map(|(n, _)| 2 + n.len() + 16).sum::<usize>();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(sections.len() as u32)?;
        let mut offset = header_len as u64;
        for (name, payload) in &sections {
            out.write_u16::<LittleEndian>(name.len() as u16)?;
            out.extend_from_slice(name.as_bytes());
            out.write_u64::<LittleEndian>(offset)?;
            out.write_u64::<LittleEndian>(payload.len() as u64)?;
            offset += payload.len() as u64;
        }
        for (_, payload) in &sections {
            out.extend_from_slice(payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |section: &str, reason: String| Error::Checkpoint { section: section.into(), reason };
        if bytes.len() < 16 + 32 {
            return Err(corrupt("header", format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum", "SHA-256 does not match contents".into()));
        }
        let table = read_table(body).map_err(|e| corrupt("header", e))?;
        let section = |name: &str| -> Result<&[u8]> {
            let (_, off, len) = table
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| corrupt(name, "section missing".into()))?;
            body.get(*off..*off + *len).ok_or_else(|| corrupt(name, "section extends past end of file".into()))
        };

        let meta: Meta = serde_json::from_slice(section("meta")?).map_err(|e| corrupt("meta", e.to_string()))?;
        let context = decode_store(section("context")?).map_err(|e| corrupt("context", e))?;
        let target = decode_store(section("target")?).map_err(|e| corrupt("target", e))?;
        let m = decode_store(section("adam.m")?).map_err(|e| corrupt("adam.m", e))?;
        let v = decode_store(section("adam.v")?).map_err(|e| corrupt("adam.v", e))?;
        let model = Model::from_store(meta.model, &context).map_err(|e| corrupt("context", e.to_string()))?;
        target.check_same_structure(&context).map_err(|e| corrupt("target", e.to_string()))?;
        m.check_same_structure(&context).map_err(|e| corrupt("adam.m", e.to_string()))?;
        v.check_same_structure(&context).map_err(|e| corrupt("adam.v", e.to_string()))?;
        let tensors = |s: ParamStore| s.iter().map(|(_, t)| t.clone()).collect();
        let optimizer = Adam::from_parts(meta.learning_rate, meta.optimizer_steps, tensors(m), tensors(v));
        Ok(Self {
            model,
            train_config: meta.train,
            vocab_hash: meta.vocab_hash,
            stage: meta.stage,
            epoch: meta.epoch,
            context,
            target,
            optimizer,
            early_stop: meta.early_stop,
            history: meta.history,
        })
    }

    /// Writes `path` and its `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &bytes)?;
        let sidecar = Sidecar {
            model: &self.model.config,
            train: &self.train_config,
            vocab_hash: &self.vocab_hash,
            stage: self.stage,
            epoch: self.epoch,
            num_parameters: self.context.num_scalars(),
            sha256: crate::corpus::hex_digest(&Sha256::digest(&bytes)),
        };
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    /// Reads a checkpoint without checking its vocabulary.
    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Reads a checkpoint and refuses it unless it was trained with the
    /// vocabulary whose hash is `vocab_hash`.
    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        let ckpt = Self::read(path)?;
        ckpt.check_vocab(vocab_hash)?;
        Ok(ckpt)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode_tensors<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.collect();
    let mut out = Vec::new();
    out.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for (name, t) in tensors {
        out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u64::<LittleEndian>(t.rows() as u64).unwrap();
        out.write_u64::<LittleEndian>(t.cols() as u64).unwrap();
        for &x in t.data() {
            out.write_f64::<LittleEndian>(x).unwrap();
        }
    }
    out
}

fn read_name(cur: &mut Cursor<&[u8]>) -> std::result::Result<String, String> {
    let len = cur.read_u16::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).map_err(|e| e.to_string())?;
    String::from_utf8(buf).map_err(|e| e.to_string())
}

fn read_table(body: &[u8]) -> std::result::Result<Vec<(String, usize, usize)>, String> {
    if &body[..8] != MAGIC {
        return Err("not a checkpoint file (bad magic)".into());
    }
    let mut cur = Cursor::new(&body[8..]);
    let version = cur.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = cur.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
    let mut table = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = read_name(&mut cur)?;
        let off = cur.read_u64::<LittleEndian>().map_err(|e| e.to_string())? as usize;
        let len = cur.read_u64::<LittleEndian>().map_err(|e| e.to_string())? as usize;
        table.push((name, off, len));
    }
    Ok(table)
}

fn decode_store(bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut cur = Cursor::new(bytes);
    let n = cur.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..n {
        let name = read_name(&mut cur)?;
        let rows = cur.read_u64::<LittleEndian>().map_err(|e| e.to_string())? as usize;
        let cols = cur.read_u64::<LittleEndian>().map_err(|e| e.to_string())? as usize;
        let len = rows.checked_mul(cols).filter(|&l| l * 8 <= bytes.len()).ok_or(format!("tensor {name} has implausible shape {rows}x{cols}"))?;
        let mut data = vec![0.0; len];
        cur.read_f64_into::<LittleEndian>(&mut data).map_err(|e| format!("tensor {name}: {e}"))?;
        names.push(name);
        tensors.push(Tensor::from_vec(rows, cols, data));
    }
    if cur.position() as usize != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.position() as usize));
    }
    Ok(ParamStore::from_parts(names, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, window: 2, max_tokens: 32, max_items: 5, ..Default::default() };
        Checkpoint::new(cfg, TrainConfig::pretrain(), "abc").unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut c = small();
        c.history.push(EpochRecord { stage: Stage::Pretrain, epoch: 0, loss: 0.1 + 0.2, holdout_loss: Some(1.0 / 3.0) });
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn target_starts_as_context_copy() {
        let c = small();
        assert_eq!(c.context, c.target);
    }

    #[test]
    fn corruption_names_the_section() {
        let c = small();
        let mut bytes = c.to_bytes().unwrap();
        bytes[20] ^= 1;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint { section, .. }) => assert_eq!(section, "checksum"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Checkpoint::from_bytes(&[0; 10]), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn bad_section_payload_is_reported() {
        let c = small();
        let mut bytes = c.to_bytes().unwrap();
        let body_len = bytes.len() - 32;
        let table = read_table(&bytes[..body_len]).unwrap();
        let (_, off, _) = table.iter().find(|(n, _, _)| n == "meta").unwrap();
        bytes[*off] = b'#';
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Checkpoint { section, .. }) => assert_eq!(section, "meta"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        small().save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert!(Checkpoint::load(&path, "abc").is_ok());
        assert!(matches!(Checkpoint::load(&path, "xyz"), Err(Error::VocabMismatch { .. })));
    }
}

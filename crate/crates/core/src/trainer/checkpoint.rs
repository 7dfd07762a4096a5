use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Array, ParamStore};
use crate::error::{Error, Result};
use crate::lm::Vocab;
use crate::stack::{Model, StackConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
const FORMAT: &str = "align3d-checkpoint/1";

/// A model with its training stage and a free-form snapshot of the run
/// configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub model: Model<f32>,
    pub snapshot: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    stage: u8,
    config: StackConfig,
    snapshot: serde_json::Value,
    blob_bytes: u64,
    blob_sha256: String,
    params: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
    frozen: bool,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut blob = Vec::with_capacity(self.model.params.numel() * 4);
        let mut params = Vec::with_capacity(self.model.params.len());
        for p in self.model.params.iter() {
            params.push(Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: blob.len() as u64,
                trainable: p.trainable,
                frozen: p.frozen,
            });
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            stage: self.stage,
            config: self.model.cfg.clone(),
            snapshot: self.snapshot.clone(),
            blob_bytes: blob.len() as u64,
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            params,
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(Error::io(&blob_path))?;
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&mpath, text).map_err(Error::io(&mpath))?;
        self.model.vocab.save(&dir.join(VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(Error::io(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(ckpt_err(format!("unsupported format `{}`", manifest.format)));
        }
        if !(manifest.stage == 1 || manifest.stage == 2) {
            return Err(ckpt_err(format!("unknown stage {}", manifest.stage)));
        }
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != manifest.config.lm.vocab {
            return Err(ckpt_err(format!(
                "vocabulary has {} tokens, config expects {}",
                vocab.len(),
                manifest.config.lm.vocab
            )));
        }
        let reference = Model::<f32>::init(&manifest.config, 0)?;
        let mut expected = 0u64;
        for e in &manifest.params {
            if e.offset != expected {
                return Err(ckpt_err(format!("`{}` has offset {}, expected {expected}", e.name, e.offset)));
            }
            if let Ok(r) = reference.params.value(&e.name) {
                if r.shape() != e.shape.as_slice() {
                    return Err(ckpt_err(format!(
                        "`{}` has shape {:?}, config implies {:?}",
                        e.name,
                        e.shape,
                        r.shape()
                    )));
                }
            }
            expected += 4 * e.shape.iter().product::<usize>() as u64;
        }
        if let Some(missing) = reference
            .params
            .names()
            .find(|n| !manifest.params.iter().any(|e| e.name == *n))
        {
            return Err(ckpt_err(format!("`{missing}` is missing")));
        }
        if expected != manifest.blob_bytes {
            return Err(ckpt_err(format!(
                "manifest entries cover {expected} bytes, blob size recorded as {}",
                manifest.blob_bytes
            )));
        }

        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(Error::io(&bpath))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(ckpt_err(format!(
                "{BLOB_FILE} is {} bytes, expected {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(ckpt_err(format!("{BLOB_FILE} hash mismatch")));
        }
        let mut params = ParamStore::new();
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let data = blob[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = Array::new(&e.shape, data).map_err(|_| ckpt_err(format!("`{}` has a bad shape", e.name)))?;
            params.insert(e.name.clone(), value, e.trainable)?;
            params.get_mut(&e.name)?.frozen = e.frozen;
        }
        Ok(Self {
            stage: manifest.stage,
            model: Model {
                cfg: manifest.config,
                vocab,
                params,
            },
            snapshot: manifest.snapshot,
        })
    }
}

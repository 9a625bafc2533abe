//! Checkpoint file format: textual header followed by length-prefixed
//! named tensor records of little-endian doubles. Round-trips bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::write_atomic;
use crate::tensor::{ParamStore, Tensor};

pub const CKPT_MAGIC: &str = "FSPFM-CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    fn parse(s: &str) -> Result<Stage> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Format(format!("unknown checkpoint stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config_digest: String,
    pub seed: u64,
    pub epoch: usize,
    pub fspfm_enabled: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "{CKPT_MAGIC}");
        let _ = writeln!(header, "version {CKPT_VERSION}");
        let _ = writeln!(header, "stage {}", self.meta.stage.as_str());
        let _ = writeln!(header, "config_digest {}", self.meta.config_digest);
        let _ = writeln!(header, "seed {}", self.meta.seed);
        let _ = writeln!(header, "epoch {}", self.meta.epoch);
        let _ = writeln!(header, "fspfm_enabled {}", self.meta.fspfm_enabled);
        let _ = writeln!(header, "tensors {}", self.store.len());
        let _ = writeln!(header, "end");
        let mut buf = header.into_bytes();
        for (name, entry) in self.store.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(entry.frozen as u8);
            buf.extend_from_slice(&(entry.value.shape().len() as u32).to_le_bytes());
            for &e in entry.value.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in entry.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut offset = 0usize;
        let next_line = |offset: &mut usize| -> Result<String> {
            let nl = bytes[*offset..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("truncated: checkpoint header".into()))?;
            let line = std::str::from_utf8(&bytes[*offset..*offset + nl])
                .map_err(|_| Error::Format("checkpoint header is not utf-8".into()))?
                .to_string();
            *offset += nl + 1;
            Ok(line)
        };
        if next_line(&mut offset)? != CKPT_MAGIC {
            return Err(Error::Format("bad magic: not a checkpoint file".into()));
        }
        let mut kv = std::collections::HashMap::new();
        loop {
            let line = next_line(&mut offset)?;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad header line '{line}'")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| -> Result<String> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint header missing {k}")))
        };
        let version: u32 = field("version")?
            .parse()
            .map_err(|_| Error::Format("bad version field".into()))?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "version mismatch: file has {version}, expected {CKPT_VERSION}"
            )));
        }
        let meta = CheckpointMeta {
            stage: Stage::parse(&field("stage")?)?,
            config_digest: field("config_digest")?,
            seed: field("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?,
            epoch: field("epoch")?.parse().map_err(|_| Error::Format("bad epoch".into()))?,
            fspfm_enabled: field("fspfm_enabled")?
                .parse()
                .map_err(|_| Error::Format("bad fspfm_enabled".into()))?,
        };
        let count: usize = field("tensors")?
            .parse()
            .map_err(|_| Error::Format("bad tensors field".into()))?;
        let mut store = ParamStore::new();
        let take = |offset: &mut usize, n: usize| -> Result<&[u8]> {
            if *offset + n > bytes.len() {
                return Err(Error::Format("truncated: tensor records end early".into()));
            }
            let s = &bytes[*offset..*offset + n];
            *offset += n;
            Ok(s)
        };
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut offset, name_len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let frozen = take(&mut offset, 1)?[0] != 0;
            let ndim = u32::from_le_bytes(take(&mut offset, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut offset, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut offset, 8)?.try_into().unwrap()));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
            if frozen {
                store.set_frozen_prefix(&name, true);
            }
        }
        if offset != bytes.len() {
            return Err(Error::Format("trailing bytes after tensor records".into()));
        }
        Ok(Checkpoint { meta, store })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Dependency(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Validate that a named tensor exists with the expected shape;
    /// the error names the offending tensor.
    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<()> {
        let entry = self
            .store
            .get(name)
            .map_err(|_| Error::Format(format!("name mismatch: checkpoint lacks tensor '{name}'")))?;
        if entry.value.shape() != shape {
            return Err(Error::Shape(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                entry.value.shape()
            )));
        }
        Ok(())
    }
}

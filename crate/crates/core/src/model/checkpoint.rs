//! Checkpoint container, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MMKDCKPT"
//! version  u32
//! dtype    u8       0 = f64, 1 = f32
//! config   u32 length + JSON ModelConfig
//! count    u32
//! count x { name: u32 length + UTF-8 "group/name",
//!           rank: u8, dims: rank x u32, data: numel scalars }
//! ```
//!
//! Tensors appear group by group (visual_encoder, projector, llm) in
//! parameter order, so a load followed by a save reproduces the file
//! byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use super::encoder::VisualEncoder;
use super::mllm::MultimodalModel;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, GroupKind, ParameterGroup, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMKDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Header and tensor directory of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    pub tensors: Vec<TensorInfo>,
}

impl CheckpointInfo {
    pub fn num_scalars(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r)?))
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    String::from_utf8(buf).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Checkpoint("string too long".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(DType, ModelConfig, u32)> {
    if &read_bytes::<8>(r)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let found = read_u32(r)?;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found,
        });
    }
    let [tag] = read_bytes::<1>(r)?;
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
    let config: ModelConfig = serde_json::from_str(&read_string(r, "config")?)?;
    let count = read_u32(r)?;
    Ok((dtype, config, count))
}

fn read_entry_header(r: &mut impl Read) -> Result<TensorInfo> {
    let name = read_string(r, "tensor name")?;
    let [rank] = read_bytes::<1>(r)?;
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<_>>()?;
    Ok(TensorInfo { name, shape })
}

fn split_name(name: &str) -> Result<(GroupKind, &str)> {
    let (group, local) = name
        .split_once('/')
        .ok_or_else(|| Error::Checkpoint(format!("tensor name {name:?} has no group")))?;
    let kind = group
        .parse()
        .map_err(|_| Error::Checkpoint(format!("unknown group in {name:?}")))?;
    Ok((kind, local))
}

/// Reads only the header and tensor directory.
pub fn inspect(mut r: impl Read) -> Result<CheckpointInfo> {
    let (dtype, config, count) = read_header(&mut r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let info = read_entry_header(&mut r)?;
        let bytes = info.shape.iter().product::<usize>() * dtype.size_of();
        let skipped = std::io::copy(&mut (&mut r).take(bytes as u64), &mut std::io::sink())?;
        if skipped != bytes as u64 {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        tensors.push(info);
    }
    Ok(CheckpointInfo {
        version: CHECKPOINT_VERSION,
        dtype,
        config,
        tensors,
    })
}

impl<S: Scalar> MultimodalModel<S> {
    pub fn save(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[S::DTYPE.tag()])?;
        write_string(&mut w, &serde_json::to_string(self.config())?)?;
        let count: usize = GroupKind::ALL.iter().map(|&k| self.group(k).len()).sum();
        w.write_all(&(count as u32).to_le_bytes())?;
        for kind in GroupKind::ALL {
            let group = self.group(kind);
            for (name, t) in group.iter() {
                write_string(&mut w, &format!("{}/{name}", group.name()))?;
                w.write_all(&[t.shape().len() as u8])?;
                for &d in t.shape() {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                let mut buf = Vec::with_capacity(t.numel() * S::DTYPE.size_of());
                for &x in t.data() {
                    x.write_le(&mut buf);
                }
                w.write_all(&buf)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save(BufWriter::new(File::create(path)?))
    }

    /// Loads a model with every group frozen. When `shared` is given its
    /// parameters must match the stored encoder bit for bit, and the
    /// returned model points at it.
    pub fn load(mut r: impl Read, shared: Option<Arc<VisualEncoder<S>>>) -> Result<Self> {
        let (dtype, config, count) = read_header(&mut r)?;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {dtype}, expected {}",
                S::DTYPE
            )));
        }
        let mut groups = GroupKind::ALL.map(ParameterGroup::<S>::new);
        let mut last = 0;
        for _ in 0..count {
            let info = read_entry_header(&mut r)?;
            let (kind, local) = split_name(&info.name)?;
            let slot = GroupKind::ALL
                .iter()
                .position(|&k| k == kind)
                .expect("listed");
            if slot < last {
                return Err(Error::Checkpoint(format!(
                    "{} is out of group order",
                    info.name
                )));
            }
            last = slot;
            let n: usize = info.shape.iter().product();
            let mut buf = vec![0u8; n * S::DTYPE.size_of()];
            r.read_exact(&mut buf).map_err(truncated)?;
            let data = buf
                .chunks_exact(S::DTYPE.size_of())
                .map(S::read_le)
                .collect();
            groups[slot].push(local, Tensor::new(info.shape, data)?)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint(
                "trailing bytes after the last tensor".into(),
            ));
        }
        let [enc, proj, llm] = groups;
        let encoder = match shared {
            Some(e) if e.params().bit_eq(&enc) && e.config() == &config.encoder => e,
            Some(_) => {
                return Err(Error::Checkpoint(
                    "stored encoder differs from the shared one".into(),
                ))
            }
            None => Arc::new(VisualEncoder::from_params(&config.encoder, enc)?),
        };
        MultimodalModel::from_parts(&config, encoder, proj, llm)
    }

    pub fn load_path(
        path: impl AsRef<Path>,
        shared: Option<Arc<VisualEncoder<S>>>,
    ) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?), shared)
    }
}

//! Binary checkpoints: `HZCK`, a format version, a length-prefixed JSON
//! header, then parameters and both Adam moments as little-endian floats of
//! the header's dtype.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Adam, AdamConfig, ArchSpec, Conditioning, ParamEntry, VelocityNet};
use crate::optics::NormStats;
use crate::scalar::Real;
use crate::train::{TrainConfig, Trainer};

const MAGIC: [u8; 4] = *b"HZCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub arch: ArchSpec,
    pub conditioning: Conditioning,
    pub params: Vec<ParamEntry>,
    pub iteration: u64,
    pub norm_stats: NormStats,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub val_loss: Option<f64>,
}

pub fn dtype_name<T: Real>() -> &'static str {
    match std::mem::size_of::<T>() {
        4 => "f32",
        _ => "f64",
    }
}

fn push_values<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    if std::mem::size_of::<T>() == 4 {
        for v in values {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    } else {
        for v in values {
            out.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
}

fn take_values<T: Real>(bytes: &[u8], n: usize) -> Result<(Vec<T>, &[u8])> {
    let width = std::mem::size_of::<T>().min(8);
    let need = n * width;
    if bytes.len() < need {
        return Err(Error::Data("checkpoint payload is truncated".into()));
    }
    let (head, rest) = bytes.split_at(need);
    let values = if width == 4 {
        head.chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect()
    } else {
        head.chunks_exact(8)
            .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect()
    };
    Ok((values, rest))
}

/// Serializes a trainer. Written to a temporary name first and renamed, so
/// a crash never leaves a half-written file under `path`.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    trainer: &Trainer<T>,
    norm_stats: &NormStats,
    val_loss: Option<f64>,
) -> Result<()> {
    let net = &trainer.net;
    let header = CheckpointHeader {
        dtype: dtype_name::<T>().into(),
        arch: net.arch().clone(),
        conditioning: net.conditioning(),
        params: net.params().entries().to_vec(),
        iteration: trainer.iteration,
        norm_stats: *norm_stats,
        train: trainer.config.clone(),
        adam: trainer.adam.config.clone(),
        adam_step: trainer.adam.step,
        val_loss,
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let n = net.param_count();
    let mut out = Vec::with_capacity(16 + json.len() + 3 * n * std::mem::size_of::<T>());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    push_values(&mut out, net.params().values());
    push_values(&mut out, &trainer.adam.m);
    push_values(&mut out, &trainer.adam.v);
    let tmp = path.with_extension("hzck.tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A checkpoint restored into a network and optimizer state.
#[derive(Clone, Debug)]
pub struct LoadedCheckpoint<T> {
    pub header: CheckpointHeader,
    pub net: VelocityNet<T>,
    pub adam: Adam<T>,
}

impl<T: Real> LoadedCheckpoint<T> {
    /// Trainer resuming from the stored iteration; the new config must keep
    /// the stored conditioning.
    pub fn into_trainer(self, config: TrainConfig) -> Result<Trainer<T>> {
        if config.conditioning != self.header.conditioning {
            return Err(Error::Incompatible(format!(
                "config asks for {:?} conditioning, checkpoint was trained with {:?}",
                config.conditioning, self.header.conditioning
            )));
        }
        let mut adam = self.adam;
        adam.config.learning_rate = config.learning_rate;
        Trainer::from_parts(self.net, adam, config, self.header.iteration)
    }

    /// Rejects a checkpoint whose network differs from `arch`.
    pub fn ensure_arch(&self, arch: &ArchSpec) -> Result<()> {
        if &self.header.arch != arch {
            return Err(Error::Incompatible(format!(
                "checkpoint architecture {:?} does not match configured {:?}",
                self.header.arch, arch
            )));
        }
        Ok(())
    }
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(Error::Incompatible("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Incompatible(format!("checkpoint format {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Data("checkpoint header is truncated".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Incompatible(format!("checkpoint header: {e}")))?;
    Ok((header, &body[len..]))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = read_header(&bytes)?;
    if header.dtype != dtype_name::<T>() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} values, loader expects {}",
            header.dtype,
            dtype_name::<T>()
        )));
    }
    let mut net = VelocityNet::<T>::init(header.arch.clone(), header.conditioning, 0)?;
    let n = net.param_count();
    let (params, rest) = take_values::<T>(payload, n)?;
    net.params_mut().load(&header.params, params)?;
    let (m, rest) = take_values::<T>(rest, n)?;
    let (v, rest) = take_values::<T>(rest, n)?;
    if !rest.is_empty() {
        return Err(Error::Data(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    let adam = Adam {
        config: header.adam.clone(),
        step: header.adam_step,
        m,
        v,
    };
    Ok(LoadedCheckpoint { header, net, adam })
}

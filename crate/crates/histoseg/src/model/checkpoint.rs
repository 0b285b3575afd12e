//! Self-describing binary checkpoints.
//!
//! Layout: the magic string `MSUNET-CKPT-1\n`, a little-endian u64 header
//! length, a JSON header (architecture, model config, epoch, parameter
//! manifest, optional optimizer metadata), then the raw little-endian
//! tensor bytes in manifest order — parameters first, then the Adam first-
//! and second-moment buffers when optimizer state is saved. Weights are
//! stored bit-exactly, so save/load round-trips reproduce forward outputs
//! bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::Scalar;

use super::{ArchKind, ModelConfig, SegModel};

pub const MAGIC: &[u8] = b"MSUNET-CKPT-1\n";

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    lr: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchKind,
    config: ModelConfig,
    epoch: usize,
    best_val_iou: Option<f64>,
    dtype: String,
    params: Vec<ParamMeta>,
    adam: Option<AdamMeta>,
}

pub struct LoadedCheckpoint<F: Scalar> {
    pub model: SegModel<F>,
    pub adam: Option<Adam<F>>,
    pub epoch: usize,
    pub best_val_iou: Option<f64>,
}

fn write_tensor<F: Scalar, W: Write>(w: &mut W, t: &ndarray::ArrayViewD<'_, F>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(t.len() * F::BYTES);
    for v in t.iter() {
        buf.extend_from_slice(&v.to_bits_u64().to_le_bytes()[..F::BYTES]);
    }
    w.write_all(&buf)
}

fn read_tensor<F: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<ArrayD<F>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * F::BYTES];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    let mut data = Vec::with_capacity(n);
    for chunk in buf.chunks_exact(F::BYTES) {
        let mut bits = [0u8; 8];
        bits[..F::BYTES].copy_from_slice(chunk);
        data.push(F::from_bits_u64(u64::from_le_bytes(bits)));
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
}

/// Write model weights (and optionally optimizer state) to `path`.
pub fn save_checkpoint<F: Scalar>(
    model: &SegModel<F>,
    adam: Option<&Adam<F>>,
    epoch: usize,
    best_val_iou: Option<f64>,
    path: &Path,
) -> Result<()> {
    let params = model.params();
    let header = Header {
        arch: model.arch,
        config: model.config.clone(),
        epoch,
        best_val_iou,
        dtype: F::DTYPE.to_string(),
        params: params
            .iter()
            .map(|(name, v)| ParamMeta {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
        adam: adam.map(|a| AdamMeta {
            step: a.step,
            lr: a.lr,
        }),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    for (_, v) in &params {
        write_tensor(&mut w, v).map_err(io_err)?;
    }
    if let Some(a) = adam {
        if a.m.len() != params.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not cover all parameters (no step taken yet?)".into(),
            ));
        }
        for m in &a.m {
            write_tensor(&mut w, &m.view()).map_err(io_err)?;
        }
        for v in &a.v {
            write_tensor(&mut w, &v.view()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Load a checkpoint. When `expected` is given, the embedded model config
/// must match it exactly.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<LoadedCheckpoint<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic: not a MSUNET-CKPT-1 checkpoint".into(),
        ));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated header length: {e}")))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

    if header.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: checkpoint holds {}, requested {}",
            header.dtype,
            F::DTYPE
        )));
    }
    if let Some(expected) = expected {
        if *expected != header.config {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint was built with {:?}, expected {:?}",
                header.config, expected
            )));
        }
    }

    let mut model = SegModel::<F>::new(header.arch, &header.config, 0)?;
    {
        let params = model.params_mut();
        if params.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                header.params.len(),
                params.len()
            )));
        }
        for (mut p, meta) in params.into_iter().zip(&header.params) {
            if p.name != meta.name || p.value.shape() != meta.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch at '{}' (checkpoint '{}')",
                    p.name, meta.name
                )));
            }
            let t = read_tensor::<F, _>(&mut r, &meta.shape)?;
            p.value.assign(&t);
        }
    }
    let adam = match &header.adam {
        Some(meta) => {
            let mut a = Adam::<F>::new(meta.lr);
            a.step = meta.step;
            for pm in &header.params {
                a.m.push(read_tensor::<F, _>(&mut r, &pm.shape)?);
            }
            for pm in &header.params {
                a.v.push(read_tensor::<F, _>(&mut r, &pm.shape)?);
            }
            Some(a)
        }
        None => None,
    };
    Ok(LoadedCheckpoint {
        model,
        adam,
        epoch: header.epoch,
        best_val_iou: header.best_val_iou,
    })
}

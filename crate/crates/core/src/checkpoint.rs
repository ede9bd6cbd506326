//! Denoiser checkpoints.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "DIFFPOCK"
//! format version   u32      1
//! data_dim         u32
//! num_conditions   u32
//! time_embed_dim   u32
//! num_timesteps    u32
//! hidden count     u32      followed by that many u32 widths
//! param version    u64
//! param count      u64      followed by that many f64 values
//! ```
//!
//! Parameters are written layer by layer, weights (row-major) before biases.
//! The JSON form carries the same content.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Arch, DenoiserParams, Layer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DIFFPOCK";
pub const FORMAT_VERSION: u32 = 1;
const JSON_FORMAT: &str = "diffpo-checkpoint";
const MAX_HIDDEN_LAYERS: usize = 64;

pub fn encode_binary(params: &DenoiserParams) -> Vec<u8> {
    let a = &params.arch;
    let n = params.num_params();
    let mut out = Vec::with_capacity(48 + 4 * a.hidden.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [a.data_dim, a.num_conditions, a.time_embed_dim, a.num_timesteps, a.hidden.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &h in &a.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.version.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Input(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn checked_param_count(arch: &Arch) -> Option<usize> {
    let mut widths = vec![arch
        .data_dim
        .checked_add(arch.time_embed_dim)?
        .checked_add(arch.num_conditions)?];
    widths.extend(&arch.hidden);
    widths.push(arch.data_dim);
    widths.windows(2).try_fold(0usize, |acc, w| {
        acc.checked_add(w[0].checked_mul(w[1])?.checked_add(w[1])?)
    })
}

fn assemble(arch: Arch, version: u64, values: &[f64]) -> Result<DenoiserParams> {
    arch.validate().map_err(|e| Error::Input(e.to_string()))?;
    let expected = checked_param_count(&arch)
        .ok_or_else(|| Error::Input("architecture parameter count overflows".into()))?;
    if expected != values.len() {
        return Err(Error::Input(format!(
            "architecture needs {expected} parameters, checkpoint holds {}",
            values.len()
        )));
    }
    let mut rest = values;
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(inputs, outputs)| {
            let (w, r) = rest.split_at(inputs * outputs);
            let (b, r) = r.split_at(outputs);
            rest = r;
            Layer {
                inputs,
                outputs,
                weight: w.to_vec(),
                bias: b.to_vec(),
            }
        })
        .collect();
    let params = DenoiserParams { arch, layers, version };
    params.validate()?;
    Ok(params)
}

pub fn decode_binary(bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Input("not a diffpo checkpoint (bad magic)".into()));
    }
    let fv = r.u32()?;
    if fv != FORMAT_VERSION {
        return Err(Error::Input(format!("unsupported checkpoint format version {fv}")));
    }
    let data_dim = r.u32()? as usize;
    let num_conditions = r.u32()? as usize;
    let time_embed_dim = r.u32()? as usize;
    let num_timesteps = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if n_hidden > MAX_HIDDEN_LAYERS {
        return Err(Error::Input(format!("too many hidden layers: {n_hidden}")));
    }
    let hidden = (0..n_hidden)
        .map(|_| r.u32().map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let version = r.u64()?;
    let n = r.u64()?;
    let n = usize::try_from(n).map_err(|_| Error::Input("parameter count too large".into()))?;
    if n.checked_mul(8) != Some(r.remaining()) {
        return Err(Error::Input(format!(
            "checkpoint declares {n} parameters but carries {} payload bytes",
            r.remaining()
        )));
    }
    let values: Vec<f64> = r
        .take(n * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let arch = Arch {
        data_dim,
        num_conditions,
        time_embed_dim,
        hidden,
        num_timesteps,
    };
    assemble(arch, version, &values)
}

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    format: String,
    version: u32,
    arch: Arch,
    param_version: u64,
    params: Vec<f64>,
}

pub fn encode_json(params: &DenoiserParams) -> String {
    serde_json::to_string(&JsonCheckpoint {
        format: JSON_FORMAT.into(),
        version: FORMAT_VERSION,
        arch: params.arch.clone(),
        param_version: params.version,
        params: params.to_flat(),
    })
    .expect("checkpoint serialises")
}

pub fn decode_json(text: &str) -> Result<DenoiserParams> {
    let ck: JsonCheckpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if ck.format != JSON_FORMAT || ck.version != FORMAT_VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint {:?} version {}",
            ck.format, ck.version
        )));
    }
    assemble(ck.arch, ck.param_version, &ck.params)
}

/// Writes JSON when `path` ends in `.json`, binary otherwise.
pub fn save_checkpoint(path: &Path, params: &DenoiserParams) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e == "json") {
        encode_json(params).into_bytes()
    } else {
        encode_binary(params)
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either form, sniffing the magic bytes.
pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_any(&bytes)
}

pub fn decode_any(bytes: &[u8]) -> Result<DenoiserParams> {
    if bytes.starts_with(MAGIC) {
        decode_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::Input("checkpoint is neither binary nor UTF-8 JSON".into()))?;
        decode_json(text)
    }
}

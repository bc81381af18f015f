//! Binary checkpoint format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "BAVTCKPT"  u32 version
//! u32 header_len  header (UTF-8 `key=value` lines)
//! u32 tensor_count  tensor*            model parameters
//! "ADAMSTAT"  u64 step  tensor*  tensor*   first and second moments
//! tensor := u32 name_len  name  u32 ndim  u64 dim*  f64 value*
//! ```
//!
//! Floating-point header fields are stored as their raw bit patterns so a
//! save/load round trip is exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::fit::TrainerState;
use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::vit::{ModelParams, ViTConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BAVTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const ADAM_MAGIC: &[u8; 8] = b"ADAMSTAT";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub vit: ViTConfig,
    pub state: TrainerState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(out: &mut Vec<u8>, params: &ModelParams) {
    let tensors = params.tensors();
    put_u32(out, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(out, d as u64);
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn header(ckpt: &Checkpoint) -> String {
    let v = &ckpt.vit;
    let s = &ckpt.state;
    let channels: Vec<String> = v.decoder_channels.iter().map(|c| c.to_string()).collect();
    let mut h = String::new();
    for (k, val) in [
        ("image_size", v.image_size.to_string()),
        ("patch_size", v.patch_size.to_string()),
        ("embed_dim", v.embed_dim.to_string()),
        ("depth", v.depth.to_string()),
        ("heads", v.heads.to_string()),
        ("mlp_ratio", v.mlp_ratio.to_string()),
        ("decoder_channels", channels.join(",")),
        ("epoch", s.epoch.to_string()),
        ("best_val_loss_bits", format!("{:016x}", s.best_val_loss.to_bits())),
        ("norm_mean_bits", format!("{:016x}", s.norm_mean.to_bits())),
        ("norm_std_bits", format!("{:016x}", s.norm_std.to_bits())),
    ] {
        h.push_str(&format!("{k}={val}\n"));
    }
    h
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let h = header(ckpt);
    put_u32(&mut out, h.len() as u32);
    out.extend_from_slice(h.as_bytes());
    put_tensors(&mut out, &ckpt.state.params);
    out.extend_from_slice(ADAM_MAGIC);
    put_u64(&mut out, ckpt.state.adam.step);
    put_tensors(&mut out, &ckpt.state.adam.m);
    put_tensors(&mut out, &ckpt.state.adam.v);
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode_checkpoint(ckpt);
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    /// Reads a tensor list into a copy of `template`, checking names and shapes.
    fn tensors(&mut self, template: &ModelParams) -> Result<ModelParams> {
        let mut params = template.clone();
        let expected: Vec<(String, Vec<usize>)> =
            template.tensors().into_iter().map(|(n, t)| (n, t.shape.clone())).collect();
        let count = self.u32()? as usize;
        if count != expected.len() {
            return Err(self.err(format!("{count} tensors stored, config implies {}", expected.len())));
        }
        for ((name, shape), dst) in expected.iter().zip(params.tensors_mut()) {
            let len = self.u32()? as usize;
            let stored = std::str::from_utf8(self.take(len)?).map_err(|_| self.err("tensor name is not UTF-8"))?;
            if stored != name {
                return Err(self.err(format!("expected tensor `{name}`, found `{stored}`")));
            }
            let ndim = self.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(self.u64()? as usize);
            }
            if &dims != shape {
                return Err(self.err(format!("tensor `{name}` has shape {dims:?}, expected {shape:?}")));
            }
            let raw = self.take(8 * dst.len())?;
            for (v, chunk) in dst.data.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(params)
    }
}

fn parse_header(text: &str, r: &Reader) -> Result<(ViTConfig, usize, f64, f64, f64)> {
    let map: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| map.get(k).copied().ok_or_else(|| r.err(format!("header is missing `{k}`")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| r.err(format!("bad header value for `{k}`"))) };
    let bits = |k: &str| -> Result<f64> {
        u64::from_str_radix(get(k)?, 16)
            .map(f64::from_bits)
            .map_err(|_| r.err(format!("bad header value for `{k}`")))
    };
    let channels = get("decoder_channels")?;
    let decoder_channels = if channels.is_empty() {
        Vec::new()
    } else {
        channels
            .split(',')
            .map(|c| c.parse().map_err(|_| r.err("bad decoder_channels")))
            .collect::<Result<Vec<usize>>>()?
    };
    let vit = ViTConfig {
        image_size: num("image_size")?,
        patch_size: num("patch_size")?,
        embed_dim: num("embed_dim")?,
        depth: num("depth")?,
        heads: num("heads")?,
        mlp_ratio: num("mlp_ratio")?,
        decoder_channels,
    };
    Ok((vit, num("epoch")?, bits("best_val_loss_bits")?, bits("norm_mean_bits")?, bits("norm_std_bits")?))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|_| r.err("header is not UTF-8"))?;
    let (vit, epoch, best_val_loss, norm_mean, norm_std) = parse_header(text, &r)?;
    vit.validate_shape().map_err(|e| r.err(format!("stored config is invalid: {e}")))?;
    let template = ModelParams::zeros(&vit)?;
    let params = r.tensors(&template)?;
    if r.take(8)? != &ADAM_MAGIC[..] {
        return Err(r.err("missing optimiser section"));
    }
    let step = r.u64()?;
    let m = r.tensors(&template)?;
    let v = r.tensors(&template)?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let state = TrainerState { params, adam: AdamState { step, m, v }, epoch, best_val_loss, norm_mean, norm_std };
    Ok(Checkpoint { vit, state })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

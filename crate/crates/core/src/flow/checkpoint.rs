//! Binary checkpoint format.
//!
//! All integers are little-endian `u32` unless noted, floats are
//! little-endian IEEE-754 `f64`.
//!
//! ```text
//! magic          8 bytes  "ITFLOWCK"
//! version        u32      (currently 1)
//! x_dim          u32
//! cond_dim       u32
//! block_count    u32
//! s_max          f64
//! masks          block_count × x_dim bytes, 1 = coordinate rescaled by block
//! layer shapes   per block: layer_count u32, then (in u32, out u32) per layer
//! has_norm       u8       0 or 1
//! normalization  if has_norm: x_mean[x_dim], x_scale[x_dim],
//!                c_mean[cond_dim], c_scale[cond_dim]   (f64)
//! weights        per block, per layer: weight[in·out] row-major, bias[out]
//! ```

use super::net::{ConditioningNet, Dense};
use super::{CouplingFlow, Normalization};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ITFLOWCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "checkpoint";
// Sanity bound on any single dimension read from a payload.
const MAX_DIM: u32 = 1 << 24;

pub fn save_checkpoint(flow: &CouplingFlow) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(flow.x_dim as u32);
    w.u32(flow.cond_dim as u32);
    w.u32(flow.blocks.len() as u32);
    w.f64(flow.s_max);
    for b in &flow.blocks {
        for &m in &b.mask {
            w.u8(m as u8);
        }
    }
    for b in &flow.blocks {
        w.u32(b.net.layers.len() as u32);
        for l in &b.net.layers {
            w.u32(l.in_dim as u32);
            w.u32(l.out_dim as u32);
        }
    }
    match &flow.norm {
        None => w.u8(0),
        Some(n) => {
            w.u8(1);
            w.f64s(&n.x_mean);
            w.f64s(&n.x_scale);
            w.f64s(&n.c_mean);
            w.f64s(&n.c_scale);
        }
    }
    for b in &flow.blocks {
        for l in &b.net.layers {
            w.f64s(&l.weight);
            w.f64s(&l.bias);
        }
    }
    w.finish()
}

fn read_dim(r: &mut ByteReader<'_>, what: &str) -> Result<usize> {
    let v = r.u32()?;
    if v > MAX_DIM {
        return Err(Error::format(KIND, format!("{what} {v} out of range")));
    }
    Ok(v as usize)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<CouplingFlow> {
    let mut r = ByteReader::new(KIND, bytes);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(KIND, "bad magic header"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            kind: KIND,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let x_dim = read_dim(&mut r, "x_dim")?;
    let cond_dim = read_dim(&mut r, "cond_dim")?;
    let n_blocks = read_dim(&mut r, "block count")?;
    if x_dim == 0 || cond_dim == 0 || n_blocks == 0 {
        return Err(Error::format(KIND, "zero dimension"));
    }
    let s_max = r.f64()?;
    if !(s_max > 0.0) || !s_max.is_finite() {
        return Err(Error::format(KIND, "invalid s_max"));
    }
    let mut masks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let raw = r.take(x_dim)?;
        if raw.iter().any(|&b| b > 1) {
            return Err(Error::format(KIND, "mask byte not 0/1"));
        }
        masks.push(raw.iter().map(|&b| b == 1).collect::<Vec<bool>>());
    }
    let mut shapes = Vec::with_capacity(n_blocks);
    for mask in &masks {
        let n_layers = read_dim(&mut r, "layer count")?;
        if n_layers == 0 {
            return Err(Error::format(KIND, "block without layers"));
        }
        let mut ls = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            ls.push((read_dim(&mut r, "layer in")?, read_dim(&mut r, "layer out")?));
        }
        let n_active = mask.iter().filter(|&&m| m).count();
        let chained = ls.windows(2).all(|w| w[0].1 == w[1].0);
        if !chained || ls[0].0 != x_dim - n_active + cond_dim || ls[n_layers - 1].1 != 2 * n_active {
            return Err(Error::format(KIND, "layer shapes inconsistent with masks"));
        }
        shapes.push(ls);
    }
    let norm = match r.u8()? {
        0 => None,
        1 => Some(Normalization {
            x_mean: r.f64s(x_dim)?,
            x_scale: r.f64s(x_dim)?,
            c_mean: r.f64s(cond_dim)?,
            c_scale: r.f64s(cond_dim)?,
        }),
        other => return Err(Error::format(KIND, format!("bad normalization flag {other}"))),
    };
    let mut parts = Vec::with_capacity(n_blocks);
    for (mask, ls) in masks.into_iter().zip(shapes) {
        let mut layers = Vec::with_capacity(ls.len());
        for (in_dim, out_dim) in ls {
            let weight = r.f64s(in_dim * out_dim)?;
            let bias = r.f64s(out_dim)?;
            layers.push(Dense {
                in_dim,
                out_dim,
                weight,
                bias,
            });
        }
        parts.push((mask, ConditioningNet::from_layers(layers)));
    }
    r.finish()?;
    let mut flow = CouplingFlow::from_parts(x_dim, cond_dim, s_max, parts, None);
    flow.set_normalization(norm)
        .map_err(|e| Error::format(KIND, e.to_string()))?;
    Ok(flow)
}

/// Loads a checkpoint and checks it against the dimensions a caller expects.
pub fn load_checkpoint_expecting(bytes: &[u8], x_dim: usize, cond_dim: usize) -> Result<CouplingFlow> {
    let flow = load_checkpoint(bytes)?;
    if flow.x_dim() != x_dim {
        return Err(Error::DimMismatch {
            what: "checkpoint x_dim",
            expected: x_dim,
            actual: flow.x_dim(),
        });
    }
    if flow.cond_dim() != cond_dim {
        return Err(Error::DimMismatch {
            what: "checkpoint cond_dim",
            expected: cond_dim,
            actual: flow.cond_dim(),
        });
    }
    Ok(flow)
}

//! Binary checkpoint format (`.adpt`).
//!
//! ```text
//! "ADPT" | version: u32 = 1 | tensor count: u32
//! per tensor: name len u16 | UTF-8 name | rank u8 | dims u32 × rank | f32 × Π dims
//! ```
//!
//! All integers and floats are little-endian. Tensor names are
//! `<role>.l<i>.weight` / `<role>.l<i>.bias`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::models::{Layer, ModelError, ParamSet, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADPT";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "adpt";
const MAX_RANK: u8 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("refusing to save non-finite tensor `{0}`")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_checkpoint<W: Write>(sets: &[&ParamSet<f32>], mut out: W) -> Result<(), CheckpointError> {
    let mut roles = Vec::new();
    let mut entries = Vec::new();
    for set in sets {
        if roles.contains(&set.role) {
            return Err(CheckpointError::Format(format!("role {} appears twice", set.role)));
        }
        roles.push(set.role);
        for (name, t) in set.named_tensors() {
            let full = format!("{}.{name}", set.role);
            if !t.is_finite() {
                return Err(CheckpointError::NonFinite(full));
            }
            entries.push((full, t));
        }
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(sets: &[&ParamSet<f32>], path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(sets, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Named tensors in file order.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let magic = read_array::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_array::<1>(&mut r)?[0];
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Format(format!("tensor `{name}` is too large")))?;
        // Grows with the bytes actually present, so a lying header cannot
        // force a huge allocation.
        let mut payload = Vec::new();
        (&mut r).take(n as u64).read_to_end(&mut payload)?;
        if payload.len() != n {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("payload of `{name}` truncated"),
            )
            .into());
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| CheckpointError::Format(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Rebuilds param sets from a checkpoint, in order of first appearance.
pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<ParamSet<f32>>, CheckpointError> {
    let tensors = read_tensors(r)?;
    let mut order: Vec<Role> = Vec::new();
    // (role position, layer) -> (weight, bias)
    type Slots = (Option<Tensor<f32>>, Option<Tensor<f32>>);
    let mut by_role: BTreeMap<(usize, usize), Slots> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Format(format!("duplicate tensor `{name}`")));
        }
        let bad = || CheckpointError::Format(format!("unrecognized tensor name `{name}`"));
        let mut parts = name.split('.');
        let (Some(role), Some(layer), Some(kind), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let role = Role::parse(role).ok_or_else(bad)?;
        let layer: usize = layer.strip_prefix('l').and_then(|l| l.parse().ok()).ok_or_else(bad)?;
        let role_idx = match order.iter().position(|&r| r == role) {
            Some(i) => i,
            None => {
                order.push(role);
                order.len() - 1
            }
        };
        let slot = by_role.entry((role_idx, layer)).or_default();
        match kind {
            "weight" => slot.0 = Some(t),
            "bias" => slot.1 = Some(t),
            _ => return Err(bad()),
        }
    }
    let mut sets = Vec::with_capacity(order.len());
    for (ri, &role) in order.iter().enumerate() {
        let mut layers = Vec::new();
        for (&(r, li), (w, b)) in by_role.range((ri, 0)..(ri + 1, 0)) {
            debug_assert_eq!(r, ri);
            if li != layers.len() {
                return Err(CheckpointError::Format(format!(
                    "{role} is missing layer {}",
                    layers.len()
                )));
            }
            match (w, b) {
                (Some(w), Some(b)) => layers.push(Layer {
                    weight: w.clone(),
                    bias: b.clone(),
                }),
                _ => {
                    return Err(CheckpointError::Format(format!(
                        "{role} layer {li} lacks a weight or bias"
                    )))
                }
            }
        }
        sets.push(ParamSet::from_layers(role, layers)?);
    }
    Ok(sets)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<ParamSet<f32>>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

/// Picks `role` out of a loaded checkpoint.
pub fn take_role(sets: &mut Vec<ParamSet<f32>>, role: Role) -> Option<ParamSet<f32>> {
    let i = sets.iter().position(|s| s.role == role)?;
    Some(sets.remove(i))
}

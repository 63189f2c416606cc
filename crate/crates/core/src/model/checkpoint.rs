//! `SPLM` checkpoints: magic, version, config block, named SPMX tensors and
//! the weight digest, which is verified on load.

use std::fs;
use std::path::Path;

use super::{TinyLm, TinyLmConfig, Weights};
use crate::error::{Result, SparcError};
use crate::io::{Decoder, Encoder};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPLM";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn checkpoint_bytes(lm: &TinyLm) -> Vec<u8> {
    let c = lm.config();
    let mut enc = Encoder::new();
    enc.bytes(CHECKPOINT_MAGIC);
    enc.u16(CHECKPOINT_VERSION);
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.max_seq,
    ] {
        enc.u32(v as u32);
    }
    enc.u64(c.seed);
    enc.u8(lm.is_frozen() as u8);
    let w = lm.weights();
    let names = w.names();
    enc.u32(names.len() as u32);
    for (name, t) in names.iter().zip(w.tensors()) {
        enc.str(name);
        enc.matrix(t);
    }
    enc.u64(lm.recompute_digest());
    enc.into_inner()
}

pub fn save_checkpoint(lm: &TinyLm, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(lm))?;
    Ok(())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TinyLm> {
    let mut dec = Decoder::new(bytes);
    if dec.take(4, "checkpoint magic")? != CHECKPOINT_MAGIC {
        return Err(SparcError::Format("not an SPLM checkpoint".into()));
    }
    let version = dec.u16("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(SparcError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = dec.u32("config block")? as usize;
    }
    let config = TinyLmConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        max_seq: dims[5],
        seed: dec.u64("config block")?,
    };
    config
        .validate()
        .map_err(|e| SparcError::Format(format!("invalid config block: {e}")))?;
    let frozen = dec.u8("frozen flag")? != 0;

    // Start from a correctly shaped skeleton and fill it by name.
    let mut weights = Weights::init(&TinyLmConfig {
        seed: 0,
        ..config.clone()
    });
    let expected = weights.names();
    let count = dec.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(SparcError::Format(format!(
            "checkpoint has {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut seen = vec![false; expected.len()];
    for _ in 0..count {
        let name = dec.str("tensor name")?;
        let m = dec.matrix(&name)?;
        let idx = expected
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| SparcError::Format(format!("unexpected tensor {name}")))?;
        let slot = weights.tensors_mut().swap_remove(idx);
        if slot.shape() != m.shape() {
            return Err(SparcError::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
        seen[idx] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(SparcError::Format(format!(
            "missing tensor {}",
            expected[i]
        )));
    }
    let stored = dec.u64("weight digest")?;
    if dec.remaining() != 0 {
        return Err(SparcError::Format("trailing bytes after checkpoint".into()));
    }
    let lm = TinyLm::from_parts(config, weights, frozen);
    let computed = lm.recompute_digest();
    if stored != computed {
        return Err(SparcError::Digest {
            what: "model weights".into(),
            stored,
            computed,
        });
    }
    Ok(lm)
}

pub fn load_checkpoint(path: &Path) -> Result<TinyLm> {
    checkpoint_from_bytes(&fs::read(path)?)
}

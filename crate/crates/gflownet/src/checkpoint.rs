//! Versioned binary checkpoints: parameters, optimizer state, RNG state, and
//! the monitoring buffers, so `train --resume` continues bit-exactly.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic       8 bytes  "GFNCKPT\x01"
//! iteration   u64
//! streak      u32
//! rng seed    32 bytes
//! rng stream  u64
//! rng wordpos u128
//! adam step   u64
//! num params  u64
//! params      num * f64 (IEEE bits)
//! adam m      num * f64
//! adam v      num * f64
//! num losses  u64, then f64 each
//! num terms   u64, then u64 each
//! ```

use std::io::{self, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::model::Model;
use crate::training::Trainer;

const MAGIC: &[u8; 8] = b"GFNCKPT\x01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic or unsupported checkpoint version")]
    BadMagic,
    #[error("checkpoint has {found} parameters, model has {expected}")]
    ParamCountMismatch { found: usize, expected: usize },
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_bits().to_le_bytes())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    Ok(f64::from_bits(u64::from_le_bytes(read_exact(r)?)))
}

pub fn save<M: Model>(trainer: &Trainer<M>, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    write_u64(w, trainer.iteration)?;
    w.write_all(&trainer.streak.to_le_bytes())?;
    w.write_all(&trainer.rng.get_seed())?;
    write_u64(w, trainer.rng.get_stream())?;
    w.write_all(&trainer.rng.get_word_pos().to_le_bytes())?;
    write_u64(w, trainer.opt.step)?;
    let params = trainer.model.params();
    write_u64(w, params.len() as u64)?;
    for &p in params {
        write_f64(w, p)?;
    }
    for &m in &trainer.opt.m {
        write_f64(w, m)?;
    }
    for &v in &trainer.opt.v {
        write_f64(w, v)?;
    }
    write_u64(w, trainer.losses.len() as u64)?;
    for &l in &trainer.losses {
        write_f64(w, l)?;
    }
    write_u64(w, trainer.terminals.len() as u64)?;
    for &t in &trainer.terminals {
        write_u64(w, t as u64)?;
    }
    Ok(())
}

/// Restore a checkpoint into a trainer whose model has the same shape.
pub fn load<M: Model>(trainer: &mut Trainer<M>, r: &mut impl Read) -> Result<(), CheckpointError> {
    if &read_exact::<8>(r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    trainer.iteration = read_u64(r)?;
    trainer.streak = u32::from_le_bytes(read_exact(r)?);
    let seed: [u8; 32] = read_exact(r)?;
    let stream = read_u64(r)?;
    let word_pos = u128::from_le_bytes(read_exact(r)?);
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    trainer.opt.step = read_u64(r)?;
    let n = read_u64(r)? as usize;
    if n != trainer.model.num_params() {
        return Err(CheckpointError::ParamCountMismatch {
            found: n,
            expected: trainer.model.num_params(),
        });
    }
    for i in 0..n {
        trainer.model.params_mut()[i] = read_f64(r)?;
    }
    for i in 0..n {
        trainer.opt.m[i] = read_f64(r)?;
    }
    for i in 0..n {
        trainer.opt.v[i] = read_f64(r)?;
    }
    let nl = read_u64(r)? as usize;
    trainer.losses.clear();
    for _ in 0..nl {
        trainer.losses.push_back(read_f64(r)?);
    }
    let nt = read_u64(r)? as usize;
    trainer.terminals.clear();
    for _ in 0..nt {
        trainer.terminals.push_back(read_u64(r)? as usize);
    }
    Ok(())
}

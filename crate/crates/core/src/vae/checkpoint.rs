//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic          8 bytes  "RPUVAECK"
//! version        u32      (currently 1)
//! input_dim      u32
//! latent_dim     u32
//! n_hidden       u32
//! hidden[i]      u32 x n_hidden
//! n_layers       u32      (encoder layers then decoder layers)
//! layer shapes   (in u32, out u32) x n_layers
//! n_params       u64
//! params         f64 x n_params, per layer: weights row-major [in][out], then bias
//! has_optimizer  u8       (0 or 1)
//! adam step      u64                     } only when has_optimizer = 1
//! adam m, v      f64 x n_params each     }
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{AdamState, Architecture, TrainState, VaeParams};

pub const MAGIC: &[u8; 8] = b"RPUVAECK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn put_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vals: &[f64]) -> io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn write(w: &mut impl Write, params: &VaeParams, adam: Option<&AdamState>) -> io::Result<()> {
    let arch = params.arch();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u32(w, arch.input_dim)?;
    put_u32(w, arch.latent_dim)?;
    put_u32(w, arch.hidden.len())?;
    for &h in &arch.hidden {
        put_u32(w, h)?;
    }
    let (enc, dec) = arch.layers();
    put_u32(w, enc.len() + dec.len())?;
    for l in enc.iter().chain(&dec) {
        put_u32(w, l.inp)?;
        put_u32(w, l.out)?;
    }
    w.write_all(&(params.as_slice().len() as u64).to_le_bytes())?;
    put_f64s(w, params.as_slice())?;
    match adam {
        Some(a) => {
            w.write_all(&[1])?;
            w.write_all(&a.step.to_le_bytes())?;
            put_f64s(w, &a.m)?;
            put_f64s(w, &a.v)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<(VaeParams, Option<AdamState>), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let input_dim = get_u32(r)?;
    let latent_dim = get_u32(r)?;
    let n_hidden = get_u32(r)?;
    if n_hidden > 64 {
        return Err(CheckpointError::Corrupt(format!("{n_hidden} hidden layers")));
    }
    let hidden = (0..n_hidden).map(|_| get_u32(r)).collect::<io::Result<Vec<_>>>()?;
    let arch = Architecture {
        input_dim,
        hidden,
        latent_dim,
    };
    let (enc, dec) = arch.layers();
    let n_layers = get_u32(r)?;
    if n_layers != enc.len() + dec.len() {
        return Err(CheckpointError::Corrupt("layer count".into()));
    }
    for l in enc.iter().chain(&dec) {
        let (i, o) = (get_u32(r)?, get_u32(r)?);
        if (i, o) != (l.inp, l.out) {
            return Err(CheckpointError::Corrupt(format!("layer shape {i}x{o}")));
        }
    }
    let n = get_u64(r)? as usize;
    if n != arch.num_params() {
        return Err(CheckpointError::Corrupt(format!("{n} parameters")));
    }
    let data = get_f64s(r, n)?;
    let params = VaeParams::from_flat(arch, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let adam = match flag[0] {
        0 => None,
        1 => {
            let step = get_u64(r)?;
            let m = get_f64s(r, n)?;
            let v = get_f64s(r, n)?;
            Some(AdamState { step, m, v })
        }
        f => return Err(CheckpointError::Corrupt(format!("optimizer flag {f}"))),
    };
    Ok((params, adam))
}

pub fn save(path: &Path, state: &TrainState) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write(&mut f, &state.params, Some(&state.adam))?;
    f.flush()
}

pub fn load(path: &Path) -> Result<TrainState, CheckpointError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    let (params, adam) = read(&mut f)?;
    let adam = adam.unwrap_or_else(|| AdamState::new(params.as_slice().len()));
    Ok(TrainState { params, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn roundtrip_with_optimizer() {
        let arch = Architecture {
            input_dim: 9,
            hidden: vec![5, 4],
            latent_dim: 3,
        };
        let mut state = TrainState::new(arch, &mut rng_for(8, &[]));
        state.adam.step = 17;
        state.adam.m[3] = 0.25;
        let mut buf = Vec::new();
        write(&mut buf, &state.params, Some(&state.adam)).unwrap();
        let (p, a) = read(&mut buf.as_slice()).unwrap();
        assert_eq!(p, state.params);
        assert_eq!(a.unwrap(), state.adam);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read(&mut &b"NOTACKPT...."[..]), Err(CheckpointError::BadMagic)));
        let mut buf = Vec::new();
        write(&mut buf, &VaeParams::zeros(Architecture::desk(4, 2)), None).unwrap();
        buf.truncate(buf.len() - 20);
        assert!(read(&mut buf.as_slice()).is_err());
    }
}

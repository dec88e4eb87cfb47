//! Flat binary weights: `"HCTL"`, version (u32), layer count (u32), the
//! `layers + 1` layer widths (u32 each), two config floats (embedding
//! frequency range) and then every layer's weight matrix (row-major) followed
//! by its bias, all as little-endian f64.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use super::mlp::{Affine, Mlp, MlpConfig, DEPTH};
use crate::error::{HctlError, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"HCTL";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn write_weights<W: Write>(model: &Mlp, mut out: W) -> Result<()> {
    let cfg = model.config();
    out.write_all(&WEIGHTS_MAGIC)?;
    out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    out.write_all(&(DEPTH as u32).to_le_bytes())?;
    for d in cfg.layer_dims() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    out.write_all(&(cfg.embed_dim as u32).to_le_bytes())?;
    out.write_all(&cfg.freq_min.to_le_bytes())?;
    out.write_all(&cfg.freq_max.to_le_bytes())?;
    for x in model.flat_parameters() {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn format(msg: impl Into<String>) -> HctlError {
    HctlError::Format(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| format("truncated parameter block"))?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_weights<R: Read>(mut r: R) -> Result<Mlp> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format("file too short"))?;
    if magic != WEIGHTS_MAGIC {
        return Err(format("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let layers = read_u32(&mut r)? as usize;
    if layers != DEPTH {
        return Err(format(format!("expected {DEPTH} layers, found {layers}")));
    }
    let mut dims = Vec::with_capacity(DEPTH + 1);
    for _ in 0..=DEPTH {
        dims.push(read_u32(&mut r)? as usize);
    }
    let embed_dim = read_u32(&mut r)? as usize;
    let freq_min = read_f64(&mut r)?;
    let freq_max = read_f64(&mut r)?;
    let state_dim = dims[DEPTH];
    if dims[0] != state_dim + embed_dim || dims[1..DEPTH].iter().any(|&d| d != dims[1]) {
        return Err(format("layer widths do not chain"));
    }
    let cfg = MlpConfig { state_dim, hidden: dims[1], embed_dim, freq_min, freq_max };
    let mut affine = Vec::with_capacity(DEPTH);
    for l in 0..DEPTH {
        let (rows, cols) = (dims[l + 1], dims[l]);
        let mut w = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                w[(i, j)] = read_f64(&mut r)?;
            }
        }
        let mut b = DVector::zeros(rows);
        for i in 0..rows {
            b[i] = read_f64(&mut r)?;
        }
        affine.push(Affine { w, b });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format("trailing bytes after parameters"));
    }
    Mlp::from_layers(cfg, affine).map_err(|e| format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn model() -> Mlp {
        let cfg = MlpConfig { hidden: 7, embed_dim: 6, ..Default::default() };
        Mlp::init(cfg, &mut stream(3, Stream::Training, 0)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"HCTL");
        let back = read_weights(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = model();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(bad.as_slice()), Err(HctlError::Format(_))));
        assert!(matches!(read_weights(&buf[..buf.len() - 3]), Err(HctlError::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_weights(long.as_slice()), Err(HctlError::Format(_))));
        let mut nan = buf.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(read_weights(nan.as_slice()).is_err());
    }
}

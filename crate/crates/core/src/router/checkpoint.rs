//! `RRM1` model files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        4 bytes  "RRM1"
//! version      u32      (1)
//! dim          u32      embedding dimension d
//! input        u32      2d + 3
//! hidden1      u32
//! hidden2      u32
//! dropout      f64
//! threshold    f64
//! seed         u64
//! scaler mean  input x f64
//! scaler std   input x f64
//! w1 b1 g1 beta1 w2 b2 g2 beta2 w3 b3   f64 arrays, weights row-major (fan_in, fan_out)
//! crc32        u32      over every preceding byte
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::network::Params;
use super::RouterModel;
use crate::error::{Error, Result};
use crate::features::{feature_len, ScalerParams};
use crate::fsutil::write_bytes_atomic;

pub const MODEL_MAGIC: &[u8; 4] = b"RRM1";
pub const MODEL_VERSION: u32 = 1;

pub fn encode(model: &RouterModel) -> Vec<u8> {
    let p = &model.params;
    let mut buf = Vec::with_capacity(64 + 8 * (p.num_params() + 2 * p.input_dim()));
    buf.extend_from_slice(MODEL_MAGIC);
    for v in [
        MODEL_VERSION,
        model.dim as u32,
        p.input_dim() as u32,
        p.hidden1() as u32,
        p.hidden2() as u32,
    ] {
        buf.write_u32::<LittleEndian>(v).unwrap();
    }
    buf.write_f64::<LittleEndian>(model.dropout_rate).unwrap();
    buf.write_f64::<LittleEndian>(model.threshold).unwrap();
    buf.write_u64::<LittleEndian>(model.seed).unwrap();
    let scaler = [model.scaler.mean.as_slice(), model.scaler.stddev.as_slice()];
    for t in scaler.into_iter().chain(p.tensors()) {
        for &x in t {
            buf.write_f64::<LittleEndian>(x).unwrap();
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).unwrap();
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RouterModel> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::VersionMismatch(format!(
            "{}: not an RRM1 model file",
            path.display()
        )));
    }
    let truncated = |_| Error::malformed(path, "truncated model file");
    let mut r = Cursor::new(&bytes[4..]);
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch(format!(
            "{}: model version {version}, expected {MODEL_VERSION}",
            path.display()
        )));
    }
    let mut header = [0u32; 4];
    r.read_u32_into::<LittleEndian>(&mut header).map_err(truncated)?;
    let [dim, input, hidden1, hidden2] = header.map(|v| v as usize);
    if input != feature_len(dim) || dim == 0 || hidden1 == 0 || hidden2 == 0 {
        return Err(Error::malformed(path, "inconsistent layer shapes"));
    }
    let mut params = Params::zeros(input, hidden1, hidden2);
    let expected_len = 4 + 4 * 5 + 8 * 3 + 8 * (2 * input + params.num_params()) + 4;
    if bytes.len() != expected_len {
        return Err(Error::malformed(
            path,
            format!("expected {expected_len} bytes, found {}", bytes.len()),
        ));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let dropout_rate = r.read_f64::<LittleEndian>().map_err(truncated)?;
    let threshold = r.read_f64::<LittleEndian>().map_err(truncated)?;
    let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
    let read_vec = |r: &mut Cursor<&[u8]>, n: usize| -> Result<Vec<f64>> {
        let mut v = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut v).map_err(truncated)?;
        Ok(v)
    };
    let mean = read_vec(&mut r, input)?;
    let stddev = read_vec(&mut r, input)?;
    for t in params.tensors_mut() {
        r.read_f64_into::<LittleEndian>(t).map_err(truncated)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(truncated)?;
    debug_assert_eq!(rest.len(), 4);

    Ok(RouterModel {
        params,
        scaler: ScalerParams { mean, stddev },
        dim,
        dropout_rate,
        threshold,
        seed,
    })
}

pub fn save(model: &RouterModel, path: &Path) -> Result<()> {
    write_bytes_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<RouterModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

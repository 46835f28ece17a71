//! Binary encoder checkpoints with bit-exact round-trips.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "RKDL"
//! version u32      currently 1
//! config  u64 length + that many bytes of EncoderConfig JSON
//! count   u64      number of tensors
//! per tensor:
//!   name  u64 length + UTF-8 bytes
//!   ndim  u64, then ndim u64 dimensions
//!   data  numel f64 values stored as raw bits (u64)
//! ```
//!
//! Values are written as `f64::to_bits`, so loading reproduces every byte of
//! every parameter exactly, signed zeros included.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RKDL";
const VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_bytes(w: &mut impl Write, b: &[u8], path: &Path) -> Result<()> {
    write_u64(w, b.len() as u64, path)?;
    w.write_all(b)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, path: &Path, cap: u64) -> Result<Vec<u8>> {
    let len = read_u64(r, path)?;
    if len > cap {
        return Err(Error::Checkpoint(format!(
            "length field {len} exceeds sanity cap {cap}"
        )));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf, path)?;
    Ok(buf)
}

/// Write encoder parameters (configuration included) to `path`.
pub fn save_encoder(path: impl AsRef<Path>, params: &EncoderParams) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    w.write_all(&VERSION.to_le_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let config_json = serde_json::to_vec(&params.config)?;
    write_bytes(&mut w, &config_json, path)?;
    let named = params.named();
    write_u64(&mut w, named.len() as u64, path)?;
    for (name, tensor) in &named {
        write_bytes(&mut w, name.as_bytes(), path)?;
        write_u64(&mut w, tensor.shape().len() as u64, path)?;
        for &d in tensor.shape() {
            write_u64(&mut w, d as u64, path)?;
        }
        for &v in tensor.data() {
            write_u64(&mut w, v.to_bits(), path)?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load encoder parameters written by [`save_encoder`].
pub fn load_encoder(path: impl AsRef<Path>) -> Result<EncoderParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut version = [0u8; 4];
    read_exact(&mut r, &mut version, path)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let config_json = read_bytes(&mut r, path, 1 << 20)?;
    let config: EncoderConfig = serde_json::from_slice(&config_json)?;

    let count = read_u64(&mut r, path)?;
    if count > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible tensor count {count}")));
    }
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_bytes = read_bytes(&mut r, path, 1 << 16)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: bad tensor name: {e}", path.display())))?;
        let ndim = read_u64(&mut r, path)?;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name} has implausible rank {ndim}",
                path.display()
            )));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name} has implausible size {numel}",
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(read_u64(&mut r, path)?));
        }
        entries.push((name, Tensor::from_vec(shape, data)?));
    }
    EncoderParams::from_named(&config, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, Scoring};

    fn config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 30,
            max_query_len: 3,
            max_doc_len: 4,
            seed: 5,
            scoring: Scoring::Probability,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = init_params(&config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_encoder(&path, &params).unwrap();
        let loaded = load_encoder(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        for ((na, ta), (nb, tb)) in params.named().iter().zip(loaded.named()) {
            assert_eq!(na, &nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{na} changed across save/load");
        }
    }

    #[test]
    fn negative_zero_survives() {
        let mut params = init_params(&config()).unwrap();
        params.classifier.bias.data_mut()[0] = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_encoder(&path, &params).unwrap();
        let loaded = load_encoder(&path).unwrap();
        assert_eq!(loaded.classifier.bias.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let params = init_params(&config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_encoder(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_encoder(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let params = init_params(&config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_encoder(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_encoder(&path).is_err());
    }

    #[test]
    fn missing_file_mentions_path() {
        let err = load_encoder("/nonexistent/enc.ckpt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/enc.ckpt"));
    }
}

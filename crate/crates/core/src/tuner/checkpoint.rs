//! `LMT1` tuner checkpoints.
//!
//! ```text
//! "LMT1" | config_len u32 | TunerConfig as JSON | d_llm u32 | tensor_count u32
//! tensor*: name_len u16 | name utf8 | rows u32 | cols u32 | rows*cols f32
//! ```

use std::path::Path;

use super::config::TunerConfig;
use super::params::TunerParams;
use crate::error::{Error, Result};
use crate::hidden_states::ByteReader;
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMT1";

pub fn encode_checkpoint(config: &TunerConfig, params: &TunerParams) -> Result<Vec<u8>> {
    if !params.matches(config) {
        return Err(Error::Data("parameters do not match the tuner config".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(config).map_err(|e| Error::Format(format!("config: {e}")))?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.d_llm as u32).to_le_bytes());
    let mut count = 0u32;
    params.for_each(|_, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    params.for_each(|name, m| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TunerConfig, TunerParams)> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an LMT1 checkpoint".into()));
    }
    let mut r = ByteReader::new(&bytes[4..], "checkpoint");
    let cfg_len = r.u32()? as usize;
    let config: TunerConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let d_llm = r.u32()? as usize;
    let mut params = TunerParams::init(&config, d_llm)?;
    let expected = params.shapes();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, rows, cols) in &expected {
        let name_len = r.u16()? as usize;
        let got = r.string(name_len)?;
        let (gr, gc) = (r.u32()? as usize, r.u32()? as usize);
        if &got != name || gr != *rows || gc != *cols {
            return Err(Error::Format(format!(
                "checkpoint tensor {got:?} {gr}x{gc} does not match expected {name:?} {rows}x{cols}"
            )));
        }
        let data = r.f32_vec(gr * gc)?;
        loaded.push(Mat::from_f32(gr, gc, &data));
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    let mut it = loaded.into_iter();
    params.for_each_mut(|_, m| *m = it.next().expect("count checked"));
    Ok((config, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &TunerConfig, params: &TunerParams) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(config, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TunerConfig, TunerParams)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::config::ConnectionMode;
    use super::*;

    #[test]
    fn roundtrip_and_header() {
        let cfg = TunerConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            connection_mode: ConnectionMode::UToA,
            ..TunerConfig::default()
        };
        let p = TunerParams::init(&cfg, 8).unwrap();
        let bytes = encode_checkpoint(&cfg, &p).unwrap();
        let (c2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
        assert_eq!(encode_checkpoint(&c2, &p2).unwrap(), bytes);
        assert!(String::from_utf8_lossy(&bytes).contains("u_to_a"));
    }

    #[test]
    fn corrupt_files_rejected() {
        let cfg = TunerConfig {
            d_model: 4,
            n_heads: 1,
            n_blocks: 1,
            ..TunerConfig::default()
        };
        let p = TunerParams::init(&cfg, 4).unwrap();
        let bytes = encode_checkpoint(&cfg, &p).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}

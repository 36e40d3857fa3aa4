//! `BMKM` model checkpoints.
//!
//! ```text
//! "BMKM" | version u32 | variant u32 | width u32 | embedding_dim u32
//!        | temperature f64 | tensor count u32
//!        | per tensor: name_len u32 | name | rank u32 | dims u32* | f64 values
//! ```

use std::path::Path;

use super::model::{build_model, Model, ModelConfig, Variant};
use super::NetError;
use crate::scan_io::internal::{atomic_write, Reader};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BMKM";

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&c.variant.code().to_le_bytes());
    out.extend_from_slice(&(c.width as u32).to_le_bytes());
    out.extend_from_slice(&(c.embedding_dim as u32).to_le_bytes());
    out.extend_from_slice(&c.temperature.to_le_bytes());
    out.extend_from_slice(&(model.parameters().len() as u32).to_le_bytes());
    for (name, p) in model.parameter_names().iter().zip(model.parameters()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> NetError {
    NetError::Checkpoint(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, NetError> {
    let mut r = Reader::new(bytes);
    let magic = r.magic().map_err(|e| bad(e.to_string()))?;
    if &magic != MAGIC {
        return Err(bad(format!("not a BMKM checkpoint (magic {magic:?})")));
    }
    let read_u32 = |r: &mut Reader, what| r.u32(what).map_err(|e| bad(e.to_string()));
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let code = read_u32(&mut r, "variant")?;
    let variant = Variant::from_code(code).ok_or_else(|| bad(format!("unknown variant code {code}")))?;
    let width = read_u32(&mut r, "width")? as usize;
    let embedding_dim = read_u32(&mut r, "embedding_dim")? as usize;
    let temperature = r.f64("temperature").map_err(|e| bad(e.to_string()))?;
    let config = ModelConfig {
        variant,
        width,
        embedding_dim,
        temperature,
    };
    let mut model = build_model(&config, 0)?;
    let count = read_u32(&mut r, "tensor count")? as usize;
    if count != model.parameters().len() {
        return Err(bad(format!(
            "{count} tensors stored, the {variant} architecture has {}",
            model.parameters().len()
        )));
    }
    for i in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        let name = r.utf8(len).map_err(|e| bad(e.to_string()))?;
        if name != model.parameter_names()[i] {
            return Err(bad(format!(
                "tensor {i} is {name:?}, expected {:?}",
                model.parameter_names()[i]
            )));
        }
        let rank = read_u32(&mut r, "rank")? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let param = &mut model.parameters_mut()[i];
        if shape != param.shape() {
            return Err(bad(format!("{name} has shape {shape:?}, expected {:?}", param.shape())));
        }
        let values = r.f64_vec(param.len(), "values").map_err(|e| bad(e.to_string()))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("{name} holds non-finite values")));
        }
        param.data_mut().copy_from_slice(&values);
    }
    r.finish().map_err(|e| bad(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), NetError> {
    atomic_write(path, &encode_checkpoint(model)).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model, NetError> {
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let config = ModelConfig {
            variant: Variant::BlockDepth2,
            width: 3,
            embedding_dim: 5,
            temperature: 0.25,
        };
        let model = build_model(&config, 9).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.parameters(), model.parameters());
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let model = build_model(&ModelConfig { width: 2, ..ModelConfig::default() }, 0).unwrap();
        let bytes = encode_checkpoint(&model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 7;
        assert!(decode_checkpoint(&wrong).is_err());
        assert!(decode_checkpoint(b"BMK1").is_err());
    }
}

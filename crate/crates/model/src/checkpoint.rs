//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `SILOCKPT`, a little-endian `u32` header length,
//! a JSON header (model config, step, block table, optional optimizer
//! state), then every block's values as little-endian f32 in header order,
//! followed by the Adam first and second moments when present.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::model::{Model, ModelError};
use crate::optim::Adam;
use crate::params::Layout;

pub const MAGIC: &[u8; 8] = b"SILOCKPT";

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    config: ModelConfig,
    step: u64,
    blocks: Vec<BlockHeader>,
    adam: Option<Adam>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn to_bytes(model: &Model<f32>, adam: Option<&Adam>) -> Vec<u8> {
    let header = Header {
        format: 1,
        config: model.cfg.clone(),
        step: model.step,
        blocks: model
            .layout
            .blocks
            .iter()
            .map(|b| BlockHeader { name: b.name.clone(), rows: b.rows, cols: b.cols })
            .collect(),
        adam: adam.cloned(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.params.len() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f32]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    put(&model.params);
    if let Some(a) = adam {
        put(&a.m);
        put(&a.v);
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, Option<Adam>), ModelError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing SILOCKPT magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != 1 {
        return Err(bad(format!("unsupported format {}", header.format)));
    }
    header.config.validate().map_err(ModelError::Config)?;
    let layout = Layout::new(&header.config);
    let same = layout.blocks.len() == header.blocks.len()
        && layout
            .blocks
            .iter()
            .zip(&header.blocks)
            .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols);
    if !same {
        return Err(bad("block table does not match the configuration"));
    }
    let mut data = bytes[12 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let n = layout.total;
    let params: Vec<f32> = data.by_ref().take(n).collect();
    if params.len() != n {
        return Err(bad("truncated parameters"));
    }
    let adam = match header.adam {
        Some(mut a) => {
            a.m = data.by_ref().take(n).collect();
            a.v = data.by_ref().take(n).collect();
            if a.m.len() != n || a.v.len() != n {
                return Err(bad("truncated optimizer state"));
            }
            Some(a)
        }
        None => None,
    };
    if data.next().is_some() || (bytes.len() - 12 - hlen) % 4 != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((Model::from_params(header.config, layout, params, header.step), adam))
}

pub fn save(path: &Path, model: &Model<f32>, adam: Option<&Adam>) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model, adam))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model<f32>, Option<Adam>), ModelError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScheduleConfig;
    use silo_core::isa::token::{BOS, EOS};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { vocab: 16, max_len: 10, ..ModelConfig::tiny() };
        let m: Model<f32> = Model::new(cfg, 5).unwrap();
        let mut adam = Adam::new(m.params.len(), ScheduleConfig::new(0.5, 16));
        adam.t = 7;
        adam.m[2] = 0.25;
        let bytes = to_bytes(&m, Some(&adam));
        let (m2, a2) = from_bytes(&bytes).unwrap();
        assert_eq!(m.params, m2.params);
        assert_eq!(a2.as_ref(), Some(&adam));
        let src = [BOS, 4, 5, EOS];
        let a = m.forward_logprobs(&src, &[BOS, 6]).unwrap();
        let b = m2.forward_logprobs(&src, &[BOS, 6]).unwrap();
        assert_eq!(a, b);
        assert_eq!(to_bytes(&m2, a2.as_ref()), bytes);
    }

    #[test]
    fn corrupt_input_is_an_error() {
        assert!(from_bytes(b"NOTACKPT").is_err());
        let cfg = ModelConfig { vocab: 16, max_len: 10, ..ModelConfig::tiny() };
        let m: Model<f32> = Model::new(cfg, 5).unwrap();
        let bytes = to_bytes(&m, None);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}

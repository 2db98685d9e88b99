//! Weight checkpoint: a short text header followed by raw little-endian f32.
//!
//! ```text
//! SPIKEBERT-CHECKPOINT 1
//! model <key> <value>              one line per ModelConfig field
//! meta <key> <value>               free-form metadata (vocab hash, stage, ...)
//! tensor <name> <d0,d1,..> <byte offset> <element count>
//! end
//! <tensor data>
//! ```
//!
//! Offsets are relative to the first byte after the `end\n` line. Tensors are
//! written in name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, ParamStore, SpikeBert};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC_LINE: &str = "SPIKEBERT-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &SpikeBert) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            meta: BTreeMap::new(),
        }
    }

    pub fn into_model(self) -> Result<SpikeBert> {
        let model = SpikeBert {
            config: self.config,
            params: self.params,
        };
        model.config.validate()?;
        model.validate_params()?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC_LINE);
        header.push('\n');
        for (k, v) in self.config.to_pairs() {
            header.push_str(&format!("model {k} {v}\n"));
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), t.numel()));
            offset += 4 * t.numel();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in self.params.iter() {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format(*pos as u64, "unterminated checkpoint header"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::format(*pos as u64, "header is not UTF-8"))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        if next_line(&mut pos)? != MAGIC_LINE {
            return Err(Error::format(0, "not a spikebert checkpoint"));
        }
        let mut config = ModelConfig::default();
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let at = pos as u64;
            let line = next_line(&mut pos)?;
            let mut parts = line.split(' ');
            match parts.next() {
                Some("end") => break,
                Some("model") => {
                    let (k, v) = (parts.next(), parts.next());
                    match (k, v) {
                        (Some(k), Some(v)) => config
                            .set_pair(k, v)
                            .map_err(|e| Error::format(at, e.to_string()))?,
                        _ => return Err(Error::format(at, "malformed model line")),
                    }
                }
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| Error::format(at, "malformed meta line"))?;
                    let v: Vec<&str> = parts.collect();
                    meta.insert(k.to_string(), v.join(" "));
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.collect();
                    if fields.len() != 4 {
                        return Err(Error::format(at, "malformed tensor line"));
                    }
                    let parse = |s: &str| {
                        s.parse::<usize>()
                            .map_err(|_| Error::format(at, format!("bad number {s:?}")))
                    };
                    let shape = if fields[1].is_empty() {
                        Vec::new()
                    } else {
                        fields[1].split(',').map(parse).collect::<Result<Vec<_>>>()?
                    };
                    let offset = parse(fields[2])?;
                    let count = parse(fields[3])?;
                    if shape.iter().product::<usize>() != count {
                        return Err(Error::format(at, format!("tensor {} shape/count mismatch", fields[0])));
                    }
                    entries.push((fields[0].to_string(), shape, offset, count));
                }
                _ => return Err(Error::format(at, format!("unknown header line {line:?}"))),
            }
        }
        let data = &bytes[pos..];
        let expected: usize = entries.iter().map(|e| 4 * e.3).sum();
        if data.len() != expected {
            return Err(Error::format(
                pos as u64,
                format!("tensor data is {} bytes, header declares {expected}", data.len()),
            ));
        }
        let mut params = ParamStore::new();
        for (name, shape, offset, count) in entries {
            let end = offset + 4 * count;
            if end > data.len() {
                return Err(Error::format((pos + offset) as u64, format!("tensor {name} runs past end")));
            }
            let values = data[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(name, Tensor::new(values, shape)?);
        }
        Ok(Self { config, params, meta })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

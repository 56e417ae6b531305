//! Checkpoint files: a plain-text header of `key = value` lines ending in
//! `end`, followed by little-endian `f32` payload in header tensor order.
//! The header carries the SHA-256 of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams, Precision, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &str = "circuitlab-checkpoint/1";

/// A named set of `f32` tensors plus free-form header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub fields: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorFile {
    pub fn field(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.field(key).ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("missing header field `{key}`"),
        })?;
        raw.parse().map_err(|_| Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("bad value `{raw}` for `{key}`"),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.fields {
            header.push_str(&format!("{k} = {v}\n"));
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor = {name} {}\n", dims.join("x")));
        }
        header.push_str(&format!("payload_bytes = {}\n", payload.len()));
        header.push_str(&format!("sha256 = {}\n", hex::encode(Sha256::digest(&payload))));
        header.push_str("end\n");

        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(header.as_bytes())
            .and_then(|_| f.write_all(&payload))
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |msg: String| Error::Corrupt {
            path: path.to_path_buf(),
            msg,
        };
        let end = find_header_end(&bytes).ok_or_else(|| corrupt("header has no `end` line".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not UTF-8".into()))?;
        let payload = &bytes[end + "end\n".len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt(format!("not a {MAGIC} file")));
        }
        let mut fields = Vec::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut declared_len = None;
        let mut checksum = None;
        for line in lines {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| corrupt(format!("malformed header line `{line}`")))?;
            match k {
                "tensor" => {
                    let (name, dims) = v
                        .split_once(' ')
                        .ok_or_else(|| corrupt(format!("malformed tensor line `{line}`")))?;
                    let shape = dims
                        .split('x')
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|_| corrupt(format!("bad shape in `{line}`")))?;
                    shapes.push((name.to_string(), shape));
                }
                "payload_bytes" => {
                    declared_len = Some(v.parse::<usize>().map_err(|_| corrupt("bad payload_bytes".into()))?)
                }
                "sha256" => checksum = Some(v.to_string()),
                _ => fields.push((k.to_string(), v.to_string())),
            }
        }
        let declared_len = declared_len.ok_or_else(|| corrupt("missing payload_bytes".into()))?;
        let expected: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
        if payload.len() != declared_len || payload.len() != expected {
            return Err(corrupt(format!(
                "payload is {} bytes; header declares {declared_len}, tensors need {expected}",
                payload.len()
            )));
        }
        let actual = hex::encode(Sha256::digest(payload));
        if checksum.as_deref() != Some(actual.as_str()) {
            return Err(corrupt("payload checksum mismatch".into()));
        }

        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Self { fields, tensors })
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let marker = b"\nend\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + 1)
}

/// A loaded model checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ModelParams<f32>,
}

fn config_fields(config: &ModelConfig) -> Vec<(String, String)> {
    let precision = match config.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    [
        ("vocab_size", config.vocab_size.to_string()),
        ("model_dim", config.model_dim.to_string()),
        ("num_heads", config.num_heads.to_string()),
        ("mlp_dim", config.mlp_dim.to_string()),
        ("num_iterations", config.num_iterations.to_string()),
        ("seed", config.seed.to_string()),
        ("precision", precision.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Writes parameters (stored as `f32`) with their config and step.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams<T>,
    step: u64,
) -> Result<()> {
    let mut fields = vec![("kind".to_string(), "model".to_string())];
    fields.push(("step".into(), step.to_string()));
    fields.extend(config_fields(config));
    let tensors = PARAM_NAMES
        .iter()
        .zip(params.tensors())
        .map(|(n, t)| (n.to_string(), t.cast::<f32>()))
        .collect();
    TensorFile { fields, tensors }.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = TensorFile::read(path)?;
    if file.field("kind") != Some("model") {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: "not a model checkpoint".into(),
        });
    }
    let precision = match file.field("precision") {
        Some("f64") => Precision::F64,
        _ => Precision::F32,
    };
    let config = ModelConfig {
        vocab_size: file.require("vocab_size", path)?,
        model_dim: file.require("model_dim", path)?,
        num_heads: file.require("num_heads", path)?,
        mlp_dim: file.require("mlp_dim", path)?,
        num_iterations: file.require("num_iterations", path)?,
        seed: file.require("seed", path)?,
        precision,
    };
    config.validate()?;
    let step = file.require("step", path)?;

    let mut params = ModelParams::<f32>::init_with(&config, 0.0, &mut crate::rng::stream_rng(0, 0));
    if file.tensors.len() != PARAM_NAMES.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("{} tensors, expected {}", file.tensors.len(), PARAM_NAMES.len()),
        });
    }
    for ((slot, name), (got_name, t)) in params.tensors_mut().into_iter().zip(PARAM_NAMES).zip(file.tensors) {
        if got_name != name || t.shape() != slot.shape() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                msg: format!(
                    "tensor `{got_name}` {:?} where `{name}` {:?} was expected",
                    t.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = t;
    }
    Ok(Checkpoint {
        config,
        step,
        params,
    })
}

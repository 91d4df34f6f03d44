//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! b"TPCK" | u32 version = 1
//! u32 K | u32 D | u32 L | u32 A | f64 τ | f64 λ | u8 prototype_module
//! str normalization | str activation
//! u32 n_class_names | n × str
//! u32 n_tensors | n × (str name | u32 rows | u32 cols | rows·cols × f64)
//! ```
//!
//! `str` is a u16 byte length followed by UTF-8 bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::params::{ModelConfig, ModelParams, TENSOR_NAMES};
use crate::model::strategies::{activations, normalizations};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"TPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub params: ModelParams,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [c.num_classes, c.feature_dim, c.hidden_dim, c.attention_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.temperature.to_le_bytes());
        out.extend_from_slice(&c.lambda.to_le_bytes());
        out.push(c.prototype_module as u8);
        put_str(&mut out, c.normalization.name());
        put_str(&mut out, c.activation.name());
        out.extend_from_slice(&(self.class_names.len() as u32).to_le_bytes());
        for n in &self.class_names {
            put_str(&mut out, n);
        }
        let tensors = self.params.named();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "TPCK",
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let l = r.u32()? as usize;
        let a = r.u32()? as usize;
        let temperature = r.f64()?;
        let lambda = r.f64()?;
        let prototype_module = r.take(1)?[0] != 0;
        let normalization = normalizations().get(&r.string()?)?;
        let activation = activations().get(&r.string()?)?;
        let config = ModelConfig {
            num_classes: k,
            feature_dim: d,
            hidden_dim: l,
            attention_dim: a,
            temperature,
            lambda,
            prototype_module,
            normalization,
            activation,
        };
        config.validate()?;
        let n_names = r.u32()? as usize;
        let class_names = (0..n_names).map(|_| r.string()).collect::<Result<Vec<_>>>()?;

        let mut params = ModelParams::zeros(&config);
        let n_tensors = r.u32()? as usize;
        if n_tensors != TENSOR_NAMES.len() {
            return Err(r.bad(format!("expected {} tensors, found {n_tensors}", TENSOR_NAMES.len())));
        }
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r
                .take(rows * cols * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let slot = params
                .named_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| r.bad(format!("unknown tensor {name:?}")))?;
            if slot.shape() != (rows, cols) {
                return Err(r.bad(format!(
                    "tensor {name} has shape {rows}×{cols}, expected {}×{}",
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = Matrix::from_vec(rows, cols, data)?;
        }
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            class_names,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn bad(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: 0,
            message,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                context: "checkpoint",
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.bad("invalid UTF-8".into()))
    }
}

//! TPFB feature files.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"TPFB" | u32 version = 1 | u32 M | u32 D | u8 has_coords
//! M × D f32, row-major
//! if has_coords: M × (i32 x, i32 y)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"TPFB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1;

pub type Coord = (i32, i32);

/// Decoded contents of a TPFB file.
#[derive(Clone, Debug, PartialEq)]
pub struct TpfbPayload {
    pub features: Matrix,
    pub coords: Option<Vec<Coord>>,
}

pub fn encode(features: &Matrix, coords: Option<&[Coord]>) -> Result<Vec<u8>> {
    let (m, d) = features.shape();
    if let Some(c) = coords {
        if c.len() != m {
            return Err(Error::DimensionMismatch {
                context: "TPFB coords",
                expected: m,
                actual: c.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + m * d * 4 + coords.map_or(0, |c| c.len() * 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(coords.is_some() as u8);
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(c) = coords {
        for &(x, y) in c {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes features as f32; values not representable in f32 are rounded.
pub fn write_feature_bag(path: &Path, features: &Matrix, coords: Option<&[Coord]>) -> Result<()> {
    let bytes = encode(features, coords)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                context,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path, expected_dim: usize) -> Result<TpfbPayload> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    let magic = r.take(4, "magic").map_err(|_| Error::BadMagic {
        path: path.to_path_buf(),
        expected: "TPFB",
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TPFB",
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let m = r.u32("instance count")? as usize;
    let d = r.u32("feature dimension")? as usize;
    let has_coords = r.take(1, "coords flag")?[0];
    if d != expected_dim {
        return Err(Error::FeatureDimMismatch {
            path: path.to_path_buf(),
            expected: expected_dim,
            actual: d,
        });
    }
    if m == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "bag has no instances".into(),
        });
    }
    if has_coords > 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("invalid has_coords byte {has_coords}"),
        });
    }
    let payload = r.take(m * d * 4, "feature payload")?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "non-finite feature value".into(),
        });
    }
    let features = Matrix::from_vec(m, d, data)?;
    let coords = if has_coords == 1 {
        let raw = r.take(m * 8, "coordinate payload")?;
        let coords: Vec<Coord> = raw
            .chunks_exact(8)
            .map(|c| {
                (
                    i32::from_le_bytes(c[0..4].try_into().unwrap()),
                    i32::from_le_bytes(c[4..8].try_into().unwrap()),
                )
            })
            .collect();
        let unique: HashSet<&Coord> = coords.iter().collect();
        if unique.len() != coords.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "duplicate patch coordinates".into(),
            });
        }
        Some(coords)
    } else {
        None
    };
    Ok(TpfbPayload { features, coords })
}

pub fn load_feature_bag(path: &Path, expected_dim: usize) -> Result<TpfbPayload> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, expected_dim)
}

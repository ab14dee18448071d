//! Sample arrays: magic, header length, JSON header, raw little-endian f64.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_MAGIC: &[u8; 4] = b"PDSM";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub shape: [usize; 2],
    pub dtype: String,
    pub seed: u64,
    pub path: Vec<usize>,
    pub checkpoint_id: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleFile {
    pub header: SampleHeader,
    pub data: Array2<f64>,
}

impl SampleFile {
    pub fn new(data: Array2<f64>, seed: u64, path: Vec<usize>, checkpoint_id: String, model: &str) -> Self {
        Self {
            header: SampleHeader {
                shape: [data.nrows(), data.ncols()],
                dtype: "f64le".into(),
                seed,
                path,
                checkpoint_id,
                model: model.into(),
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header).map_err(|e| Error::format("sample header", e))?;
        let mut out = Vec::with_capacity(8 + json.len() + self.data.len() * 8);
        out.extend_from_slice(SAMPLE_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "sample file";
        if bytes.len() < 8 || &bytes[..4] != SAMPLE_MAGIC {
            return Err(Error::format(ctx, "not a sample file"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::format(ctx, "truncated header"))?;
        let header: SampleHeader = serde_json::from_slice(json).map_err(|e| Error::format(ctx, e))?;
        let payload = &bytes[8 + len..];
        let [rows, cols] = header.shape;
        if payload.len() != rows * cols * 8 {
            return Err(Error::format(ctx, "payload size does not match shape"));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::format(ctx, e))?;
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Whitespace-separated rows with shortest round-trip float formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.data.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn bytes_round_trip() {
        let f = SampleFile::new(array![[0.1, -2.5], [1e-300, 3.0]], 7, vec![10, 1], "abc".into(), "ema");
        let back = SampleFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(f.to_text(), "0.1 -2.5\n1e-300 3.0\n");
    }
}

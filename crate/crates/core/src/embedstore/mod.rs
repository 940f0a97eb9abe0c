//! On-disk embedding cache and the synthetic planted-event generator that
//! stands in for frozen encoder outputs.

mod format;
mod manifest;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use format::{
    read_record, read_store, write_store, StoreHeader, StoreReader, DTYPE_F32, HEADER_SIZE, MAGIC,
    VERSION,
};
pub use manifest::{Split, StoreManifest};
pub use synth::{class_signatures, generate_synthetic, SynthSpec};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("record {index}: dimension mismatch ({detail})")]
    DimensionMismatch { index: usize, detail: String },
    #[error("record {index}: empty label vector in a store without allow_empty")]
    EmptyLabels { index: usize },
    #[error("record {index}: non-finite value")]
    NonFinite { index: usize },
    #[error("record index {index} out of range (store holds {count})")]
    OutOfRange { index: u64, count: u64 },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Frozen `D x S_t x S_f` patch-embedding grid for one clip, stored
/// row-major in `(D, S_t, S_f)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub dim: usize,
    pub s_t: usize,
    pub s_f: usize,
    pub data: Vec<f32>,
}

impl TokenMap {
    pub fn zeros(dim: usize, s_t: usize, s_f: usize) -> Self {
        Self {
            dim,
            s_t,
            s_f,
            data: vec![0.0; dim * s_t * s_f],
        }
    }

    pub fn tokens(&self) -> usize {
        self.s_t * self.s_f
    }

    /// Token at grid position `n = t * S_f + f`.
    pub fn token(&self, n: usize) -> Vec<f32> {
        let stride = self.tokens();
        (0..self.dim).map(|d| self.data[d * stride + n]).collect()
    }

    pub fn set_token(&mut self, n: usize, value: &[f32]) {
        let stride = self.tokens();
        for (d, &v) in value.iter().enumerate() {
            self.data[d * stride + n] = v;
        }
    }

    /// Token-major (`N x D`) copy in 64-bit.
    pub fn token_major(&self) -> Vec<f64> {
        let n_tok = self.tokens();
        let mut out = vec![0.0; n_tok * self.dim];
        for d in 0..self.dim {
            let plane = &self.data[d * n_tok..(d + 1) * n_tok];
            for (n, &x) in plane.iter().enumerate() {
                out[n * self.dim + d] = x as f64;
            }
        }
        out
    }
}

/// One cached example: identifier, multi-hot labels, cls vector and token map.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub labels: Vec<bool>,
    pub cls: Vec<f32>,
    pub tokens: TokenMap,
}

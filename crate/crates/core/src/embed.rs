//! Image → embedding adaptation for the tree learners.
//!
//! Two embedders exist: a seeded Gaussian random projection, and a lookup into a
//! precomputed table stored in the `SDE1` format:
//!
//! ```text
//! b"SDE1" | n: u32 LE | d: u32 LE | n × (label: u8, d × f32 LE)
//! ```
//!
//! Record `i` belongs to dataset example `i` in canonical file order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::stream::Image;

pub const SDE1_MAGIC: &[u8; 4] = b"SDE1";
pub const DEFAULT_PROJECTION_DIM: usize = 64;

/// A fixed-length feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// Seeded linear map `x ↦ Px` with `P[i][j] ~ N(0, 1) / sqrt(input_dim)`.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    input_dim: usize,
    output_dim: usize,
    matrix: Vec<f64>,
}

impl RandomProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let matrix = (0..input_dim * output_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Ok(RandomProjection {
            input_dim,
            output_dim,
            matrix,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn project(&self, image: &Image) -> Result<Embedding> {
        let x = image.pixels();
        if x.len() != self.input_dim {
            return Err(Error::contract(format!(
                "projection expects {} inputs, image has {}",
                self.input_dim,
                x.len()
            )));
        }
        let values = self
            .matrix
            .chunks_exact(self.input_dim)
            .map(|row| row.iter().zip(x).map(|(w, &p)| w * p as f64).sum::<f64>() as f32)
            .collect();
        Ok(Embedding(values))
    }
}

/// Embeddings with labels, indexed by canonical dataset position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub labels: Vec<u8>,
    pub vectors: Vec<Embedding>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, position: usize) -> Result<&Embedding> {
        self.vectors.get(position).ok_or(Error::MissingEmbedding(position))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * (1 + 4 * self.dim));
        out.extend_from_slice(SDE1_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (label, v) in self.labels.iter().zip(&self.vectors) {
            out.push(*label);
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format(0, "file shorter than the 12-byte SDE1 header"));
        }
        if &bytes[..4] != SDE1_MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}, expected \"SDE1\"", &bytes[..4])));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let record = 1 + 4 * dim;
        let expected = 12 + n as u64 * record as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::format(
                (bytes.len() as u64).min(expected),
                format!("length mismatch: header promises {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n);
        for (i, rec) in bytes[12..].chunks_exact(record).enumerate() {
            let base = 12 + i * record;
            labels.push(rec[0]);
            let mut values = Vec::with_capacity(dim);
            for (j, raw) in rec[1..].chunks_exact(4).enumerate() {
                let x = f32::from_le_bytes(raw.try_into().unwrap());
                if !x.is_finite() {
                    return Err(Error::format(
                        (base + 1 + 4 * j) as u64,
                        format!("non-finite value {x} in record {i}"),
                    ));
                }
                values.push(x);
            }
            vectors.push(Embedding(values));
        }
        Ok(EmbeddingTable { dim, labels, vectors })
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::decode(&bytes)
}

pub fn write_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, table.encode()).map_err(|e| Error::io(path, e))
}

/// Source of embeddings for the tree learners.
#[derive(Clone, Debug)]
pub enum Embedder {
    Projection(RandomProjection),
    Lookup(EmbeddingTable),
}

impl Embedder {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Projection(p) => p.output_dim(),
            Embedder::Lookup(t) => t.dim,
        }
    }

    /// `position` is the example's canonical dataset index (used by the lookup embedder).
    pub fn embed(&self, position: usize, image: &Image) -> Result<Embedding> {
        match self {
            Embedder::Projection(p) => p.project(image),
            Embedder::Lookup(t) => t.get(position).cloned(),
        }
    }
}

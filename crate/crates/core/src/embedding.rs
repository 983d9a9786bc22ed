//! Per-field embedding tables.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub field: String,
    pub vocab: usize,
    pub dim: usize,
    pub id: ParamId,
}

/// One table per field, in declaration order. Rows are drawn uniformly from
/// `[-1/√e, 1/√e]`, the OOV row included.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub tables: Vec<EmbeddingTable>,
}

impl Embeddings {
    pub fn new<R: Rng>(store: &mut ParamStore, fields: &[(String, usize)], dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let tables = fields
            .iter()
            .map(|(name, vocab)| EmbeddingTable {
                field: name.clone(),
                vocab: *vocab,
                dim,
                id: store.add(format!("embedding.{name}"), Tensor::uniform([*vocab, dim], bound, rng)),
            })
            .collect();
        Self { dim, tables }
    }

    pub fn num_fields(&self) -> usize {
        self.tables.len()
    }

    /// Width of the concatenated instance embedding.
    pub fn output_width(&self) -> usize {
        self.tables.len() * self.dim
    }

    /// Looks up `ids` (`rows × F`, row-major) and concatenates the per-field
    /// vectors into a `rows × F·e` matrix.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[u32], rows: usize) -> Result<Var> {
        let f = self.tables.len();
        if ids.len() != rows * f {
            return Err(Error::shape("embed", &[ids.len()], &[rows, f]));
        }
        let mut parts = Vec::with_capacity(f);
        for (k, table) in self.tables.iter().enumerate() {
            let mut idx = Vec::with_capacity(rows);
            for r in 0..rows {
                let id = ids[r * f + k];
                if id as usize >= table.vocab {
                    return Err(Error::Lookup {
                        field: table.field.clone(),
                        id,
                        vocab: table.vocab,
                    });
                }
                idx.push(id as usize);
            }
            let t = tape.param(store, table.id);
            parts.push(tape.gather_rows(t, idx)?);
        }
        tape.concat_cols(&parts)
    }
}

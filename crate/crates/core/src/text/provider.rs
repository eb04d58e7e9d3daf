//! Per-sample text embedding sequences, optionally corrupted.

use std::hash::Hasher;

use fnv::FnvHasher;
use indexmap::IndexMap;

use super::{corrupt_mismatch, corrupt_partial, embed_doc};
use crate::data::{ClassCatalog, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Corruption {
    #[default]
    None,
    /// Wrong label and position in every block; per-sample seeds derive from `seed`.
    Mismatch { seed: u64 },
    /// Every block of `class` removed.
    Partial { class: String },
}

#[derive(Clone, Debug)]
pub struct TextProvider {
    pub dim: usize,
    pub catalog: ClassCatalog,
    pub corruption: Corruption,
    /// Replaces the hashed embedder for the listed sample ids.
    pub external: Option<IndexMap<String, Tensor<f32>>>,
}

fn per_sample_seed(seed: u64, id: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(id.as_bytes());
    h.finish()
}

impl TextProvider {
    pub fn new(dim: usize, catalog: &ClassCatalog) -> Self {
        Self {
            dim,
            catalog: catalog.clone(),
            corruption: Corruption::None,
            external: None,
        }
    }

    pub fn with_corruption(mut self, c: Corruption) -> Result<Self> {
        if let Corruption::Partial { class } = &c {
            if self.catalog.id_of(class).is_none() {
                return Err(Error::Usage(format!(
                    "class `{class}` is not in catalog `{}` (valid: {})",
                    self.catalog.name,
                    self.catalog.names().collect::<Vec<_>>().join(", ")
                )));
            }
        }
        self.corruption = c;
        Ok(self)
    }

    /// `[T, dim]` embedding sequence for `sample`.
    pub fn sequence(&self, sample: &Sample) -> Result<Tensor<f32>> {
        if let Some(t) = self.external.as_ref().and_then(|m| m.get(&sample.id)) {
            if self.corruption != Corruption::None {
                return Err(Error::Usage("text corruptions apply to descriptions, not external embeddings".into()));
            }
            return Ok(t.clone());
        }
        let doc = sample.doc.as_ref().ok_or_else(|| {
            Error::Usage(format!("sample `{}` has no description (texts/ missing)", sample.id))
        })?;
        let doc = match &self.corruption {
            Corruption::None => doc.clone(),
            Corruption::Mismatch { seed } => corrupt_mismatch(doc, &self.catalog, per_sample_seed(*seed, &sample.id))?,
            Corruption::Partial { class } => corrupt_partial(doc, class),
        };
        Ok(embed_doc(&doc, self.dim))
    }
}

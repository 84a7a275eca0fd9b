//! Evaluation: positive/negative cosine gap, attribute-oriented retrieval,
//! 2-D projection with clustering agreement, and oracle-judged
//! personalization and composition scores.

mod cluster;
mod gap;
mod personalize;
mod projection;
mod report;
mod retrieval;

pub use cluster::{adjusted_rand_index, cluster_agreement, kmeans, permutation_baseline, ClusterReport};
pub use gap::{cosine, cosine_gap, validation_pairs, GapReport};
pub use personalize::{
    composition_cases, composition_score, personalization_cases, personalization_score, CompositionCase,
    CompositionReport, GuidedSampler, PersonalizationCase, PersonalizationReport, Personalizer,
};
pub use projection::{project2d, Projection};
pub use report::{embedding_structure, evaluate, EvalReport, StructureReport};
pub use retrieval::{retrieval_eval, AttrRetrieval, Hit, IndexEntry, RetrievalIndex, RetrievalReport};

use crate::error::Result;
use crate::model::ModelBundle;
use crate::synthdata::{AttributeName, Image};

/// Pooled attribute embeddings of `(image, attribute)` inputs.
pub trait Embedder {
    fn pooled(&self, inputs: &[(&Image, AttributeName)]) -> Result<Vec<Vec<f64>>>;
}

const ENCODE_CHUNK: usize = 64;

impl Embedder for ModelBundle {
    fn pooled(&self, inputs: &[(&Image, AttributeName)]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(ENCODE_CHUNK) {
            let images: Vec<&Image> = chunk.iter().map(|(i, _)| *i).collect();
            let attrs: Vec<Vec<AttributeName>> = chunk.iter().map(|(_, a)| vec![*a]).collect();
            for e in self.model.encode_batch(&self.params, &images, &attrs)? {
                out.push(e.pooled.iter().map(|&v| v as f64).collect());
            }
        }
        Ok(out)
    }
}

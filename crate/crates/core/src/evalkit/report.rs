use serde::{Deserialize, Serialize};

use super::{
    cluster_agreement, composition_cases, composition_score, cosine_gap, personalization_cases, personalization_score,
    project2d, retrieval_eval, validation_pairs, ClusterReport, CompositionReport, Embedder, GapReport, GuidedSampler,
    PersonalizationReport, Projection, RetrievalReport,
};
use crate::config::{ComposeConfig, EvalConfig};
use crate::error::Result;
use crate::model::ModelBundle;
use crate::seed;
use crate::synthdata::{classify_all, render, AttrId, AttrScene, AttributeName, Image};

/// Projection of one attribute's embeddings with oracle labels and the
/// clustering agreement against them.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureReport {
    pub projection: Projection,
    pub labels: Vec<usize>,
    pub clustering: ClusterReport,
}

/// Embeds `count` random scenes under `attr`, projects to 2-D and clusters.
pub fn embedding_structure<E: Embedder + ?Sized>(
    model: &E,
    attr: AttrId,
    count: usize,
    side: usize,
    permutations: usize,
    seed: u64,
) -> Result<StructureReport> {
    let mut rng = seed::rng(seed, seed::stream::GALLERY ^ 0x0100);
    let images: Vec<Image> = (0..count).map(|_| render(&AttrScene::random(&mut rng), side)).collect::<Result<_>>()?;
    let labels: Vec<usize> = images.iter().map(|i| classify_all(i)[attr.index()].value).collect();
    let name = AttributeName::canonical(attr);
    let inputs: Vec<(&Image, AttributeName)> = images.iter().map(|i| (i, name)).collect();
    let projection = project2d(&model.pooled(&inputs)?)?;
    let clustering = cluster_agreement(&projection.points, &labels, permutations, &mut rng)?;
    Ok(StructureReport { projection, labels, clustering })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gap: GapReport,
    pub retrieval: RetrievalReport,
    pub personalization: PersonalizationReport,
    /// Object color and object shape from two different references.
    pub composition: CompositionReport,
    /// Object color from a single reference.
    pub single_reference: CompositionReport,
    /// Clustering of projected object-color embeddings.
    pub color_structure: ClusterReport,
}

/// The full evaluation suite; every random choice derives from `seed`.
pub fn evaluate(bundle: &ModelBundle, cfg: &EvalConfig, compose: &ComposeConfig, seed: u64) -> Result<EvalReport> {
    let side = bundle.model.cfg.image_side;
    let gap = cosine_gap(bundle, &validation_pairs(seed, cfg.validation_pairs)?, side, &mut seed::rng(seed, seed::stream::VALIDATION))?;
    let retrieval = retrieval_eval(bundle, cfg.gallery, cfg.queries, side, &mut seed::rng(seed, seed::stream::GALLERY))?;
    let sampler = GuidedSampler { bundle, steps: compose.steps, weight: compose.weight, text_cfg: compose.text_cfg };
    let personalization = personalization_score(&sampler, &personalization_cases(seed, cfg.cases_per_attribute), side)?;
    let composition = composition_score(
        &sampler,
        &composition_cases(seed, cfg.composition_cases, &[AttrId::ObjectColor, AttrId::ObjectShape]),
        side,
    )?;
    let single_reference = composition_score(
        &sampler,
        &composition_cases(seed ^ 1, cfg.composition_cases, &[AttrId::ObjectColor]),
        side,
    )?;
    let color_structure =
        embedding_structure(bundle, AttrId::ObjectColor, cfg.projection_points, side, cfg.permutations, seed)?.clustering;
    Ok(EvalReport { gap, retrieval, personalization, composition, single_reference, color_structure })
}

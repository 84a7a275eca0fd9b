use attrikit_tensor::TensorError;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Embedder;
use crate::error::{AttrError, Result};
use crate::losses::draw_contrastive;
use crate::seed;
use crate::synthdata::{dataset_pair, Image, PairRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub mean_pos_cos: f64,
    pub mean_neg_cos: f64,
    pub delta: f64,
    pub pair_count: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(AttrError::Tensor(TensorError::ZeroVector { op: "cosine" }));
    }
    Ok(dot / (na * nb))
}

/// Held-out pairs drawn from a stream disjoint from the training data.
pub fn validation_pairs(seed: u64, count: usize) -> Result<Vec<PairRecord>> {
    let base = seed::derive(seed, seed::stream::VALIDATION);
    (0..count).map(|i| dataset_pair(base, i, 1)).collect()
}

/// Mean cosine between the two images' embeddings of one sampled shared
/// attribute, minus the same for one sampled differing attribute.
pub fn cosine_gap<E: Embedder + ?Sized, R: Rng + ?Sized>(
    model: &E,
    pairs: &[PairRecord],
    side: usize,
    rng: &mut R,
) -> Result<GapReport> {
    if pairs.is_empty() {
        return Err(AttrError::InvalidInput("cosine gap needs at least one pair".into()));
    }
    let draws = draw_contrastive(pairs, rng)?;
    let images: Vec<(Image, Image)> = pairs
        .iter()
        .map(|p| Ok((p.image_x(side)?, p.image_y(side)?)))
        .collect::<Result<_>>()?;
    let mut inputs = Vec::with_capacity(4 * pairs.len());
    for ((x, y), d) in images.iter().zip(&draws) {
        inputs.extend([(x, d.positive), (y, d.positive), (x, d.negative), (y, d.negative)]);
    }
    let e = model.pooled(&inputs)?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for q in e.chunks(4) {
        pos += cosine(&q[0], &q[1])?;
        neg += cosine(&q[2], &q[3])?;
    }
    let n = pairs.len() as f64;
    let (mean_pos_cos, mean_neg_cos) = (pos / n, neg / n);
    Ok(GapReport { mean_pos_cos, mean_neg_cos, delta: mean_pos_cos - mean_neg_cos, pair_count: pairs.len() })
}

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::names::{AttributeName, SYNONYMS};
use super::render::{render, Image};
use super::scene::{AttrId, AttrScene};
use crate::error::{AttrError, Result};

/// One annotated attribute with its templated rationale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub name: AttributeName,
    pub desc: String,
}

/// Two linked scenes with the attributes they share and those they do not.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub scene_x: AttrScene,
    pub scene_y: AttrScene,
    pub positives: Vec<Annotation>,
    pub negatives: Vec<Annotation>,
}

impl PairRecord {
    /// Annotate a pair of scenes. Fails when they agree on everything or
    /// nothing, since both lists must be nonempty.
    pub fn annotate(scene_x: AttrScene, scene_y: AttrScene, forms: [usize; 6]) -> Result<Self> {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for id in AttrId::ALL.iter().copied() {
            let name = AttributeName::new(id, forms[id.index()])?;
            let vx = id.value_name(scene_x.value(id));
            let vy = id.value_name(scene_y.value(id));
            if vx == vy {
                positives.push(Annotation { name, desc: format!("both have {vx}") });
            } else {
                negatives.push(Annotation { name, desc: format!("{vx} vs {vy}") });
            }
        }
        if positives.is_empty() || negatives.is_empty() {
            return Err(AttrError::Data(format!(
                "pair needs at least one shared and one differing attribute, got {} and {}",
                positives.len(),
                negatives.len()
            )));
        }
        Ok(PairRecord { scene_x, scene_y, positives, negatives })
    }

    pub fn image_x(&self, side: usize) -> Result<Image> {
        render(&self.scene_x, side)
    }

    pub fn image_y(&self, side: usize) -> Result<Image> {
        render(&self.scene_y, side)
    }

    pub fn positive_names(&self) -> Vec<AttributeName> {
        self.positives.iter().map(|a| a.name).collect()
    }

    pub fn negative_names(&self) -> Vec<AttributeName> {
        self.negatives.iter().map(|a| a.name).collect()
    }
}

/// Sample a linked pair sharing at least `min_positives` of the six fields
/// and differing in at least one.
pub fn sample_pair(seed: u64, min_positives: usize) -> Result<PairRecord> {
    if !(1..=5).contains(&min_positives) {
        return Err(AttrError::InvalidInput(format!(
            "min_positives must be in 1..=5, got {min_positives}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_x = AttrScene::random(&mut rng);
    let shared = rng.random_range(min_positives..=5);
    let keep = index::sample(&mut rng, 6, shared);
    let mut values = scene_x.values();
    for id in AttrId::ALL.iter().copied() {
        if keep.iter().any(|i| i == id.index()) {
            continue;
        }
        let shift = rng.random_range(1..id.cardinality());
        values[id.index()] = (values[id.index()] + shift) % id.cardinality();
    }
    let scene_y = AttrScene::from_values(values);
    let mut forms = [0usize; 6];
    for (f, syn) in forms.iter_mut().zip(SYNONYMS) {
        *f = rng.random_range(0..syn.len());
    }
    PairRecord::annotate(scene_x, scene_y, forms)
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gap::cosine;
use super::Embedder;
use crate::error::{AttrError, Result};
use crate::synthdata::{classify_all, render, AttrId, AttrScene, AttributeName, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub image_id: usize,
    pub attr: AttrId,
    /// Unit-norm pooled embedding.
    pub embedding: Vec<f64>,
    /// Oracle reading of the attribute.
    pub value: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub image_id: usize,
    pub cosine: f64,
}

/// Gallery of pooled embeddings, one entry per (image, attribute).
#[derive(Clone, Debug, Default)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n >= 1e-12 && n.is_finite()) {
        return Err(AttrError::InvalidInput("embedding is zero or not finite".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl RetrievalIndex {
    /// Embeds every gallery image under the canonical name of each attribute.
    pub fn build<E: Embedder + ?Sized>(model: &E, gallery: &[(usize, Image)], attrs: &[AttrId]) -> Result<Self> {
        let mut index = RetrievalIndex::default();
        let labels: Vec<_> = gallery.iter().map(|(_, img)| classify_all(img)).collect();
        for &attr in attrs {
            let name = AttributeName::canonical(attr);
            let inputs: Vec<(&Image, AttributeName)> = gallery.iter().map(|(_, img)| (img, name)).collect();
            let emb = model.pooled(&inputs)?;
            for (((id, _), e), l) in gallery.iter().zip(emb).zip(&labels) {
                index.insert(IndexEntry { image_id: *id, attr, embedding: e, value: l[attr.index()].value })?;
            }
        }
        Ok(index)
    }

    pub fn insert(&mut self, mut entry: IndexEntry) -> Result<()> {
        if self.entries.iter().any(|e| e.image_id == entry.image_id && e.attr == entry.attr) {
            return Err(AttrError::InvalidInput(format!("image {} already indexed for {}", entry.image_id, entry.attr)));
        }
        entry.embedding = unit(&entry.embedding)?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self, attr: AttrId) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.attr == attr)
    }

    /// Top `k` gallery images by cosine to `query`, descending; ties go to
    /// the smaller image id.
    pub fn search(&self, attr: AttrId, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        let mut hits = self
            .entries(attr)
            .map(|e| Ok(Hit { image_id: e.image_id, cosine: cosine(&e.embedding, query)? }))
            .collect::<Result<Vec<_>>>()?;
        if hits.is_empty() {
            return Err(AttrError::EmptyIndex(attr.to_string()));
        }
        hits.sort_by(|a, b| b.cosine.total_cmp(&a.cosine).then(a.image_id.cmp(&b.image_id)));
        hits.truncate(k);
        Ok(hits)
    }

    /// Embeds `query` under `attribute` (any surface form) and searches.
    pub fn retrieve<E: Embedder + ?Sized>(&self, model: &E, query: &Image, attribute: &str, k: usize) -> Result<Vec<Hit>> {
        let name = AttributeName::parse(attribute)?;
        let e = model.pooled(&[(query, name)])?.remove(0);
        self.search(name.id, &e, k)
    }

    fn value_of(&self, attr: AttrId, image_id: usize) -> Option<usize> {
        self.entries(attr).find(|e| e.image_id == image_id).map(|e| e.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrRetrieval {
    pub attribute: String,
    /// Fraction of queries whose top hit shares the queried value.
    pub top1: f64,
    /// Expected top-1 rate of a uniformly random ranking.
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub gallery: usize,
    pub queries: usize,
    pub per_attribute: Vec<AttrRetrieval>,
}

/// Top-1 same-value rate per attribute with held-out queries against a
/// gallery of random scenes.
pub fn retrieval_eval<E: Embedder + ?Sized, R: Rng + ?Sized>(
    model: &E,
    gallery_size: usize,
    query_count: usize,
    side: usize,
    rng: &mut R,
) -> Result<RetrievalReport> {
    let gallery: Vec<(usize, Image)> = (0..gallery_size)
        .map(|i| Ok((i, render(&AttrScene::random(rng), side)?)))
        .collect::<Result<_>>()?;
    let queries: Vec<AttrScene> = (0..query_count).map(|_| AttrScene::random(rng)).collect();
    let query_images: Vec<Image> = queries.iter().map(|s| render(s, side)).collect::<Result<_>>()?;
    let index = RetrievalIndex::build(model, &gallery, AttrId::ALL)?;
    let mut per_attribute = Vec::new();
    for &attr in AttrId::ALL {
        let name = AttributeName::canonical(attr);
        let inputs: Vec<(&Image, AttributeName)> = query_images.iter().map(|i| (i, name)).collect();
        let emb = model.pooled(&inputs)?;
        let (mut hits, mut chance) = (0usize, 0.0);
        for (scene, e) in queries.iter().zip(&emb) {
            let want = scene.value(attr);
            let top = index.search(attr, e, 1)?[0];
            if index.value_of(attr, top.image_id) == Some(want) {
                hits += 1;
            }
            chance += index.entries(attr).filter(|g| g.value == want).count() as f64 / gallery_size as f64;
        }
        let n = query_count.max(1) as f64;
        per_attribute.push(AttrRetrieval { attribute: attr.name().to_string(), top1: hits as f64 / n, chance: chance / n });
    }
    Ok(RetrievalReport { gallery: gallery_size, queries: query_count, per_attribute })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelBundle, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle() -> ModelBundle {
        let cfg = ModelConfig { dim: 16, heads: 2, queries: 2, encoder_depth: 2, connector_depth: 1, decoder_depth: 1, ..ModelConfig::default() };
        ModelBundle::init(&cfg, 4).unwrap()
    }

    fn gallery(n: usize) -> Vec<(usize, Image)> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n).map(|i| (i, render(&AttrScene::random(&mut rng), 32).unwrap())).collect()
    }

    /// Reads the true attribute value off the image and one-hot encodes it.
    struct Oracle;

    impl Embedder for Oracle {
        fn pooled(&self, inputs: &[(&Image, AttributeName)]) -> Result<Vec<Vec<f64>>> {
            Ok(inputs
                .iter()
                .map(|(img, a)| {
                    let v = classify_all(img)[a.id.index()].value;
                    (0..6).map(|k| if k == v { 1.0 } else { 0.01 }).collect()
                })
                .collect())
        }
    }

    #[test]
    fn query_in_gallery_ranks_itself_first() {
        let b = bundle();
        let g = gallery(12);
        let index = RetrievalIndex::build(&b, &g, &[AttrId::ObjectColor]).unwrap();
        let hits = index.retrieve(&b, &g[7].1, "object color", 1).unwrap();
        assert_eq!(hits[0].image_id, 7);
        assert!((hits[0].cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_depth_is_a_permutation_in_rank_order() {
        let b = bundle();
        let g = gallery(10);
        let index = RetrievalIndex::build(&b, &g, &[AttrId::ObjectShape]).unwrap();
        let hits = index.retrieve(&b, &g[0].1, "foreground form", 10).unwrap();
        let mut ids: Vec<usize> = hits.iter().map(|h| h.image_id).collect();
        assert!(hits.windows(2).all(|w| w[0].cosine >= w[1].cosine));
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn ties_go_to_the_smaller_id() {
        let mut index = RetrievalIndex::default();
        for id in [5, 2, 9] {
            index.insert(IndexEntry { image_id: id, attr: AttrId::ObjectSize, embedding: vec![1.0, 1.0], value: 0 }).unwrap();
        }
        let hits = index.search(AttrId::ObjectSize, &[2.0, 2.0], 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.image_id).collect::<Vec<_>>(), vec![2, 5, 9]);
    }

    #[test]
    fn errors() {
        let b = bundle();
        let g = gallery(3);
        let index = RetrievalIndex::build(&b, &g, &[AttrId::ObjectColor]).unwrap();
        assert!(matches!(index.retrieve(&b, &g[0].1, "hair style", 1), Err(AttrError::UnknownAttribute(_))));
        assert!(matches!(index.retrieve(&b, &g[0].1, "object size", 1), Err(AttrError::EmptyIndex(_))));
    }

    #[test]
    fn ranking_is_unchanged_by_monotone_transforms() {
        let mut index = RetrievalIndex::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for id in 0..30 {
            let e: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            index.insert(IndexEntry { image_id: id, attr: AttrId::ObjectColor, embedding: e, value: 0 }).unwrap();
        }
        let q = [0.3, -0.2, 0.9, 0.1, 0.0];
        let hits = index.search(AttrId::ObjectColor, &q, 30).unwrap();
        let mut by_transform = hits.clone();
        by_transform.sort_by(|a, b| (b.cosine * 3.0).exp().total_cmp(&(a.cosine * 3.0).exp()).then(a.image_id.cmp(&b.image_id)));
        assert_eq!(hits, by_transform);
    }

    #[test]
    fn perfect_embedder_retrieves_every_value_and_chance_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = retrieval_eval(&Oracle, 120, 30, 32, &mut rng).unwrap();
        for a in &r.per_attribute {
            assert_eq!(a.top1, 1.0, "{}", a.attribute);
            let card = AttrId::parse(&a.attribute).unwrap().cardinality() as f64;
            assert!((a.chance - 1.0 / card).abs() < 0.15, "{a:?}");
        }
    }
}

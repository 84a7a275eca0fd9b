//! Attribute encoder: a joint transformer over attribute-name tokens, image
//! patches and learned queries. The query outputs are the attribute tokens;
//! their mean is the pooled embedding.

use attrikit_tensor::{ParamId, ParamStore, Real, Session, Tensor, Var};
use rand::Rng;

use crate::error::{AttrError, Result};
use crate::model::ModelConfig;
use crate::nn::{self, Block, LayerNorm, Linear};
use crate::synthdata::{AttributeName, Image, SYNONYMS};

/// Word vocabulary of the attribute-name synonyms. Each surface form is one
/// phrase: the mean of its word embeddings.
#[derive(Clone, Debug)]
pub struct AttrVocab {
    pub words: Vec<&'static str>,
    /// Word ids per phrase, in [`AttributeName::all`] order.
    pub phrases: Vec<Vec<usize>>,
}

impl AttrVocab {
    pub fn new() -> Self {
        let mut words: Vec<&'static str> = Vec::new();
        let mut phrases = Vec::new();
        for forms in SYNONYMS {
            for form in forms.iter() {
                let ids = form
                    .split_whitespace()
                    .map(|w| match words.iter().position(|x| *x == w) {
                        Some(i) => i,
                        None => {
                            words.push(w);
                            words.len() - 1
                        }
                    })
                    .collect();
                phrases.push(ids);
            }
        }
        AttrVocab { words, phrases }
    }

    pub fn phrase_id(&self, name: AttributeName) -> usize {
        let before: usize = SYNONYMS[..name.id.index()].iter().map(|f| f.len()).sum();
        before + name.form()
    }

    /// Resolve free text to a known surface form.
    pub fn lookup(&self, text: &str) -> Result<AttributeName> {
        AttributeName::parse(text).map_err(|_| AttrError::UnknownToken(text.to_string()))
    }

    /// `[phrases, words]` averaging matrix.
    fn averaging(&self) -> Vec<f64> {
        let v = self.words.len();
        let mut m = vec![0.0; self.phrases.len() * v];
        for (p, ids) in self.phrases.iter().enumerate() {
            for &w in ids {
                m[p * v + w] += 1.0 / ids.len() as f64;
            }
        }
        m
    }
}

impl Default for AttrVocab {
    fn default() -> Self {
        Self::new()
    }
}

/// Encoder output for one input: `l` tokens of width `d` plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrEmbedding {
    pub tokens: Vec<f32>,
    pub pooled: Vec<f32>,
    pub count: usize,
    pub dim: usize,
}

impl AttrEmbedding {
    pub fn from_tokens(tokens: Vec<f32>, count: usize, dim: usize) -> Self {
        let pooled = pool(&tokens, count, dim);
        AttrEmbedding { tokens, pooled, count, dim }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

/// Arithmetic mean over the token axis of a row-major `[count, dim]` block.
pub fn pool(tokens: &[f32], count: usize, dim: usize) -> Vec<f32> {
    assert!(count >= 1 && tokens.len() == count * dim, "pool needs count >= 1 full rows");
    (0..dim)
        .map(|j| {
            let s: f64 = (0..count).map(|i| tokens[i * dim + j] as f64).sum();
            (s / count as f64) as f32
        })
        .collect()
}

pub struct EncodedVars {
    /// `[B, l, d]`
    pub tokens: Var,
    /// `[B, d]`
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub vocab: AttrVocab,
    cfg: ModelConfig,
    words: ParamId,
    segment: ParamId,
    patch_in: Linear,
    queries: ParamId,
    joint: Vec<Block>,
    connector: Vec<Block>,
    ln_out: LayerNorm,
    out: Linear,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let vocab = AttrVocab::new();
        let words = store.add("enc.words", Tensor::randn(&[vocab.words.len(), d], 1.0, rng));
        let segment = store.add("enc.segment", Tensor::randn(&[d], 0.5, rng));
        let patch_in = Linear::new(store, "enc.patch_in", cfg.patch_dim(), d, 1.0, rng);
        let queries = store.add("enc.queries", Tensor::randn(&[cfg.queries, d], 1.0, rng));
        let joint_depth = cfg.encoder_depth - cfg.connector_depth;
        let joint = (0..joint_depth)
            .map(|i| Block::new(store, &format!("enc.joint{i}"), d, cfg.heads, rng))
            .collect();
        let connector = (0..cfg.connector_depth)
            .map(|i| Block::new(store, &format!("enc.connector{i}"), d, cfg.heads, rng))
            .collect();
        let ln_out = LayerNorm::new(store, "enc.ln_out", d);
        let out = Linear::new(store, "enc.out", d, d, 1.0, rng);
        Encoder {
            vocab,
            cfg: cfg.clone(),
            words,
            segment,
            patch_in,
            queries,
            joint,
            connector,
            ln_out,
            out,
        }
    }

    /// Parameters kept frozen during the warm-up phase of training: everything
    /// before the query-only connector.
    pub fn body_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.words, self.segment, self.queries];
        p.extend(self.patch_in.params());
        for b in &self.joint {
            p.extend(b.params());
        }
        p
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        images: &[&Image],
        attrs: &[Vec<AttributeName>],
    ) -> Result<EncodedVars> {
        let batch = images.len();
        if batch == 0 || attrs.len() != batch {
            return Err(AttrError::InvalidInput(format!(
                "encoder needs one attribute set per image, got {batch} images and {} sets",
                attrs.len()
            )));
        }
        let cfg = &self.cfg;
        let (d, side) = (cfg.dim, cfg.image_side);
        let grid = side / cfg.patch_size;
        let npatch = grid * grid;

        let mut sets = Vec::with_capacity(batch);
        for a in attrs {
            if a.is_empty() {
                return Err(AttrError::InvalidInput("attribute set is empty".into()));
            }
            let mut ids: Vec<usize> = a.iter().map(|n| self.vocab.phrase_id(*n)).collect();
            ids.sort_unstable();
            ids.dedup();
            sets.push(ids);
        }
        let m = sets.iter().map(Vec::len).max().unwrap_or(1);
        let mut phrase_ids = Vec::with_capacity(batch * m);
        let mut mask = Vec::with_capacity(batch * (m + npatch + cfg.queries));
        for ids in &sets {
            phrase_ids.extend(ids.iter().copied());
            phrase_ids.extend(std::iter::repeat_n(ids[0], m - ids.len()));
            mask.extend((0..m).map(|i| i < ids.len()));
            mask.extend(std::iter::repeat_n(true, npatch + cfg.queries));
        }

        let words = s.param(self.words)?;
        let avg = nn::constant(
            s,
            &[self.vocab.phrases.len(), self.vocab.words.len()],
            &self.vocab.averaging(),
        )?;
        let table = s.matmul(avg, words)?;
        let attr_tok = s.embedding(table, &phrase_ids)?;
        let attr_tok = s.reshape(attr_tok, &[batch, m, d])?;
        let seg = s.param(self.segment)?;
        let attr_tok = s.add_bias(attr_tok, seg)?;

        let pixels = image_batch(images, side)?;
        let patches = nn::patchify(&pixels, batch, side, cfg.patch_size);
        let patches = nn::constant(s, &[batch, npatch, cfg.patch_dim()], &patches)?;
        let patches = self.patch_in.forward(s, patches)?;
        let pos = nn::constant(s, &[npatch, d], &nn::sinusoidal_2d(grid, d))?;
        let patches = s.add_bias(patches, pos)?;

        let q = s.param(self.queries)?;
        let q = s.expand_batch(q, batch)?;

        let mut x = s.concat(&[attr_tok, patches, q], 1)?;
        for b in &self.joint {
            x = b.forward(s, x, Some(&mask))?;
        }
        let mut x = s.slice(x, 1, m + npatch, cfg.queries)?;
        for b in &self.connector {
            x = b.forward(s, x, None)?;
        }
        let x = self.ln_out.forward(s, x)?;
        let tokens = self.out.forward(s, x)?;
        let pooled = s.mean_axis(tokens, 1)?;
        Ok(EncodedVars { tokens, pooled })
    }
}

/// Flatten images into one f64 buffer, checking their size.
pub(crate) fn image_batch(images: &[&Image], side: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * side * side * 3);
    for img in images {
        if img.height != side || img.width != side {
            return Err(AttrError::InvalidInput(format!(
                "expected {side}x{side} images, got {}x{}",
                img.height, img.width
            )));
        }
        out.extend(img.data.iter().map(|&v| v as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::synthdata::{render, AttrId, AttrScene};
    use proptest::prelude::*;

    fn tiny() -> ModelConfig {
        ModelConfig { dim: 16, heads: 2, queries: 3, encoder_depth: 2, connector_depth: 1, decoder_depth: 1, ..ModelConfig::default() }
    }

    #[test]
    fn vocab_covers_every_surface_form() {
        let v = AttrVocab::new();
        assert_eq!(v.phrases.len(), AttributeName::all().count());
        for n in AttributeName::all() {
            let words: Vec<&str> = v.phrases[v.phrase_id(n)].iter().map(|&i| v.words[i]).collect();
            assert_eq!(words.join(" "), n.surface());
        }
        assert!(matches!(v.lookup("hairstyle"), Err(AttrError::UnknownToken(_))));
    }

    #[test]
    fn pooled_is_mean_of_tokens() {
        let (model, store) = Model::init::<f64>(&tiny(), 3);
        let img = render(&AttrScene::enumerate()[5], 32).unwrap();
        let name = AttributeName::canonical(AttrId::ObjectColor);
        let e = model.encode(&store, &img, &[name]).unwrap();
        let brute = pool(&e.tokens, e.count, e.dim);
        for (a, b) in e.pooled.iter().zip(brute) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attribute_order_does_not_matter() {
        let (model, store) = Model::init::<f64>(&tiny(), 4);
        let img = render(&AttrScene::enumerate()[77], 32).unwrap();
        let a = AttributeName::canonical(AttrId::ObjectShape);
        let b = AttributeName::new(AttrId::BackgroundColor, 2).unwrap();
        let c = AttributeName::new(AttrId::ObjectSize, 1).unwrap();
        let e1 = model.encode(&store, &img, &[a, b, c]).unwrap();
        let e2 = model.encode(&store, &img, &[c, a, b]).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn padding_does_not_leak_between_items() {
        let (model, store) = Model::init::<f64>(&tiny(), 5);
        let img = render(&AttrScene::enumerate()[9], 32).unwrap();
        let one = vec![AttributeName::canonical(AttrId::ObjectColor)];
        let three = vec![
            AttributeName::canonical(AttrId::ObjectShape),
            AttributeName::canonical(AttrId::ObjectSize),
            AttributeName::canonical(AttrId::ImageBrightness),
        ];
        let alone = model.encode(&store, &img, &one).unwrap();
        let mut s = Session::new(&store, false);
        let out = model.encoder.forward(&mut s, &[&img, &img], &[one, three]).unwrap();
        let pooled = &s.value(out.pooled).data()[..alone.dim];
        for (a, b) in pooled.iter().zip(&alone.pooled) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_attribute_set_is_rejected() {
        let (model, store) = Model::init::<f64>(&tiny(), 6);
        let img = render(&AttrScene::enumerate()[0], 32).unwrap();
        assert!(model.encode(&store, &img, &[]).is_err());
    }

    #[test]
    fn pool_of_identical_rows_is_the_row() {
        let row = [0.5f32, -1.0, 2.0];
        let tokens: Vec<f32> = row.iter().cycle().take(12).copied().collect();
        assert_eq!(pool(&tokens, 4, 3), row);
    }

    #[test]
    fn pool_of_opposite_rows_is_zero() {
        let tokens = [1.0f32, -2.0, 3.0, -1.0, 2.0, -3.0];
        assert_eq!(pool(&tokens, 2, 3), vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn pool_matches_column_means(data in prop::collection::vec(-10.0f32..10.0, 8 * 64)) {
            let got = pool(&data, 8, 64);
            for j in 0..64 {
                let mut s = 0.0f64;
                for i in 0..8 {
                    s += data[i * 64 + j] as f64;
                }
                prop_assert!((got[j] as f64 - s / 8.0).abs() < 1e-5);
            }
        }

        #[test]
        fn pool_is_permutation_invariant(
            data in prop::collection::vec(-10.0f32..10.0, 8 * 4),
            perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let shuffled: Vec<f32> = perm.iter().flat_map(|&i| data[i * 4..(i + 1) * 4].to_vec()).collect();
            let a = pool(&data, 8, 4);
            let b = pool(&shuffled, 8, 4);
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}

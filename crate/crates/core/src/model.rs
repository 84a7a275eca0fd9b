use std::collections::HashMap;
use std::path::Path;

use attrikit_tensor::{checkpoint, ParamStore, Real, Session, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{AttrEmbedding, Encoder};
use crate::error::{AttrError, Result};
use crate::generator::{AttrInput, Decoder};
use crate::nn;
use crate::prompt::PromptSpec;
use crate::seed;
use crate::synthdata::{AttributeName, Image};

/// Version of the configuration and checkpoint layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    /// Attribute tokens per embedding.
    pub queries: usize,
    pub encoder_depth: usize,
    /// Trailing encoder blocks that see only the query tokens.
    pub connector_depth: usize,
    pub decoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 32,
            patch_size: 4,
            dim: 64,
            heads: 4,
            queries: 8,
            encoder_depth: 4,
            connector_depth: 2,
            decoder_depth: 6,
        }
    }
}

impl ModelConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn image_len(&self) -> usize {
        self.image_side * self.image_side * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AttrError::InvalidConfig(m));
        if self.image_side < crate::synthdata::MIN_SIDE {
            return bad(format!("image_side {} is below {}", self.image_side, crate::synthdata::MIN_SIDE));
        }
        if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return bad(format!("image_side {} is not divisible by patch_size {}", self.image_side, self.patch_size));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(4) {
            return bad(format!("dim {} must be a multiple of 4 and of heads {}", self.dim, self.heads));
        }
        if self.queries == 0 {
            return bad("queries must be at least 1".into());
        }
        if self.connector_depth > self.encoder_depth || self.decoder_depth == 0 {
            return bad("connector_depth must not exceed encoder_depth and decoder_depth must be positive".into());
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<f64> {
        [
            self.image_side,
            self.patch_size,
            self.dim,
            self.heads,
            self.queries,
            self.encoder_depth,
            self.connector_depth,
            self.decoder_depth,
        ]
        .map(|v| v as f64)
        .to_vec()
    }

    fn from_meta(v: &[f32]) -> Result<Self> {
        if v.len() != 8 {
            return Err(AttrError::CheckpointMismatch("model description has the wrong length".into()));
        }
        let u = |i: usize| v[i] as usize;
        Ok(ModelConfig {
            image_side: u(0),
            patch_size: u(1),
            dim: u(2),
            heads: u(3),
            queries: u(4),
            encoder_depth: u(5),
            connector_depth: u(6),
            decoder_depth: u(7),
        })
    }
}

/// Parameter layout of the encoder and decoder. The values live in a
/// separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Velocity query: attribute tokens (`None` = null) and prompt (`None` = null).
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    pub attr: Option<&'a AttrEmbedding>,
    pub prompt: Option<PromptSpec>,
}

impl Condition<'_> {
    pub const NULL: Condition<'static> = Condition { attr: None, prompt: None };
}

impl Model {
    /// Fresh model with weights drawn from `seed`.
    pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> (Model, ParamStore<T>) {
        let mut rng = seed::rng(seed, seed::stream::INIT);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg, &mut rng);
        let decoder = Decoder::new(&mut store, cfg, &mut rng);
        (Model { cfg: cfg.clone(), encoder, decoder }, store)
    }

    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &Image, attrs: &[AttributeName]) -> Result<AttrEmbedding> {
        Ok(self.encode_batch(store, &[image], &[attrs.to_vec()])?.remove(0))
    }

    pub fn encode_batch<T: Real>(
        &self,
        store: &ParamStore<T>,
        images: &[&Image],
        attrs: &[Vec<AttributeName>],
    ) -> Result<Vec<AttrEmbedding>> {
        let mut s = Session::new(store, false);
        let out = self.encoder.forward(&mut s, images, attrs)?;
        let (l, d) = (self.cfg.queries, self.cfg.dim);
        let tokens = s.value(out.tokens).data();
        Ok((0..images.len())
            .map(|b| {
                let rows: Vec<f32> = tokens[b * l * d..(b + 1) * l * d].iter().map(|v| v.as_f64() as f32).collect();
                AttrEmbedding::from_tokens(rows, l, d)
            })
            .collect())
    }

    /// Velocities in HWC image layout for a batch of states sharing one time.
    pub fn velocity_batch<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[&[f32]],
        t: f64,
        conds: &[Condition<'_>],
    ) -> Result<Vec<Vec<f32>>> {
        let batch = x.len();
        if conds.len() != batch {
            return Err(AttrError::InvalidInput("one condition per state is required".into()));
        }
        let cfg = &self.cfg;
        let (l, d, side) = (cfg.queries, cfg.dim, cfg.image_side);
        let mut flat = Vec::with_capacity(batch * cfg.image_len());
        for xi in x {
            if xi.len() != cfg.image_len() {
                return Err(AttrError::InvalidInput(format!("state has {} values, expected {}", xi.len(), cfg.image_len())));
            }
            flat.extend(xi.iter().map(|&v| v as f64));
        }
        let grid = side / cfg.patch_size;
        let mut s = Session::new(store, false);
        let xt = nn::constant(&mut s, &[batch, grid * grid, cfg.patch_dim()], &nn::patchify(&flat, batch, side, cfg.patch_size))?;
        let null: Vec<bool> = conds.iter().map(|c| c.attr.is_none()).collect();
        let prompts: Vec<Option<PromptSpec>> = conds.iter().map(|c| c.prompt).collect();
        let attr = if null.iter().all(|&n| n) {
            AttrInput::Null
        } else {
            let mut tok = Vec::with_capacity(batch * l * d);
            for c in conds {
                match c.attr {
                    Some(e) if e.count == l && e.dim == d => tok.extend(e.tokens.iter().map(|&v| v as f64)),
                    Some(e) => {
                        return Err(AttrError::InvalidInput(format!(
                            "attribute embedding is {}x{}, model expects {l}x{d}",
                            e.count, e.dim
                        )))
                    }
                    None => tok.extend(std::iter::repeat_n(0.0, l * d)),
                }
            }
            let tokens = nn::constant(&mut s, &[batch, l, d], &tok)?;
            AttrInput::Tokens { tokens, null: &null }
        };
        let times = vec![t; batch];
        let v = self.decoder.forward(&mut s, xt, &times, attr, &prompts)?;
        let v: Vec<f64> = s.value(v).to_f64_vec();
        let img = nn::unpatchify(&v, batch, side, cfg.patch_size);
        Ok(img.chunks(cfg.image_len()).map(|c| c.iter().map(|&v| v as f32).collect()).collect())
    }
}

/// Model layout plus trained weights.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: Model,
    pub params: ParamStore<f32>,
}

impl ModelBundle {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Model::init(cfg, seed);
        Ok(ModelBundle { model, params })
    }

    /// Metadata tensors stored next to the weights in every checkpoint.
    pub fn meta_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        vec![
            ("meta.schema".into(), Tensor::scalar(SCHEMA_VERSION as f32)),
            ("meta.model".into(), Tensor::from_f64(&[8], &self.model.cfg.to_meta()).expect("fixed length")),
        ]
    }

    pub fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut t = self.meta_tensors();
        t.extend(self.params.named_f32());
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.tensors())?;
        Ok(())
    }

    pub fn from_tensors(map: &HashMap<String, Tensor<f32>>) -> Result<Self> {
        let schema = map
            .get("meta.schema")
            .ok_or_else(|| AttrError::CheckpointMismatch("missing schema version".into()))?
            .item();
        if schema as u32 != SCHEMA_VERSION {
            return Err(AttrError::CheckpointMismatch(format!("schema {schema}, expected {SCHEMA_VERSION}")));
        }
        let meta = map
            .get("meta.model")
            .ok_or_else(|| AttrError::CheckpointMismatch("missing model description".into()))?;
        let cfg = ModelConfig::from_meta(meta.data())?;
        let mut bundle = ModelBundle::init(&cfg, 0)?;
        bundle.params.load_named(map)?;
        Ok(bundle)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load_map(path)?)
    }

    pub fn encode(&self, image: &Image, attrs: &[AttributeName]) -> Result<AttrEmbedding> {
        self.model.encode(&self.params, image, attrs)
    }

    pub fn velocity_batch(&self, x: &[&[f32]], t: f64, conds: &[Condition<'_>]) -> Result<Vec<Vec<f32>>> {
        self.model.velocity_batch(&self.params, x, t, conds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig { patch_size: 5, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { connector_depth: 9, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bundle_round_trips_through_a_checkpoint() {
        let cfg = ModelConfig { dim: 16, heads: 2, queries: 2, encoder_depth: 1, connector_depth: 1, decoder_depth: 1, ..ModelConfig::default() };
        let bundle = ModelBundle::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.atk");
        bundle.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back.model.cfg, cfg);
        assert_eq!(back.params.named_f32(), bundle.params.named_f32());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::default();
        let a = ModelBundle::init(&cfg, 1).unwrap();
        let b = ModelBundle::init(&cfg, 1).unwrap();
        let c = ModelBundle::init(&cfg, 2).unwrap();
        assert_eq!(a.params.named_f32(), b.params.named_f32());
        assert_ne!(a.params.named_f32(), c.params.named_f32());
    }
}

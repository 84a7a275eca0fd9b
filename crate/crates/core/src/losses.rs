//! Training objectives: flow-matching reconstruction of one image of a pair
//! from the other image's shared-attribute embedding, and a four-term pairwise
//! contrastive loss over pooled embeddings.

use attrikit_tensor::{Real, Session, Var};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::image_batch;
use crate::error::{AttrError, Result};
use crate::generator::{fm_loss_graph, noise, AttrInput, FlowTargets};
use crate::model::{Model, ModelBundle};
use crate::prompt::PromptSpec;
use crate::synthdata::{AttrId, AttributeName, Image, PairRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_gen: f64,
    pub lambda_con: f64,
    /// Temperature of the contrastive similarity.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_gen: 1.0, lambda_con: 0.01, tau: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_gen) || !ok(self.lambda_con) {
            return Err(AttrError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(AttrError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// How generative-loss inputs are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSampling {
    /// Probability of replacing the attribute embedding by the null block.
    pub attr_drop: f64,
    /// Probability of replacing the caption by the null prompt.
    pub prompt_drop: f64,
    /// Probability that a shared field is also written into the caption.
    /// Differing fields are always written.
    pub caption_shared_rate: f64,
}

impl Default for GenSampling {
    fn default() -> Self {
        GenSampling { attr_drop: 0.1, prompt_drop: 0.1, caption_shared_rate: 0.25 }
    }
}

impl GenSampling {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("attr_drop", self.attr_drop),
            ("prompt_drop", self.prompt_drop),
            ("caption_shared_rate", self.caption_shared_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AttrError::InvalidConfig(format!("{name} must be a probability, got {p}")));
            }
        }
        Ok(())
    }
}

/// Random choices behind one generative-loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct GenDraw {
    /// Reference is image y and the target image x.
    pub reverse: bool,
    pub t: f64,
    pub noise: Vec<f32>,
    pub drop_attr: bool,
    pub caption: Option<PromptSpec>,
}

/// Random choices behind one contrastive-loss term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConDraw {
    pub positive: AttributeName,
    pub negative: AttributeName,
}

pub fn draw_generative<R: Rng + ?Sized>(
    pairs: &[PairRecord],
    policy: &GenSampling,
    image_len: usize,
    rng: &mut R,
) -> Vec<GenDraw> {
    pairs
        .iter()
        .map(|p| {
            let reverse = rng.random_bool(0.5);
            let t = rng.random_range(0.0..1.0);
            let noise = noise(image_len, rng);
            let drop_attr = rng.random_bool(policy.attr_drop);
            let drop_prompt = rng.random_bool(policy.prompt_drop);
            let target = if reverse { p.scene_x } else { p.scene_y };
            let mut fields: Vec<AttrId> = p.negatives.iter().map(|a| a.name.id).collect();
            for a in &p.positives {
                if rng.random_bool(policy.caption_shared_rate) {
                    fields.push(a.name.id);
                }
            }
            let caption = (!drop_prompt).then(|| PromptSpec::from_scene(&target, &fields));
            GenDraw { reverse, t, noise, drop_attr, caption }
        })
        .collect()
}

/// One shared and one differing attribute per pair, uniformly.
pub fn draw_contrastive<R: Rng + ?Sized>(pairs: &[PairRecord], rng: &mut R) -> Result<Vec<ConDraw>> {
    pairs
        .iter()
        .map(|p| {
            let pos = p.positives.choose(rng);
            let neg = p.negatives.choose(rng);
            match (pos, neg) {
                (Some(a), Some(b)) => Ok(ConDraw { positive: a.name, negative: b.name }),
                _ => Err(AttrError::Data("contrastive loss needs a shared and a differing attribute".into())),
            }
        })
        .collect()
}

fn render_pairs(pairs: &[PairRecord], side: usize) -> Result<(Vec<Image>, Vec<Image>)> {
    let xs = pairs.iter().map(|p| p.image_x(side)).collect::<Result<Vec<_>>>()?;
    let ys = pairs.iter().map(|p| p.image_y(side)).collect::<Result<Vec<_>>>()?;
    Ok((xs, ys))
}

/// Flow-matching loss of reconstructing each pair's target image from the
/// reference image encoded with all shared attributes.
pub fn generative_loss<T: Real>(
    s: &mut Session<T>,
    model: &Model,
    pairs: &[PairRecord],
    draws: &[GenDraw],
) -> Result<Var> {
    if pairs.is_empty() || draws.len() != pairs.len() {
        return Err(AttrError::InvalidInput("one draw per pair is required".into()));
    }
    let cfg = &model.cfg;
    let (xs, ys) = render_pairs(pairs, cfg.image_side)?;
    let mut refs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (i, d) in draws.iter().enumerate() {
        let (r, g) = if d.reverse { (&ys[i], &xs[i]) } else { (&xs[i], &ys[i]) };
        refs.push(r);
        targets.push(g);
    }
    let attrs: Vec<Vec<AttributeName>> = pairs.iter().map(|p| p.positive_names()).collect();
    let enc = model.encoder.forward(s, &refs, &attrs)?;

    let x1 = image_batch(&targets, cfg.image_side)?;
    let x0: Vec<f64> = draws.iter().flat_map(|d| d.noise.iter().map(|&v| v as f64)).collect();
    let t: Vec<f64> = draws.iter().map(|d| d.t).collect();
    let ft = FlowTargets::new(cfg, &x1, &x0, &t);
    let null: Vec<bool> = draws.iter().map(|d| d.drop_attr).collect();
    let prompts: Vec<Option<PromptSpec>> = draws.iter().map(|d| d.caption).collect();
    let attr = AttrInput::Tokens { tokens: enc.tokens, null: &null };
    fm_loss_graph(s, &model.decoder, cfg, &ft, attr, &prompts)
}

/// Temperature-scaled cosines `[B, 4]`, columns ordered
/// `(+,+), (+,-), (-,+), (-,-)`: x-side attribute first, y-side second.
pub fn contrastive_logits<T: Real>(
    s: &mut Session<T>,
    model: &Model,
    pairs: &[PairRecord],
    draws: &[ConDraw],
    tau: f64,
) -> Result<Var> {
    if pairs.is_empty() || draws.len() != pairs.len() {
        return Err(AttrError::InvalidInput("one draw per pair is required".into()));
    }
    let b = pairs.len();
    let (xs, ys) = render_pairs(pairs, model.cfg.image_side)?;
    let mut images: Vec<&Image> = Vec::with_capacity(4 * b);
    let mut attrs = Vec::with_capacity(4 * b);
    for (imgs, pick) in [
        (&xs, true),
        (&ys, true),
        (&xs, false),
        (&ys, false),
    ] {
        for (img, d) in imgs.iter().zip(draws) {
            images.push(img);
            attrs.push(vec![if pick { d.positive } else { d.negative }]);
        }
    }
    let enc = model.encoder.forward(s, &images, &attrs)?;
    let part = |s: &mut Session<T>, k: usize| s.slice(enc.pooled, 0, k * b, b);
    let (xp, yp, xn, yn) = (part(s, 0)?, part(s, 1)?, part(s, 2)?, part(s, 3)?);
    let mut cols = Vec::with_capacity(4);
    for (a, c) in [(xp, yp), (xp, yn), (xn, yp), (xn, yn)] {
        let cos = s.cosine(a, c)?;
        cols.push(s.reshape(cos, &[b, 1])?);
    }
    let cat = s.concat(&cols, 1)?;
    Ok(s.scale(cat, 1.0 / tau)?)
}

/// `-log(ψ++ / (ψ++ + ψ+- + ψ-+ + ψ--))` averaged over pairs, evaluated as
/// `logsumexp(logits) - logit++`.
pub fn contrastive_loss<T: Real>(
    s: &mut Session<T>,
    model: &Model,
    pairs: &[PairRecord],
    draws: &[ConDraw],
    tau: f64,
) -> Result<Var> {
    let logits = contrastive_logits(s, model, pairs, draws, tau)?;
    contrastive_loss_from_logits(s, logits)
}

/// Mean over rows of `logsumexp(row) - row[0]` for `[B, 4]` logits.
pub fn contrastive_loss_from_logits<T: Real>(s: &mut Session<T>, logits: Var) -> Result<Var> {
    let b = s.shape(logits)[0];
    let lse = s.logsumexp(logits)?;
    let first = s.slice(logits, 1, 0, 1)?;
    let first = s.reshape(first, &[b])?;
    let per = s.sub(lse, first)?;
    Ok(s.mean(per)?)
}

/// Logarithm of the similarity `ψ = exp(cos(pool(E(I_x, a_x)), pool(E(I_y, a_y))) / τ)`.
pub fn log_psi(
    bundle: &ModelBundle,
    image_x: &Image,
    attr_x: AttributeName,
    image_y: &Image,
    attr_y: AttributeName,
    tau: f64,
) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(AttrError::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    let mut s = Session::new(&bundle.params, false);
    let enc = bundle
        .model
        .encoder
        .forward(&mut s, &[image_x, image_y], &[vec![attr_x], vec![attr_y]])?;
    let a = s.slice(enc.pooled, 0, 0, 1)?;
    let b = s.slice(enc.pooled, 0, 1, 1)?;
    let cos = s.cosine(a, b)?;
    Ok(s.value(cos).item().as_f64() / tau)
}

pub fn psi(
    bundle: &ModelBundle,
    image_x: &Image,
    attr_x: AttributeName,
    image_y: &Image,
    attr_y: AttributeName,
    tau: f64,
) -> Result<f64> {
    Ok(log_psi(bundle, image_x, attr_x, image_y, attr_y, tau)?.exp())
}

/// Graph handles of the weighted objective and its terms.
pub struct LossTerms {
    pub total: Var,
    pub generative: Var,
    pub contrastive: Option<Var>,
}

/// `λ_gen L_gen + λ_con L_con`. The contrastive branch is skipped entirely
/// when `con` is `None` or `λ_con` is zero.
pub fn total_loss<T: Real>(
    s: &mut Session<T>,
    model: &Model,
    pairs: &[PairRecord],
    gen: &[GenDraw],
    con: Option<&[ConDraw]>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let generative = generative_loss(s, model, pairs, gen)?;
    let weighted = s.scale(generative, cfg.lambda_gen)?;
    match con {
        Some(draws) if cfg.lambda_con > 0.0 => {
            let c = contrastive_loss(s, model, pairs, draws, cfg.tau)?;
            let wc = s.scale(c, cfg.lambda_con)?;
            let total = s.add(weighted, wc)?;
            Ok(LossTerms { total, generative, contrastive: Some(c) })
        }
        _ => Ok(LossTerms { total: weighted, generative, contrastive: None }),
    }
}

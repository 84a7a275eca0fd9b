use attrikit_tensor::{ParamId, ParamStore, Real, Session, Tensor, Var};
use rand::Rng;

use crate::error::{AttrError, Result};
use crate::model::ModelConfig;
use crate::nn::{self, Attention, LayerNorm, Linear, Mlp};
use crate::prompt::{caption_vocab, PromptSpec};

/// Self-attention, then decoupled cross-attention (one query map, separate
/// key/value maps for the prompt and for the attribute tokens, outputs
/// summed), then an MLP.
#[derive(Clone, Debug)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_q: Linear,
    prompt_k: Linear,
    prompt_v: Linear,
    attr_k: Linear,
    attr_v: Linear,
    cross_o: Linear,
    ln3: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl DecoderBlock {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore<T>, part: &str, gain: f64, rng: &mut R| {
            Linear::new(store, &format!("{name}.{part}"), d, d, gain, rng)
        };
        DecoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: Attention::new(store, &format!("{name}.self"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_q: lin(store, "cross.q", 1.0, rng),
            prompt_k: lin(store, "cross.prompt_k", 1.0, rng),
            prompt_v: lin(store, "cross.prompt_v", 1.0, rng),
            attr_k: lin(store, "cross.attr_k", 1.0, rng),
            attr_v: lin(store, "cross.attr_v", 1.0, rng),
            cross_o: lin(store, "cross.o", 0.5, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, rng),
            heads,
        }
    }

    fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x: Var,
        prompt: Var,
        prompt_mask: &[bool],
        attr: Var,
    ) -> Result<Var> {
        let h = self.ln1.forward(s, x)?;
        let a = self.self_attn.forward(s, h, h, None)?;
        let x = s.add(x, a)?;

        let h = self.ln2.forward(s, x)?;
        let q = self.cross_q.forward(s, h)?;
        let pk = self.prompt_k.forward(s, prompt)?;
        let pv = self.prompt_v.forward(s, prompt)?;
        let from_prompt = s.attention(q, pk, pv, self.heads, Some(prompt_mask))?;
        let ak = self.attr_k.forward(s, attr)?;
        let av = self.attr_v.forward(s, attr)?;
        let from_attr = s.attention(q, ak, av, self.heads, None)?;
        let c = s.add(from_prompt, from_attr)?;
        let c = self.cross_o.forward(s, c)?;
        let x = s.add(x, c)?;

        let h = self.ln3.forward(s, x)?;
        let m = self.mlp.forward(s, h)?;
        Ok(s.add(x, m)?)
    }
}

/// Assumed standard deviation of pixel values.
const DATA_STD: f64 = 0.5;

/// Standard deviation of `x_t = (1-t) x0 + t x1` for unit noise.
fn path_std(t: f64) -> f64 {
    ((1.0 - t).powi(2) + (t * DATA_STD).powi(2)).sqrt()
}

/// Least-squares coefficient of `x_t` in the target `x1 - x0`.
pub(crate) fn skip_scale(t: f64) -> f64 {
    (t * DATA_STD * DATA_STD - (1.0 - t)) / path_std(t).powi(2)
}

/// Standard deviation of the target left after removing the skip part.
fn out_scale(t: f64) -> f64 {
    let resid = DATA_STD * DATA_STD + 1.0 - skip_scale(t).powi(2) * path_std(t).powi(2);
    resid.max(0.0).sqrt()
}

/// Attribute conditioning for a decoder batch.
pub enum AttrInput<'a> {
    /// Every item uses the learned null block.
    Null,
    /// `[B, l, d]` tokens; items flagged in `null` use the null block instead.
    Tokens { tokens: Var, null: &'a [bool] },
}

/// Velocity network over patch tokens. Inputs and outputs are in patch layout
/// `[B, T, p*p*3]`. The transformer sees `x_t` rescaled to unit variance and
/// predicts the part of the velocity not linear in `x_t`.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: ModelConfig,
    patch_in: Linear,
    time1: Linear,
    time2: Linear,
    prompt_words: ParamId,
    null_prompt: ParamId,
    null_attr: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_out: LayerNorm,
    out: Linear,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let patch_in = Linear::new(store, "dec.patch_in", cfg.patch_dim(), d, 1.0, rng);
        let time1 = Linear::new(store, "dec.time1", d, d, 1.0, rng);
        let time2 = Linear::new(store, "dec.time2", d, d, 1.0, rng);
        let prompt_words = store.add("dec.prompt_words", Tensor::randn(&[caption_vocab().len(), d], 1.0, rng));
        let null_prompt = store.add("dec.null_prompt", Tensor::randn(&[1, d], 1.0, rng));
        let null_attr = store.add("dec.null_attr", Tensor::randn(&[cfg.queries, d], 1.0, rng));
        let blocks = (0..cfg.decoder_depth)
            .map(|i| DecoderBlock::new(store, &format!("dec.block{i}"), d, cfg.heads, rng))
            .collect();
        let ln_out = LayerNorm::new(store, "dec.ln_out", d);
        let out = Linear::zeros(store, "dec.out", d, cfg.patch_dim());
        Decoder {
            cfg: cfg.clone(),
            patch_in,
            time1,
            time2,
            prompt_words,
            null_prompt,
            null_attr,
            blocks,
            ln_out,
            out,
        }
    }

    /// `x_t: [B, T, p*p*3]`, `t` per item, `prompts` per item (`None` = null).
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x_t: Var,
        t: &[f64],
        attr: AttrInput<'_>,
        prompts: &[Option<PromptSpec>],
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let d = cfg.dim;
        let grid = cfg.image_side / cfg.patch_size;
        let npatch = grid * grid;
        let batch = t.len();
        if s.shape(x_t) != [batch, npatch, cfg.patch_dim()] || prompts.len() != batch {
            return Err(AttrError::InvalidInput(format!(
                "decoder batch mismatch: x_t {:?}, {} times, {} prompts",
                s.shape(x_t),
                batch,
                prompts.len()
            )));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AttrError::InvalidInput(format!("time {bad} outside [0, 1]")));
        }

        let per_item = npatch * cfg.patch_dim();
        let shape = [batch, npatch, cfg.patch_dim()];
        let scales = |f: fn(f64) -> f64| -> Vec<f64> { t.iter().flat_map(|&v| std::iter::repeat_n(f(v), per_item)).collect() };
        let c_in = nn::constant(s, &shape, &scales(|t| 1.0 / path_std(t)))?;
        let c_skip = nn::constant(s, &shape, &scales(skip_scale))?;
        let c_out = nn::constant(s, &shape, &scales(out_scale))?;
        let x_in = s.mul(x_t, c_in)?;
        let x = self.patch_in.forward(s, x_in)?;
        let pos = nn::constant(s, &[npatch, d], &nn::sinusoidal_2d(grid, d))?;
        let x = s.add_bias(x, pos)?;
        let scaled: Vec<f64> = t.iter().map(|v| v * 1000.0).collect();
        let temb = nn::constant(s, &[batch, d], &nn::sinusoidal(&scaled, d, 10_000.0))?;
        let temb = self.time1.forward(s, temb)?;
        let temb = s.gelu(temb)?;
        let temb = self.time2.forward(s, temb)?;
        let temb = s.broadcast_tokens(temb, npatch)?;
        let mut x = s.add(x, temb)?;

        let (prompt, prompt_mask) = self.prompt_context(s, prompts)?;
        let null_attr = s.param(self.null_attr)?;
        let null_attr = s.expand_batch(null_attr, batch)?;
        let attr = match attr {
            AttrInput::Null => null_attr,
            AttrInput::Tokens { tokens, null } => {
                if null.len() != batch {
                    return Err(AttrError::InvalidInput("null mask length differs from batch".into()));
                }
                if null.iter().any(|&n| n) {
                    s.where_batch(tokens, null_attr, null)?
                } else {
                    tokens
                }
            }
        };

        for b in &self.blocks {
            x = b.forward(s, x, prompt, &prompt_mask, attr)?;
        }
        let x = self.ln_out.forward(s, x)?;
        let f = self.out.forward(s, x)?;
        let f = s.mul(f, c_out)?;
        let skip = s.mul(x_t, c_skip)?;
        Ok(s.add(skip, f)?)
    }

    /// `[B, 1 + L, d]`: the null prompt token followed by padded caption
    /// words. Null items see only the first slot, the rest only their words.
    fn prompt_context<T: Real>(&self, s: &mut Session<T>, prompts: &[Option<PromptSpec>]) -> Result<(Var, Vec<bool>)> {
        let batch = prompts.len();
        let d = self.cfg.dim;
        let ids: Vec<Vec<usize>> = prompts.iter().map(|p| p.map(|p| p.token_ids()).unwrap_or_default()).collect();
        let len = ids.iter().map(Vec::len).max().unwrap_or(0);
        let mut mask = Vec::with_capacity(batch * (1 + len));
        for (p, w) in prompts.iter().zip(&ids) {
            mask.push(p.is_none());
            mask.extend((0..len).map(|i| i < w.len()));
        }
        let null = s.param(self.null_prompt)?;
        let null = s.expand_batch(null, batch)?;
        if len == 0 {
            return Ok((null, mask));
        }
        let flat: Vec<usize> = ids
            .iter()
            .flat_map(|w| w.iter().copied().chain(std::iter::repeat_n(0, len - w.len())))
            .collect();
        let table = s.param(self.prompt_words)?;
        let words = s.embedding(table, &flat)?;
        let words = s.reshape(words, &[batch, len, d])?;
        Ok((s.concat(&[null, words], 1)?, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_noise_input_is_negated_by_the_skip() {
        assert_eq!(skip_scale(0.0), -1.0);
        assert!((out_scale(0.0) - DATA_STD).abs() < 1e-12);
        assert!((skip_scale(1.0) - 1.0).abs() < 1e-12);
        assert!(out_scale(1.0) - 1.0 < 1e-12);
    }

    #[test]
    fn skip_and_residual_split_the_target_variance() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let var_x = (1.0 - t).powi(2) + (t * DATA_STD).powi(2);
            let cov = t * DATA_STD * DATA_STD - (1.0 - t);
            let total = 1.0 + DATA_STD * DATA_STD;
            let explained = cov * cov / var_x;
            assert!((skip_scale(t) * var_x - cov).abs() < 1e-12);
            assert!((out_scale(t).powi(2) + explained - total).abs() < 1e-12);
        }
    }
}

//! Guidance that composes attribute embeddings from several references:
//! per-reference flow fields `v(A_i, ∅) - v(∅, ∅)` weighted and added to a
//! text-guided base velocity.

use serde::{Deserialize, Serialize};

use crate::encoder::AttrEmbedding;
use crate::error::{AttrError, Result};
use crate::generator::{sample, FlowState};
use crate::model::{Condition, ModelBundle};
use crate::prompt::PromptSpec;
use crate::seed;
use crate::synthdata::{AttributeName, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// One weight per reference; missing entries default to 1.
    pub weights: Vec<f64>,
    /// Classifier-free guidance scale on the prompt.
    pub text_cfg: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { weights: Vec::new(), text_cfg: 3.0 }
    }
}

impl GuidanceConfig {
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(1.0)
    }

    pub fn validate(&self, refs: usize) -> Result<()> {
        if !self.text_cfg.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(AttrError::InvalidConfig("guidance weights must be finite".into()));
        }
        if self.weights.len() > refs {
            return Err(AttrError::InvalidConfig(format!(
                "{} weights for {refs} references",
                self.weights.len()
            )));
        }
        Ok(())
    }
}

/// Composed velocity split into its text-guided base and the weighted sum of
/// attribute flow fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedVelocity {
    pub text: Vec<f64>,
    pub guidance: Vec<f64>,
}

impl ComposedVelocity {
    pub fn total(&self) -> Vec<f64> {
        self.text.iter().zip(&self.guidance).map(|(a, b)| a + b).collect()
    }
}

/// `v(A, ∅) - v(∅, ∅)` at one state. `None` stands for the null condition.
pub fn conditional_flow(bundle: &ModelBundle, state: &FlowState, attr: Option<&AttrEmbedding>) -> Result<Vec<f64>> {
    let conds = [Condition { attr, prompt: None }, Condition::NULL];
    let v = bundle.velocity_batch(&[&state.x, &state.x], state.t, &conds)?;
    Ok(v[0].iter().zip(&v[1]).map(|(&a, &b)| a as f64 - b as f64).collect())
}

/// Canonical summation order so that permuting references cannot change the
/// result.
fn canonical_order(refs: &[Option<&AttrEmbedding>], g: &GuidanceConfig) -> Vec<usize> {
    let key = |i: usize| {
        let tokens: Vec<u32> = refs[i].map(|e| e.tokens.iter().map(|v| v.to_bits()).collect()).unwrap_or_default();
        (g.weight(i).to_bits(), refs[i].is_some(), tokens)
    };
    let mut order: Vec<usize> = (0..refs.len()).collect();
    order.sort_by_cached_key(|&i| key(i));
    order
}

/// `v_text + Σ w_i (v(A_i, ∅) - v(∅, ∅))` with
/// `v_text = s_c v(∅, c) + (1 - s_c) v(∅, ∅)`. All velocities of one call are
/// evaluated as a single batch.
pub fn composed_velocity(
    bundle: &ModelBundle,
    state: &FlowState,
    refs: &[Option<&AttrEmbedding>],
    prompt: Option<PromptSpec>,
    g: &GuidanceConfig,
) -> Result<ComposedVelocity> {
    g.validate(refs.len())?;
    let order = canonical_order(refs, g);
    let mut conds = vec![Condition::NULL, Condition { attr: None, prompt }];
    conds.extend(order.iter().map(|&i| Condition { attr: refs[i], prompt: None }));
    let states: Vec<&[f32]> = vec![&state.x; conds.len()];
    let v = bundle.velocity_batch(&states, state.t, &conds)?;

    let (uncond, text_only) = (&v[0], &v[1]);
    let s_c = g.text_cfg;
    let text: Vec<f64> = uncond
        .iter()
        .zip(text_only)
        .map(|(&u, &c)| s_c * c as f64 + (1.0 - s_c) * u as f64)
        .collect();
    let mut guidance = vec![0.0f64; text.len()];
    for (k, &i) in order.iter().enumerate() {
        let w = g.weight(i);
        for ((acc, &a), &u) in guidance.iter_mut().zip(&v[2 + k]).zip(uncond) {
            *acc += w * (a as f64 - u as f64);
        }
    }
    if text.iter().chain(&guidance).any(|x| !x.is_finite()) {
        return Err(AttrError::Tensor(attrikit_tensor::TensorError::NonFinite { op: "composed_velocity" }));
    }
    Ok(ComposedVelocity { text, guidance })
}

/// Encode each `(image, attribute)` reference on its own and sample under the
/// composed velocity.
pub fn compose_generate(
    bundle: &ModelBundle,
    refs: &[(Image, AttributeName)],
    prompt: Option<PromptSpec>,
    g: &GuidanceConfig,
    steps: usize,
    seed: u64,
) -> Result<Image> {
    let embeddings = refs
        .iter()
        .map(|(img, name)| bundle.encode(img, &[*name]))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<Option<&AttrEmbedding>> = embeddings.iter().map(Some).collect();
    let mut rng = seed::rng(seed, seed::stream::SAMPLE);
    sample(bundle, &views, prompt, steps, g, &mut rng)
}

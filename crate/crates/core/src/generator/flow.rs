use attrikit_tensor::{Real, Session, TensorError, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::decoder::{AttrInput, Decoder};
use crate::compose::{composed_velocity, GuidanceConfig};
use crate::encoder::AttrEmbedding;
use crate::error::{AttrError, Result};
use crate::model::{Condition, ModelBundle, ModelConfig};
use crate::nn;
use crate::prompt::PromptSpec;
use crate::synthdata::Image;

/// A point on a sampling trajectory: image-shaped state at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x: Vec<f32>,
    pub t: f64,
}

/// Standard normal noise of the given length.
pub fn noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Interpolants and targets of the straight path `x_t = (1 - t) x0 + t x1`,
/// target `x1 - x0`, in patch layout.
pub struct FlowTargets {
    pub x_t: Vec<f64>,
    pub target: Vec<f64>,
    pub t: Vec<f64>,
}

impl FlowTargets {
    /// `x1` and `x0` are HWC batches of equal length.
    pub fn new(cfg: &ModelConfig, x1: &[f64], x0: &[f64], t: &[f64]) -> Self {
        let per = cfg.image_len();
        let mut x_t = Vec::with_capacity(x1.len());
        let mut target = Vec::with_capacity(x1.len());
        for (b, &tb) in t.iter().enumerate() {
            let (a, z) = (&x1[b * per..(b + 1) * per], &x0[b * per..(b + 1) * per]);
            x_t.extend(a.iter().zip(z).map(|(&a, &z)| (1.0 - tb) * z + tb * a));
            target.extend(a.iter().zip(z).map(|(&a, &z)| a - z));
        }
        let (side, p) = (cfg.image_side, cfg.patch_size);
        FlowTargets {
            x_t: nn::patchify(&x_t, t.len(), side, p),
            target: nn::patchify(&target, t.len(), side, p),
            t: t.to_vec(),
        }
    }
}

/// Mean squared error between the predicted velocity and the path target,
/// averaged over items and elements.
pub fn fm_loss_graph<T: Real>(
    s: &mut Session<T>,
    decoder: &Decoder,
    cfg: &ModelConfig,
    targets: &FlowTargets,
    attr: AttrInput<'_>,
    prompts: &[Option<PromptSpec>],
) -> Result<Var> {
    let grid = cfg.image_side / cfg.patch_size;
    let shape = [targets.t.len(), grid * grid, cfg.patch_dim()];
    let x_t = nn::constant(s, &shape, &targets.x_t)?;
    let u = nn::constant(s, &shape, &targets.target)?;
    let v = decoder.forward(s, x_t, &targets.t, attr, prompts)?;
    let diff = s.sub(v, u)?;
    let sq = s.mul(diff, diff)?;
    Ok(s.mean(sq)?)
}

/// Single-image flow-matching loss with `t ~ U(0, 1)` and `x0 ~ N(0, I)`.
pub fn fm_loss<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    x1: &Image,
    attr: Option<&AttrEmbedding>,
    prompt: Option<PromptSpec>,
    rng: &mut R,
) -> Result<f64> {
    let cfg = &bundle.model.cfg;
    let t: f64 = rng.random_range(0.0..1.0);
    let x0 = noise(cfg.image_len(), rng);
    let x_t: Vec<f32> = x0.iter().zip(&x1.data).map(|(&z, &a)| ((1.0 - t) * z as f64 + t * a as f64) as f32).collect();
    let v = bundle.velocity_batch(&[&x_t], t, &[Condition { attr, prompt }])?.remove(0);
    let n = v.len() as f64;
    Ok(v.iter()
        .zip(x1.data.iter().zip(&x0))
        .map(|(&v, (&a, &z))| (v as f64 - (a as f64 - z as f64)).powi(2))
        .sum::<f64>()
        / n)
}

fn trajectory_error(step: usize) -> impl Fn(AttrError) -> AttrError {
    move |e| match e {
        AttrError::Tensor(TensorError::NonFinite { .. }) => AttrError::NonFiniteTrajectory { step },
        other => other,
    }
}

/// Euler integration from `x0 ~ N(0, I)` at `t = 0` to `t = 1` under the
/// composed velocity; the result is clamped to [-1, 1].
pub fn sample<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    refs: &[Option<&AttrEmbedding>],
    prompt: Option<PromptSpec>,
    steps: usize,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<Image> {
    let x0 = noise(bundle.model.cfg.image_len(), rng);
    sample_from(bundle, x0, refs, prompt, steps, guidance)
}

/// [`sample`] from a given starting state.
pub fn sample_from(
    bundle: &ModelBundle,
    x0: Vec<f32>,
    refs: &[Option<&AttrEmbedding>],
    prompt: Option<PromptSpec>,
    steps: usize,
    guidance: &GuidanceConfig,
) -> Result<Image> {
    if steps == 0 {
        return Err(AttrError::InvalidInput("sampling needs at least one step".into()));
    }
    let side = bundle.model.cfg.image_side;
    let dt = 1.0 / steps as f64;
    let mut state = FlowState { x: x0, t: 0.0 };
    for step in 0..steps {
        state.t = step as f64 * dt;
        let v = composed_velocity(bundle, &state, refs, prompt, guidance)
            .map_err(trajectory_error(step))?
            .total();
        for (x, v) in state.x.iter_mut().zip(&v) {
            *x = (*x as f64 + dt * v) as f32;
        }
        if state.x.iter().any(|x| !x.is_finite()) {
            return Err(AttrError::NonFiniteTrajectory { step });
        }
    }
    let mut img = Image::new(side, side, state.x)?;
    img.clamp();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::synthdata::{render, AttrScene};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelBundle {
        let cfg = ModelConfig { dim: 16, heads: 2, queries: 2, encoder_depth: 1, connector_depth: 1, decoder_depth: 1, ..ModelConfig::default() };
        ModelBundle::init(&cfg, 11).unwrap()
    }

    #[test]
    fn perfect_velocity_gives_zero_loss() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x1: Vec<f64> = noise(cfg.image_len(), &mut rng).iter().map(|&v| v as f64).collect();
        let x0: Vec<f64> = noise(cfg.image_len(), &mut rng).iter().map(|&v| v as f64).collect();
        let ft = FlowTargets::new(&cfg, &x1, &x0, &[0.3]);
        let store = attrikit_tensor::ParamStore::<f64>::new();
        let mut s = Session::new(&store, false);
        let grid = cfg.image_side / cfg.patch_size;
        let shape = [1, grid * grid, cfg.patch_dim()];
        let v = nn::constant(&mut s, &shape, &ft.target).unwrap();
        let u = nn::constant(&mut s, &shape, &ft.target).unwrap();
        let d = s.sub(v, u).unwrap();
        let sq = s.mul(d, d).unwrap();
        let loss = s.mean(sq).unwrap();
        assert_eq!(s.value(loss).item(), 0.0);
    }

    #[test]
    fn zero_velocity_loss_is_one_plus_mean_square() {
        let img = render(&AttrScene::enumerate()[321], 32).unwrap();
        let floor = 1.0 + img.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / img.data.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| {
                let x0 = noise(img.data.len(), &mut rng);
                img.data.iter().zip(&x0).map(|(&a, &z)| (a as f64 - z as f64).powi(2)).sum::<f64>() / x0.len() as f64
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - floor).abs() < 0.05 * floor, "{mean} vs {floor}");
    }

    #[test]
    fn fresh_model_loss_matches_skip_only_expectation() {
        // The output layer starts at zero, so a fresh model predicts
        // v = k(t) x_t. Per element the expected error is
        // x1^2 (1 - k t)^2 + (1 + k (1 - t))^2, averaged over t ~ U(0, 1).
        let bundle = tiny();
        let img = render(&AttrScene::enumerate()[321], 32).unwrap();
        let m2 = img.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / img.data.len() as f64;
        let q = 10_000;
        let expected = (0..q)
            .map(|i| {
                let t = (i as f64 + 0.5) / q as f64;
                let k = crate::generator::skip_scale(t);
                m2 * (1.0 - k * t).powi(2) + (1.0 + k * (1.0 - t)).powi(2)
            })
            .sum::<f64>()
            / q as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let mean = (0..n).map(|_| fm_loss(&bundle, &img, None, None, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - expected).abs() < 0.05 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn velocity_is_deterministic_and_shaped() {
        let bundle = tiny();
        let x = vec![0.1f32; bundle.model.cfg.image_len()];
        let a = bundle.velocity_batch(&[&x], 0.5, &[Condition::NULL]).unwrap();
        let b = bundle.velocity_batch(&[&x], 0.5, &[Condition::NULL]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), x.len());
    }

    #[test]
    fn time_outside_unit_interval_is_rejected() {
        let bundle = tiny();
        let x = vec![0.0f32; bundle.model.cfg.image_len()];
        assert!(bundle.velocity_batch(&[&x], 1.5, &[Condition::NULL]).is_err());
    }

    #[test]
    fn one_step_is_a_single_euler_step() {
        let mut bundle = tiny();
        // Give the output layer a nonzero bias so the step moves the state.
        let id = bundle.params.id("dec.out.b").unwrap();
        for (i, v) in bundle.params.get_mut(id).data_mut().iter_mut().enumerate() {
            *v = 0.01 * (i % 7) as f32;
        }
        let g = GuidanceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0: Vec<f32> = noise(bundle.model.cfg.image_len(), &mut rng).iter().map(|v| v * 0.3).collect();
        let state = FlowState { x: x0.clone(), t: 0.0 };
        let v = composed_velocity(&bundle, &state, &[], None, &g).unwrap().total();
        let out = sample_from(&bundle, x0.clone(), &[], None, 1, &g).unwrap();
        for ((o, x), v) in out.data.iter().zip(&x0).zip(&v) {
            assert_eq!(*o, ((*x as f64 + v) as f32).clamp(-1.0, 1.0));
        }
    }

    #[test]
    fn single_point_optimal_velocity_lands_on_target() {
        // For data {x1}, the optimal velocity at (x, t) is (x1 - x) / (1 - t).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = noise(48, &mut rng);
        let x0 = noise(48, &mut rng);
        let landed: Vec<f32> = x0.iter().zip(&x1).map(|(&x, &a)| x + (a - x) / (1.0 - 0.0)).collect();
        for (l, a) in landed.iter().zip(&x1) {
            assert!((l - a).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_steps_is_rejected() {
        let bundle = tiny();
        let g = GuidanceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample(&bundle, &[], None, 0, &g, &mut rng).is_err());
    }

    #[test]
    fn model_init_is_reusable_for_f64() {
        let (_, store) = Model::init::<f64>(&ModelConfig::default(), 0);
        assert!(store.num_scalars() > 100_000);
    }
}

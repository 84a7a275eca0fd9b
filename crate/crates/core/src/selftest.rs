//! Numerical self-checks: finite-difference gradients of every graph op and
//! of the full training objective, plus closed-form loss identities.

use attrikit_tensor::gradcheck::{check, check_inputs, GradCheckConfig};
use attrikit_tensor::{ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{contrastive_loss_from_logits, draw_contrastive, draw_generative, generative_loss, log_psi, total_loss, GenSampling, LossConfig};
use crate::model::{ModelBundle, ModelConfig};
use crate::synthdata::{generate, AttrId, AttributeName};

/// Gradient checks must stay below this relative error.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst observed error.
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, value: f64, limit: f64) -> Self {
        CheckOutcome { name: name.to_string(), value, limit, passed: value.is_finite() && value < limit }
    }
}

type OpFn = Box<dyn Fn(&mut Session<f64>, &[Var]) -> attrikit_tensor::Result<Var>>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    positive: bool,
    f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Session<f64>, &[Var]) -> attrikit_tensor::Result<Var> + 'static) -> OpCase {
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), positive: false, f: Box::new(f) }
}

fn op_cases() -> Vec<OpCase> {
    let mask = [true, true, false, true, true, false, false, true];
    vec![
        case("matmul", &[&[2, 3, 4], &[4, 5]], |s, v| s.matmul(v[0], v[1])),
        case("add", &[&[3, 4], &[3, 4]], |s, v| s.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |s, v| s.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |s, v| s.mul(v[0], v[1])),
        case("add_bias", &[&[2, 3, 4], &[3, 4]], |s, v| s.add_bias(v[0], v[1])),
        case("scale", &[&[5]], |s, v| s.scale(v[0], -1.7)),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |s, v| s.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("softmax", &[&[3, 5]], |s, v| s.softmax(v[0])),
        case("logsumexp", &[&[3, 5]], |s, v| s.logsumexp(v[0])),
        case("gelu", &[&[9]], |s, v| s.gelu(v[0])),
        case("exp", &[&[6]], |s, v| s.exp(v[0])),
        OpCase { positive: true, ..case("log", &[&[6]], |s, v| s.log(v[0])) },
        case("mean", &[&[3, 4]], |s, v| s.mean(v[0])),
        case("mean_axis", &[&[3, 4, 2]], |s, v| s.mean_axis(v[0], 1)),
        case("concat", &[&[2, 3, 4], &[2, 1, 4]], |s, v| s.concat(&[v[0], v[1]], 1)),
        case("slice", &[&[2, 5, 3]], |s, v| s.slice(v[0], 1, 1, 3)),
        case("reshape", &[&[2, 6]], |s, v| s.reshape(v[0], &[3, 4])),
        case("attention", &[&[2, 3, 8], &[2, 4, 8], &[2, 4, 8]], |s, v| s.attention(v[0], v[1], v[2], 2, None)),
        case("attention_masked", &[&[2, 3, 8], &[2, 4, 8], &[2, 4, 8]], move |s, v| s.attention(v[0], v[1], v[2], 4, Some(&mask))),
        case("embedding", &[&[5, 4]], |s, v| s.embedding(v[0], &[3, 0, 3, 4])),
        case("cosine", &[&[3, 6], &[3, 6]], |s, v| s.cosine(v[0], v[1])),
        case("expand_batch", &[&[3, 2]], |s, v| s.expand_batch(v[0], 4)),
        case("broadcast_tokens", &[&[2, 3]], |s, v| s.broadcast_tokens(v[0], 5)),
        case("where_batch", &[&[3, 2, 2], &[3, 2, 2]], |s, v| s.where_batch(v[0], v[1], &[true, false, true])),
    ]
}

/// `sum(out * r)` for a fixed random `r`, so every output element counts.
fn project(s: &mut Session<f64>, out: Var, seed: u64) -> attrikit_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = s.shape(out).to_vec();
    let r = s.constant(Tensor::randn(&shape, 1.0, &mut rng))?;
    let w = s.mul(out, r)?;
    let n = s.value(w).len() as f64;
    let m = s.mean(w)?;
    s.scale(m, n)
}

/// Worst relative gradient error of every op over `seeds` random inputs.
pub fn op_gradchecks(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for c in op_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = c
                .shapes
                .iter()
                .map(|sh| {
                    let t: Tensor<f64> = Tensor::randn(sh, 1.0, &mut rng);
                    if c.positive {
                        Tensor::new(sh, t.data().iter().map(|x| x.abs() + 0.5).collect()).expect("same shape")
                    } else {
                        t
                    }
                })
                .collect();
            let report = check_inputs(
                &inputs,
                |s, v| {
                    let y = (c.f)(s, v)?;
                    project(s, y, seed)
                },
                GradCheckConfig::default(),
                &mut rng,
            )?;
            worst = worst.max(report.max_rel_err);
        }
        out.push(CheckOutcome::new(c.name, worst, GRAD_TOL));
    }
    Ok(out)
}

/// A small model whose output layer is non-zero, so every parameter
/// receives gradient.
pub fn check_model(seed: u64) -> Result<(crate::model::Model, ParamStore<f64>)> {
    let cfg = ModelConfig {
        image_side: 16,
        patch_size: 4,
        dim: 8,
        heads: 2,
        queries: 2,
        encoder_depth: 2,
        connector_depth: 1,
        decoder_depth: 1,
    };
    let bundle = ModelBundle::init(&cfg, seed)?;
    let mut store = bundle.params.cast::<f64>();
    let id = store.id("dec.out.w").expect("decoder output layer");
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((bundle.model, store))
}

/// Finite-difference check of `λ_gen L_gen + λ_con L_con` with respect to
/// every parameter tensor of a small model, `coords` sampled entries each.
pub fn loss_gradcheck(seeds: u64, coords: usize) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (model, mut store) = check_model(seed)?;
        let pairs = generate(seed, 2, 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = draw_generative(&pairs, &GenSampling::default(), model.cfg.image_len(), &mut rng);
        let con = draw_contrastive(&pairs, &mut rng)?;
        let cfg = LossConfig { lambda_gen: 1.0, lambda_con: 0.5, tau: 0.5 };
        let gc = GradCheckConfig { coords_per_param: Some(coords), ..GradCheckConfig::default() };
        let report = check(
            &mut store,
            |s| {
                total_loss(s, &model, &pairs, &gen, Some(&con), &cfg)
                    .map(|t| t.total)
                    .map_err(|e| attrikit_tensor::TensorError::Format(e.to_string()))
            },
            gc,
            &mut rng,
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckOutcome::new("total_loss", worst, GRAD_TOL))
}

/// Closed-form identities of the contrastive and combined objectives.
pub fn loss_identities() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let empty = ParamStore::<f64>::new();

    let mut s = Session::new(&empty, false);
    let equal = s.constant(Tensor::full(&[5, 4], -2.25))?;
    let l = contrastive_loss_from_logits(&mut s, equal)?;
    out.push(CheckOutcome::new("equal similarities give ln 4", (s.value(l).item() - 4f64.ln()).abs(), 1e-9));

    let (model, store) = check_model(0)?;
    let bundle = ModelBundle { model, params: store.cast::<f32>() };
    let pairs = generate(0, 3, 1)?;
    let img = pairs[0].image_x(16)?;
    let name = AttributeName::canonical(AttrId::ObjectColor);
    let lp = log_psi(&bundle, &img, name, &img, name, 0.1)?;
    out.push(CheckOutcome::new("identical inputs: log psi = 10", (lp - 10.0).abs(), 1e-9));
    out.push(CheckOutcome::new(
        "identical inputs: psi = exp(10)",
        (lp.exp() - 10f64.exp()).abs(),
        1e-6,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen = draw_generative(&pairs, &GenSampling::default(), bundle.model.cfg.image_len(), &mut rng);
    let con = draw_contrastive(&pairs, &mut rng)?;
    let cfg = LossConfig { lambda_con: 0.0, ..LossConfig::default() };
    let mut s1 = Session::new(&store, false);
    let total = total_loss(&mut s1, &bundle.model, &pairs, &gen, Some(&con), &cfg)?.total;
    let mut s2 = Session::new(&store, false);
    let g = generative_loss(&mut s2, &bundle.model, &pairs, &gen)?;
    out.push(CheckOutcome::new(
        "zero contrastive weight is the generative loss",
        (s1.value(total).item() - s2.value(g).item()).abs(),
        f64::MIN_POSITIVE,
    ));
    Ok(out)
}

/// Everything above with `seeds` random seeds per gradient check.
pub fn run(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut all = op_gradchecks(seeds)?;
    all.push(loss_gradcheck(seeds.min(10), 2)?);
    all.extend(loss_identities()?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_selftest_passes() {
        for c in run(3).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}

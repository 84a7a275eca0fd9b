//! Central finite-difference gradient checking on `f64` parameter stores.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Central difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h^4).
    FivePoint,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    pub stencil: Stencil,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Coordinates sampled per parameter tensor (`None` = all).
    pub coords_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            stencil: Stencil::FivePoint,
            floor: 1e-3,
            coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(param name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `loss_fn` against central differences for
/// every trainable parameter. `loss_fn` must be deterministic.
pub fn check<F, R>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    cfg: GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = {
        let mut s = Session::new(store, true);
        let loss = loss_fn(&mut s)?;
        s.backward(loss)?
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(store, true);
        let loss = loss_fn(&mut s)?;
        Ok(s.value(loss).item())
    };
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.get(id).len();
        let coords: Vec<usize> = match cfg.coords_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = store.get(id).data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[j] = orig + offset;
                eval(store)
            };
            let h = cfg.h;
            let numeric = match cfg.stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
                }
            };
            store.get_mut(id).data_mut()[j] = orig;
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Gradient check of a function of plain input tensors: each input becomes
/// a trainable parameter named `in{i}`.
pub fn check_inputs<F, R>(
    inputs: &[Tensor<f64>],
    mut f: F,
    cfg: GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t.clone()))
        .collect();
    check(
        &mut store,
        |s| {
            let vars = ids.iter().map(|&id| s.param(id)).collect::<Result<Vec<_>>>()?;
            f(s, &vars)
        },
        cfg,
        rng,
    )
}

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and per-parameter bias correction.
///
/// Step counts are tracked per parameter so that a parameter frozen for the
/// first part of training starts its own bias correction when it thaws.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: Vec<u64>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = |id: ParamId| vec![T::zero(); store.get(id).len()];
        AdamW {
            cfg,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            t: vec![0; store.len()],
        }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.t[id.index()]
    }

    /// Applies one update. `grads[i] == None` leaves parameter `i` and its
    /// moments untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        self.step_with(store, grads, |_| lr)
    }

    /// Like [`step`](Self::step) with a learning rate chosen per parameter.
    pub fn step_with(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr_of: impl Fn(ParamId) -> f64,
    ) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let lr = lr_of(id);
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (b1, b2) = (T::cast(beta1), T::cast(beta2));
            let (one_b1, one_b2) = (T::cast(1.0 - beta1), T::cast(1.0 - beta2));
            let decay = T::cast(1.0 - lr * weight_decay);
            let step = T::cast(lr / bc1);
            let inv_bc2 = T::cast(1.0 / bc2);
            let eps = T::cast(eps);
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                p[j] = p[j] * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
            if !p.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFinite { op: "adamw" });
            }
        }
        Ok(())
    }

    /// Moments and step counts as named `f32` tensors.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(3 * store.len());
        for id in store.ids() {
            let i = id.index();
            let shape = store.get(id).shape();
            let name = store.name(id);
            let conv = |x: &Vec<T>| Tensor::new(shape, x.iter().map(|v| v.as_f64() as f32).collect());
            out.push((format!("adam.m.{name}"), conv(&self.m[i]).expect("shape")));
            out.push((format!("adam.v.{name}"), conv(&self.v[i]).expect("shape")));
            out.push((format!("adam.t.{name}"), Tensor::scalar(self.t[i] as f32)));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, named: &std::collections::HashMap<String, Tensor<f32>>) -> Result<()> {
        for id in store.ids() {
            let i = id.index();
            let name = store.name(id);
            let fetch = |key: String| {
                named
                    .get(&key)
                    .ok_or_else(|| TensorError::Format(format!("missing tensor {key}")))
            };
            let m = fetch(format!("adam.m.{name}"))?;
            let v = fetch(format!("adam.v.{name}"))?;
            let t = fetch(format!("adam.t.{name}"))?;
            if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "AdamW::load_state",
                    detail: format!("{name}: optimizer state {:?}, model {:?}", m.shape(), store.get(id).shape()),
                });
            }
            self.m[i] = m.data().iter().map(|&x| T::cast(x as f64)).collect();
            self.v[i] = v.data().iter().map(|&x| T::cast(x as f64)).collect();
            self.t[i] = t.item() as u64;
        }
        Ok(())
    }
}

/// Global L2 norm over all present gradients, accumulated in `f64` in a
/// fixed order.
pub fn global_norm<T: Real>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Session;
    use proptest::prelude::*;

    fn store1(x: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_f64(&[x.len()], x).unwrap());
        s
    }

    /// Gradient of sum_i c_i x_i^2 computed through the tape.
    fn quad_grad(store: &ParamStore<f64>, coef: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut s = Session::new(store, true);
        let x = s.param(store.id("x").unwrap()).unwrap();
        let c = s.constant(Tensor::from_f64(&[coef.len()], coef).unwrap()).unwrap();
        let sq = s.mul(x, x).unwrap();
        let w = s.mul(sq, c).unwrap();
        let m = s.mean(w).unwrap();
        let loss = s.scale(m, coef.len() as f64).unwrap();
        s.backward(loss).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut store = store1(&[0.5, -1.5]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        let grads = vec![Some(vec![0.0, 0.0])];
        for _ in 0..5 {
            opt.step(&mut store, &grads, 0.1).unwrap();
        }
        assert_eq!(store.get(ParamId(0)).data(), &[0.5, -1.5]);
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut store = store1(&[1.0]);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let g = quad_grad(&store, &[1.0]);
        opt.step(&mut store, &g, 0.1).unwrap();
        assert!(store.get(ParamId(0)).data()[0] < 1.0);
    }

    #[test]
    fn converges_on_two_dim_quadratic() {
        // f(x) = x0^2 + 3 x1^2 has its unique minimum at the origin.
        let mut store = store1(&[1.0, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        for s in 0..200 {
            let g = quad_grad(&store, &[1.0, 3.0]);
            let lr = 0.1 * (1.0 - s as f64 / 200.0);
            opt.step(&mut store, &g, lr).unwrap();
        }
        let x = store.get(ParamId(0)).data();
        let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
        assert!(norm < 1e-2, "|x| = {norm}");
    }

    #[test]
    fn per_parameter_rates_match_separate_steps() {
        let mut both = store1(&[1.0]);
        both.add("y", Tensor::from_f64(&[1], &[2.0]).unwrap());
        let grads = [Some(vec![0.5]), Some(vec![-0.25])];
        let mut opt = AdamW::new(&both, AdamWConfig::default());
        opt.step_with(&mut both, &grads, |id| if id.index() == 0 { 0.1 } else { 0.01 }).unwrap();
        for (i, lr) in [(0, 0.1), (1, 0.01)] {
            let mut one = store1(&[1.0]);
            one.add("y", Tensor::from_f64(&[1], &[2.0]).unwrap());
            let mut opt = AdamW::new(&one, AdamWConfig::default());
            opt.step(&mut one, &grads, lr).unwrap();
            assert_eq!(both.get(ParamId(i)).data(), one.get(ParamId(i)).data());
        }
    }

    #[test]
    fn frozen_slot_is_untouched() {
        let mut store = store1(&[1.0]);
        store.add("y", Tensor::from_f64(&[1], &[2.0]).unwrap());
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, &[Some(vec![1.0]), None], 0.1).unwrap();
        assert_eq!(store.get(ParamId(1)).data(), &[2.0]);
        assert_eq!(opt.step_count(ParamId(1)), 0);
        assert_eq!(opt.step_count(ParamId(0)), 1);
    }

    #[test]
    fn overflow_is_non_finite() {
        let mut store = store1(&[f64::MAX / 2.0]);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let r = opt.step(&mut store, &[Some(vec![f64::MAX])], -1e300);
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn small_norm_is_unchanged() {
        let mut g = vec![Some(vec![0.3, 0.4]), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 0.5).abs() < 1e-15);
        assert_eq!(g[0].as_ref().unwrap(), &vec![0.3, 0.4]);
    }

    #[test]
    fn norm_four_is_scaled_by_quarter() {
        let mut g = vec![Some(vec![0.0, 4.0])];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g[0].as_ref().unwrap(), &vec![0.0, 1.0]);
        let mut g = vec![Some(vec![2.0]), Some(vec![2.0, 2.0, 2.0])];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g[0].as_ref().unwrap(), &vec![0.5]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn clipped_norm_is_bounded_and_direction_kept(
            a in proptest::collection::vec(-50.0f64..50.0, 1..20),
            b in proptest::collection::vec(-50.0f64..50.0, 0..20),
        ) {
            let orig = vec![Some(a.clone()), Some(b.clone())];
            let mut g = orig.clone();
            let before = clip_grad_norm(&mut g, 1.0);
            prop_assert!(global_norm(&g) <= 1.0 + 1e-9);
            if before > 0.0 {
                // Parallel: cosine with the original is 1.
                let dot: f64 = orig.iter().flatten().flatten().zip(g.iter().flatten().flatten()).map(|(x, y)| x * y).sum();
                let cos = dot / (before * global_norm(&g));
                prop_assert!((cos - 1.0).abs() < 1e-9);
            }
        }
    }
}

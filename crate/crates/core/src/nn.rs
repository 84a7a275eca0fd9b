//! Transformer building blocks shared by the encoder and the decoder. Layers
//! hold parameter ids only, so one layout serves both f32 and f64 stores.

use attrikit_tensor::{ParamId, ParamStore, Real, Session, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Gaussian weights with standard deviation `gain / sqrt(din)`, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (din as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[din, dout], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b }
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[din, dout]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.w)?;
        let b = s.param(self.b)?;
        let y = s.matmul(x, w)?;
        Ok(s.add_bias(y, b)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma)?;
        let b = s.param(self.beta)?;
        Ok(s.layer_norm(x, g, b, LN_EPS)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, 0.5, rng),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `ctx`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x: Var,
        ctx: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, ctx)?;
        let v = self.v.forward(s, ctx)?;
        let a = s.attention(q, k, v, self.heads, mask)?;
        self.o.forward(s, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.params()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, 0.5, rng),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.gelu(h)?;
        self.fc2.forward(s, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, rng),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(s, x)?;
        let a = self.attn.forward(s, h, h, mask)?;
        let x = s.add(x, a)?;
        let h = self.ln2.forward(s, x)?;
        let m = self.mlp.forward(s, h)?;
        Ok(s.add(x, m)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.mlp.params());
        p
    }
}

/// Sinusoidal features of scalar positions: `[n, d]`, sines then cosines.
pub fn sinusoidal(positions: &[f64], d: usize, max_period: f64) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        let freq = |i: usize| (-(max_period.ln()) * i as f64 / half as f64).exp();
        out.extend((0..half).map(|i| (p * freq(i)).sin()));
        out.extend((0..half).map(|i| (p * freq(i)).cos()));
        out.extend(std::iter::repeat_n(0.0, d - 2 * half));
    }
    out
}

/// Position table for a `grid x grid` patch layout: `[grid * grid, d]`, the
/// first half of each row encodes the row index, the second half the column.
pub fn sinusoidal_2d(grid: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let idx: Vec<f64> = (0..grid).map(|i| i as f64).collect();
    let table = sinusoidal(&idx, half, 100.0);
    let mut out = Vec::with_capacity(grid * grid * d);
    for r in 0..grid {
        for c in 0..grid {
            out.extend_from_slice(&table[r * half..(r + 1) * half]);
            out.extend_from_slice(&table[c * half..(c + 1) * half]);
        }
    }
    out
}

/// HWC image batch `[B, side, side, 3]` (flat) to `[B, (side/p)^2, p*p*3]`.
pub fn patchify<T: Copy>(images: &[T], batch: usize, side: usize, patch: usize) -> Vec<T> {
    let grid = side / patch;
    let per = patch * patch * 3;
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        let img = &images[b * side * side * 3..(b + 1) * side * side * 3];
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    let row = (gy * patch + py) * side + gx * patch;
                    out.extend_from_slice(&img[row * 3..row * 3 + patch * 3]);
                }
            }
        }
    }
    debug_assert_eq!(out.len(), batch * grid * grid * per);
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Copy + Default>(patches: &[T], batch: usize, side: usize, patch: usize) -> Vec<T> {
    let grid = side / patch;
    let mut out = vec![T::default(); batch * side * side * 3];
    let mut src = patches.iter();
    for b in 0..batch {
        let img = &mut out[b * side * side * 3..(b + 1) * side * side * 3];
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    let row = (gy * patch + py) * side + gx * patch;
                    for dst in &mut img[row * 3..row * 3 + patch * 3] {
                        *dst = *src.next().expect("patch buffer too short");
                    }
                }
            }
        }
    }
    out
}

/// Constant tensor from f64 data.
pub fn constant<T: Real>(s: &mut Session<T>, shape: &[usize], data: &[f64]) -> Result<Var> {
    let t = Tensor::from_f64(shape, data)?;
    Ok(s.constant(t)?)
}

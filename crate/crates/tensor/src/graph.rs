use crate::error::{Result, TensorError};
use crate::real::{gemm, MatView, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSumExp(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Attention(Box<AttnSaved<T>>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Cosine {
        a: Var,
        b: Var,
        na: Vec<T>,
        nb: Vec<T>,
    },
    Reshape(Var),
    ExpandBatch(Var),
    BroadcastTokens {
        x: Var,
        tokens: usize,
    },
    WhereBatch {
        x: Var,
        y: Var,
        mask: Vec<bool>,
    },
}

struct AttnSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    tq: usize,
    tk: usize,
    dim: usize,
    probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of forward operations. Node creation order is a topological order,
/// so the backward pass is a single reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `[.., M, K] x [K, N] -> [.., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm(
            T::one(),
            self.value(a).data(),
            MatView::row_major(0, rows, k, k),
            self.value(b).data(),
            MatView::row_major(0, k, n, n),
            T::zero(),
            &mut out,
            MatView::row_major(0, rows, n, n),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, rows, k, n }, &[a, b])
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds `b` to every leading-batch slice of `a`; `b`'s shape must be a
    /// suffix of `a`'s.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::shape("add_bias", format!("{sa:?} + {sb:?}")));
        }
        let bias = self.value(b).data();
        let bl = bias.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % bl])
            .collect();
        let v = Tensor::new(self.shape(a), data)?;
        self.push("add_bias", v, Op::AddBias(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::cast(c);
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let v = Tensor::new(self.shape(a), data)?;
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::shape("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("x {shape:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = self.value(x).len() / d;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xs.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            let (mu_t, rs_t) = (T::cast(mu), T::cast(rs));
            for j in 0..d {
                out[r * d + j] = (row[j] - mu_t) * rs_t * g[j] + bt[j];
            }
            mean.push(mu_t);
            rstd.push(rs_t);
        }
        let v = Tensor::new(&shape, out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis (max-shifted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::shape("softmax", "rank 0"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let v = Tensor::new(&shape, out)?;
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// `log(sum(exp(x)))` over the last axis; the output drops that axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::shape("logsumexp", "rank 0"))?;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|row| {
                let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.as_f64()));
                let s: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
                T::cast(m + s.ln())
            })
            .collect();
        let v = Tensor::new(&shape[..shape.len() - 1], out)?;
        self.push("logsumexp", v, Op::LogSumExp(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let v = Tensor::new(self.shape(x), data)?;
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let v = Tensor::new(self.shape(x), data)?;
        self.push("exp", v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v <= T::zero()) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let v = Tensor::new(self.shape(x), data)?;
        self.push("log", v, Op::Log(x), &[x])
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::shape("mean", "empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push("mean", Tensor::scalar(T::cast(s / n as f64)), Op::Mean(x), &[x])
    }

    /// Mean over one axis; the output drops that axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| xs[(o * n + j) * inner + i].as_f64()).sum();
                out[o * inner + i] = T::cast(s / n as f64);
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let v = Tensor::new(&oshape, out)?;
        self.push("mean_axis", v, Op::MeanAxis { x, outer, n, inner }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", format!("{base:?} vs {s:?}")));
            }
            lens.push(s[axis]);
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        let saved = parts.iter().copied().zip(lens).collect();
        self.push(
            "concat",
            v,
            Op::Concat {
                parts: saved,
                outer,
                inner,
                total,
            },
            parts,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let v = Tensor::new(&oshape, out)?;
        self.push(
            "slice",
            v,
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Multi-head scaled-dot-product attention.
    ///
    /// `q: [B, Tq, D]`, `k, v: [B, Tk, D]`; `key_mask` (length `B * Tk`, true
    /// = attend) hides padded keys. Heads split `D` into contiguous chunks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(TensorError::shape("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let (batch, tq, dim) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::shape("attention", format!("{heads} heads for width {dim}")));
        }
        if let Some(m) = key_mask {
            if m.len() != batch * tk {
                return Err(TensorError::shape("attention", format!("mask length {}", m.len())));
            }
        }
        let dh = dim / heads;
        let scale = T::cast(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut out = vec![T::zero(); batch * tq * dim];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * tq * tk;
                let pv = MatView::row_major(p_off, tq, tk, tk);
                gemm(
                    scale,
                    qd,
                    MatView::row_major(b * tq * dim + h * dh, tq, dh, dim),
                    kd,
                    MatView::row_major(b * tk * dim + h * dh, tk, dh, dim).t(),
                    T::zero(),
                    &mut probs,
                    pv,
                );
                let rows = &mut probs[p_off..p_off + tq * tk];
                for row in rows.chunks_mut(tk) {
                    if let Some(m) = key_mask {
                        let mrow = &m[b * tk..(b + 1) * tk];
                        if !mrow.iter().any(|&keep| keep) {
                            return Err(TensorError::shape("attention", "all keys masked"));
                        }
                        for (x, &keep) in row.iter_mut().zip(mrow) {
                            if !keep {
                                *x = T::neg_infinity();
                            }
                        }
                    }
                    softmax_row(row);
                }
                gemm(
                    T::one(),
                    &probs,
                    pv,
                    vd,
                    MatView::row_major(b * tk * dim + h * dh, tk, dh, dim),
                    T::zero(),
                    &mut out,
                    MatView::row_major(b * tq * dim + h * dh, tq, dh, dim),
                );
            }
        }
        let value = Tensor::new(&sq, out)?;
        let saved = AttnSaved {
            q,
            k,
            v,
            heads,
            batch,
            tq,
            tk,
            dim,
            probs,
        };
        self.push("attention", value, Op::Attention(Box::new(saved)), &[q, k, v])
    }

    /// Row lookup: `table: [V, D]`, output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::shape("embedding", format!("table {st:?}")));
        }
        let (vocab, d) = (st[0], st[1]);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::OutOfRange {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let v = Tensor::new(&[ids.len(), d], out)?;
        self.push(
            "embedding",
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Cosine similarity along the last axis; the output drops that axis.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::shape("cosine", "rank 0"))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let rows = ad.len() / d.max(1);
        let mut out = Vec::with_capacity(rows);
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
            let la = ra.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            let lb = rb.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            if la < 1e-12 || lb < 1e-12 {
                return Err(TensorError::ZeroVector { op: "cosine" });
            }
            out.push(T::cast(dot / (la * lb)));
            na.push(T::cast(la));
            nb.push(T::cast(lb));
        }
        let v = Tensor::new(&shape[..shape.len() - 1], out)?;
        self.push("cosine", v, Op::Cosine { a, b, na, nb }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// `[..] -> [batch, ..]` by repetition.
    pub fn expand_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let v = Tensor::new(&shape, out)?;
        self.push("expand_batch", v, Op::ExpandBatch(x), &[x])
    }

    /// `[B, D] -> [B, tokens, D]` by repetition along a new middle axis.
    pub fn broadcast_tokens(&mut self, x: Var, tokens: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("broadcast_tokens", format!("{s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * tokens * d);
        for row in src.chunks(d) {
            for _ in 0..tokens {
                out.extend_from_slice(row);
            }
        }
        let v = Tensor::new(&[b, tokens, d], out)?;
        self.push("broadcast_tokens", v, Op::BroadcastTokens { x, tokens }, &[x])
    }

    /// Per batch item, picks `y[i]` where `mask[i]` and `x[i]` otherwise.
    pub fn where_batch(&mut self, x: Var, y: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("where_batch", x, y)?;
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != mask.len() {
            return Err(TensorError::shape("where_batch", format!("{shape:?} with mask {}", mask.len())));
        }
        let per = self.value(x).len() / mask.len().max(1);
        let (xd, yd) = (self.value(x).data(), self.value(y).data());
        let mut out = Vec::with_capacity(xd.len());
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { yd } else { xd };
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let v = Tensor::new(&shape, out)?;
        self.push(
            "where_batch",
            v,
            Op::WhereBatch {
                x,
                y,
                mask: mask.to_vec(),
            },
            &[x, y],
        )
    }

    /// Reverse sweep from a single-element `loss`. Gradients of every node
    /// that requires them are retrievable afterwards through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must have one element, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = nodes[i].value.data();
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                let gv = MatView::row_major(0, rows, n, n);
                if wants(*a) {
                    let bd = val(*b);
                    gemm(
                        T::one(),
                        g,
                        gv,
                        bd,
                        MatView::row_major(0, k, n, n).t(),
                        T::one(),
                        buf!(*a),
                        MatView::row_major(0, rows, k, k),
                    );
                }
                if wants(*b) {
                    let ad = val(*a);
                    gemm(
                        T::one(),
                        ad,
                        MatView::row_major(0, rows, k, k).t(),
                        g,
                        gv,
                        T::one(),
                        buf!(*b),
                        MatView::row_major(0, k, n, n),
                    );
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(buf!(*a), g);
                }
                if wants(*b) {
                    add_into(buf!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(buf!(*a), g);
                }
                if wants(*b) {
                    for (d, s) in buf!(*b).iter_mut().zip(g) {
                        *d -= *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = val(*b).to_vec();
                    for ((d, s), y) in buf!(*a).iter_mut().zip(g).zip(&bd) {
                        *d += *s * *y;
                    }
                }
                if wants(*b) {
                    let ad = val(*a).to_vec();
                    for ((d, s), x) in buf!(*b).iter_mut().zip(g).zip(&ad) {
                        *d += *s * *x;
                    }
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    add_into(buf!(*a), g);
                }
                if wants(*b) {
                    let db = buf!(*b);
                    let bl = db.len();
                    for chunk in g.chunks(bl) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    for (d, s) in buf!(*a).iter_mut().zip(g) {
                        *d += *s * *c;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xs = val(*x);
                let gm = val(*gamma).to_vec();
                let d = gm.len();
                let rows = xs.len() / d;
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xs.len()];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..d {
                        let idx = r * d + j;
                        xhat[j] = (xs[idx] - mu) * rs;
                        dxhat[j] = g[idx] * gm[j];
                        dgamma[j] += g[idx] * xhat[j];
                        dbeta[j] += g[idx];
                        s1 += dxhat[j].as_f64();
                        s2 += (dxhat[j] * xhat[j]).as_f64();
                    }
                    let m1 = T::cast(s1 / d as f64);
                    let m2 = T::cast(s2 / d as f64);
                    for j in 0..d {
                        dx[r * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if wants(*x) {
                    add_into(buf!(*x), &dx);
                }
                if wants(*gamma) {
                    add_into(buf!(*gamma), &dgamma);
                }
                if wants(*beta) {
                    add_into(buf!(*beta), &dbeta);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let d = *nodes[i].value.shape().last().unwrap();
                    let dx = buf!(*x);
                    for ((yr, gr), dr) in out.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(y, g)| *y * *g).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                if wants(*x) {
                    let xs = val(*x);
                    let d = *nodes[x.0].value.shape().last().unwrap();
                    let dx = buf!(*x);
                    for (r, (xr, dr)) in xs.chunks(d).zip(dx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            dr[j] += g[r] * (xr[j] - out[r]).exp();
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xs = val(*x);
                    for ((d, s), v) in buf!(*x).iter_mut().zip(g).zip(xs) {
                        *d += *s * gelu_grad(*v);
                    }
                }
            }
            Op::Exp(x) => {
                if wants(*x) {
                    for ((d, s), y) in buf!(*x).iter_mut().zip(g).zip(out) {
                        *d += *s * *y;
                    }
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let xs = val(*x);
                    for ((d, s), v) in buf!(*x).iter_mut().zip(g).zip(xs) {
                        *d += *s / *v;
                    }
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let dx = buf!(*x);
                    let s = g[0] / T::cast(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::MeanAxis { x, outer, n, inner } => {
                if wants(*x) {
                    let (outer, n, inner) = (*outer, *n, *inner);
                    let inv = T::cast(1.0 / n as f64);
                    let dx = buf!(*x);
                    for o in 0..outer {
                        for j in 0..n {
                            for k in 0..inner {
                                dx[(o * n + j) * inner + k] += g[o * inner + k] * inv;
                            }
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
                total,
            } => {
                let mut offset = 0;
                for &(p, len) in parts {
                    if wants(p) {
                        let dp = buf!(p);
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut dp[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => {
                if wants(*x) {
                    let dx = buf!(*x);
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        add_into(
                            &mut dx[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Attention(s) => self.attention_backward(s, g, grads),
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = nodes[table.0].value.shape()[1];
                    let dt = buf!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let (ad, bd) = (val(*a), val(*b));
                let d = *nodes[a.0].value.shape().last().unwrap();
                for (side, other, own_norm, other_norm, var) in
                    [(ad, bd, na, nb, *a), (bd, ad, nb, na, *b)]
                {
                    if !wants(var) {
                        continue;
                    }
                    let dv = buf!(var);
                    for r in 0..g.len() {
                        let (l_own, l_other) = (own_norm[r], other_norm[r]);
                        let c = out[r];
                        for j in 0..d {
                            let idx = r * d + j;
                            let dc = other[idx] / (l_own * l_other) - c * side[idx] / (l_own * l_own);
                            dv[idx] += g[r] * dc;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(buf!(*x), g);
                }
            }
            Op::ExpandBatch(x) => {
                if wants(*x) {
                    let dx = buf!(*x);
                    let per = dx.len();
                    for chunk in g.chunks(per) {
                        add_into(dx, chunk);
                    }
                }
            }
            Op::BroadcastTokens { x, tokens } => {
                if wants(*x) {
                    let d = nodes[x.0].value.shape()[1];
                    let dx = buf!(*x);
                    for (bi, drow) in dx.chunks_mut(d).enumerate() {
                        for t in 0..*tokens {
                            let off = (bi * tokens + t) * d;
                            add_into(drow, &g[off..off + d]);
                        }
                    }
                }
            }
            Op::WhereBatch { x, y, mask } => {
                let per = g.len() / mask.len().max(1);
                for (var, pick) in [(*x, false), (*y, true)] {
                    if !wants(var) {
                        continue;
                    }
                    let dv = buf!(var);
                    for (bi, &m) in mask.iter().enumerate() {
                        if m == pick {
                            add_into(&mut dv[bi * per..(bi + 1) * per], &g[bi * per..(bi + 1) * per]);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttnSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let AttnSaved {
            q,
            k,
            v,
            heads,
            batch,
            tq,
            tk,
            dim,
            ref probs,
        } = *s;
        let dh = dim / heads;
        let scale = T::cast(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); tq * tk];
        let pview = MatView::row_major(0, tq, tk, tk);
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * tq * tk;
                let p = &probs[p_off..p_off + tq * tk];
                let qv = MatView::row_major(b * tq * dim + h * dh, tq, dh, dim);
                let kvv = MatView::row_major(b * tk * dim + h * dh, tk, dh, dim);
                // dV = P^T dO
                gemm(T::one(), p, pview.t(), g, qv, T::zero(), &mut dv, kvv);
                // dP = dO V^T
                gemm(T::one(), g, qv, vd, kvv.t(), T::zero(), &mut dp, pview);
                // dS = P * (dP - rowsum(dP * P))
                for (prow, dprow) in p.chunks(tk).zip(dp.chunks_mut(tk)) {
                    let dot: T = prow.iter().zip(dprow.iter()).map(|(a, b)| *a * *b).sum();
                    for (d, &pp) in dprow.iter_mut().zip(prow) {
                        *d = pp * (*d - dot);
                    }
                }
                gemm(scale, &dp, pview, kd, kvv, T::zero(), &mut dq, qv);
                gemm(scale, &dp, pview.t(), qd, qv, T::zero(), &mut dk, kvv);
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if nodes[var.0].requires_grad {
                match &mut grads[var.0] {
                    Some(existing) => add_into(existing, &d),
                    slot @ None => *slot = Some(d),
                }
            }
        }
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let (k, c) = (T::cast(GELU_K), T::cast(GELU_C));
    let half = T::cast(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (k, c) = (T::cast(GELU_K), T::cast(GELU_C));
    let half = T::cast(0.5);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::cast(3.0) * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[3], &[0.3, -2.0, 5.5])).unwrap();
        let c = g.cosine(u, u).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let v = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(g.cosine(u, v), Err(TensorError::ZeroVector { .. })));
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.7)).unwrap();
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[1000.0, 0.0, -1000.0]).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
    }

    #[test]
    fn matmul_matches_naive_product() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = g.constant(t(&[3, 2], &[7., 8., 9., 10., 11., 12.])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(g.add(a, c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn log_of_nonpositive_is_non_finite_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(g.log(a), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn exp_overflow_is_raised_not_propagated() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_f64(&[1], &[200.0]).unwrap()).unwrap();
        assert!(matches!(g.exp(a), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1, 2], &[1.0, 0.5])).unwrap();
        let k = g.constant(t(&[1, 2, 2], &[0.2, 0.1, 9.0, 9.0])).unwrap();
        let v = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 100.0, 100.0])).unwrap();
        let o = g.attention(q, k, v, 1, Some(&[true, false])).unwrap();
        assert_eq!(g.value(o).data(), &[1.0, 2.0]);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        // d(f + h)/dx == df/dx + dh/dx, with f = mean(x*x) and h = mean(exp(x)).
        let x0 = t(&[4], &[0.1, -0.4, 0.8, 1.3]);
        let grad_of = |which: u8| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(x0.clone(), true).unwrap();
            let sq = g.mul(x, x).unwrap();
            let f = g.mean(sq).unwrap();
            let e = g.exp(x).unwrap();
            let h = g.mean(e).unwrap();
            let loss = match which {
                0 => f,
                1 => h,
                _ => g.add(f, h).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let (gf, gh, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..4 {
            assert!((gf[i] + gh[i] - gs[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(g.backward(x).is_err());
    }
}

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{gelu, gelu_grad, join, randn, softmax_rows_inplace, Parameters};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Array2<T>,
    pub b: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inp: usize, out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self { w: randn(inp, out, std, rng), b: Array2::zeros((1, out)) }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates weight gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, g: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut g.w);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl<T> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        out.push((join(prefix, "w"), &self.w));
        out.push((join(prefix, "b"), &self.b));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

/// Layer norm whose gain and shift are an affine function of a per-sequence
/// conditioning vector: `y = x̂·(1 + γ(c)) + β(c)`.
///
/// With a zero-width conditioning vector this is an ordinary layer norm with
/// learned affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CondLayerNorm<T> {
    /// `F × 2D`; the first `D` columns produce `γ`, the rest `β`.
    pub w_mod: Array2<T>,
    pub b_mod: Array2<T>,
}

pub struct ClnCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
    gain: Array2<T>,
}

impl<T: Scalar> CondLayerNorm<T> {
    pub fn new(cond_dim: usize, dim: usize) -> Self {
        Self { w_mod: Array2::zeros((cond_dim, 2 * dim)), b_mod: Array2::zeros((1, 2 * dim)) }
    }

    fn modulation(&self, cond: &Array2<T>) -> Array2<T> {
        let mut m = if cond.ncols() == 0 {
            Array2::zeros((cond.nrows(), self.b_mod.ncols()))
        } else {
            cond.dot(&self.w_mod)
        };
        m += &self.b_mod;
        m
    }

    pub fn forward(&self, x: &Array2<T>, cond: &Array2<T>, seq_len: usize) -> (Array2<T>, ClnCache<T>) {
        let d = x.ncols();
        let modulation = self.modulation(cond);
        let gain = modulation.slice(s![.., ..d]).mapv(|g| T::one() + g);
        let shift = modulation.slice(s![.., d..]).to_owned();
        let mut xhat = x.clone();
        let mut y = Array2::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(x.nrows());
        let n = T::of(d as f64);
        for (r, (mut xr, mut yr)) in xhat.rows_mut().into_iter().zip(y.rows_mut()).enumerate() {
            let b = r / seq_len;
            let mean = xr.sum() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std.push(inv);
            let (g, sh) = (gain.row(b), shift.row(b));
            for j in 0..d {
                let h = (xr[j] - mean) * inv;
                xr[j] = h;
                yr[j] = h * g[j] + sh[j];
            }
        }
        (y, ClnCache { xhat, inv_std, gain })
    }

    pub fn backward(
        &self,
        cache: &ClnCache<T>,
        dy: &Array2<T>,
        cond: &Array2<T>,
        seq_len: usize,
        g: &mut CondLayerNorm<T>,
    ) -> Array2<T> {
        let d = dy.ncols();
        let batch = cond.nrows();
        let mut dmod = Array2::<T>::zeros((batch, 2 * d));
        let mut dx = Array2::zeros(dy.raw_dim());
        let n = T::of(d as f64);
        for (r, (dyr, mut dxr)) in dy.rows().into_iter().zip(dx.rows_mut()).enumerate() {
            let b = r / seq_len;
            let xh = cache.xhat.row(r);
            let gain = cache.gain.row(b);
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            {
                let mut dm = dmod.row_mut(b);
                for j in 0..d {
                    dm[j] += dyr[j] * xh[j];
                    dm[d + j] += dyr[j];
                    let dxh = dyr[j] * gain[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh[j];
                }
            }
            let (m1, m2) = (sum_dxhat / n, sum_dxhat_xhat / n);
            let inv = cache.inv_std[r];
            for j in 0..d {
                dxr[j] = inv * (dyr[j] * gain[j] - m1 - xh[j] * m2);
            }
        }
        if cond.ncols() > 0 {
            general_mat_mul(T::one(), &cond.t(), &dmod, T::one(), &mut g.w_mod);
        }
        g.b_mod += &dmod.sum_axis(Axis(0)).insert_axis(Axis(0));
        dx
    }
}

impl<T> Parameters<T> for CondLayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        out.push((join(prefix, "w_mod"), &self.w_mod));
        out.push((join(prefix, "b_mod"), &self.b_mod));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>) {
        out.push((join(prefix, "w_mod"), &mut self.w_mod));
        out.push((join(prefix, "b_mod"), &mut self.b_mod));
    }
}

/// Multi-head self-attention over `batch` independent sequences stacked
/// row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

pub struct AttnCache<T> {
    x: Array2<T>,
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn new(dim: usize, heads: usize, std: f64, out_std: f64, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model dim must divide into heads");
        Self { qkv: Linear::new(dim, 3 * dim, std, rng), proj: Linear::new(dim, dim, out_std, rng), heads }
    }

    pub fn forward(&self, x: &Array2<T>, seq_len: usize, causal: bool) -> (Array2<T>, AttnCache<T>) {
        let n = x.nrows();
        let d = x.ncols();
        let dh = d / self.heads;
        let batch = n / seq_len;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qkv = self.qkv.forward(x);
        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let rows = b * seq_len..(b + 1) * seq_len;
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t());
                p.mapv_inplace(|v| v * scale);
                if causal {
                    for i in 0..seq_len {
                        for j in i + 1..seq_len {
                            p[[i, j]] = T::neg_infinity();
                        }
                    }
                }
                softmax_rows_inplace(&mut p);
                let mut out = ctx.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]);
                general_mat_mul(T::one(), &p, &v, T::zero(), &mut out);
                probs.push(p);
            }
        }
        let y = self.proj.forward(&ctx);
        (y, AttnCache { x: x.clone(), qkv, probs, ctx })
    }

    pub fn backward(&self, cache: &AttnCache<T>, dy: &Array2<T>, seq_len: usize, g: &mut Attention<T>) -> Array2<T> {
        let n = dy.nrows();
        let d = dy.ncols();
        let dh = d / self.heads;
        let batch = n / seq_len;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let dctx = self.proj.backward(&cache.ctx, dy, &mut g.proj);
        let mut dqkv = Array2::zeros((n, 3 * d));
        for b in 0..batch {
            let rows = b * seq_len..(b + 1) * seq_len;
            for h in 0..self.heads {
                let p = &cache.probs[b * self.heads + h];
                let qc = h * dh..(h + 1) * dh;
                let kc = d + h * dh..d + (h + 1) * dh;
                let vc = 2 * d + h * dh..2 * d + (h + 1) * dh;
                let q = cache.qkv.slice(s![rows.clone(), qc.clone()]);
                let k = cache.qkv.slice(s![rows.clone(), kc.clone()]);
                let v = cache.qkv.slice(s![rows.clone(), vc.clone()]);
                let dc = dctx.slice(s![rows.clone(), qc.clone()]);
                {
                    let mut dv = dqkv.slice_mut(s![rows.clone(), vc]);
                    general_mat_mul(T::one(), &p.t(), &dc, T::zero(), &mut dv);
                }
                let mut ds = dc.dot(&v.t());
                for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = dsr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pv) in dsr.iter_mut().zip(pr.iter()) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                {
                    let mut dq = dqkv.slice_mut(s![rows.clone(), qc]);
                    general_mat_mul(T::one(), &ds, &k, T::zero(), &mut dq);
                }
                let mut dk = dqkv.slice_mut(s![rows.clone(), kc]);
                general_mat_mul(T::one(), &ds.t(), &q, T::zero(), &mut dk);
            }
        }
        self.qkv.backward(&cache.x, &dqkv, &mut g.qkv)
    }
}

impl<T> Parameters<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.proj.visit(&join(prefix, "proj"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>) {
        self.qkv.visit_mut(&join(prefix, "qkv"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
    }
}

/// Position-wise feed-forward network with a GELU hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct FfnCache<T> {
    x: Array2<T>,
    z: Array2<T>,
    a: Array2<T>,
}

impl<T: Scalar> Ffn<T> {
    pub fn new(dim: usize, hidden: usize, std: f64, out_std: f64, rng: &mut impl Rng) -> Self {
        Self { fc1: Linear::new(dim, hidden, std, rng), fc2: Linear::new(hidden, dim, out_std, rng) }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, FfnCache<T>) {
        let z = self.fc1.forward(x);
        let a = z.mapv(gelu);
        let y = self.fc2.forward(&a);
        (y, FfnCache { x: x.clone(), z, a })
    }

    pub fn backward(&self, cache: &FfnCache<T>, dy: &Array2<T>, g: &mut Ffn<T>) -> Array2<T> {
        let mut da = self.fc2.backward(&cache.a, dy, &mut g.fc2);
        da.zip_mut_with(&cache.z, |d, &z| *d *= gelu_grad(z));
        self.fc1.backward(&cache.x, &da, &mut g.fc1)
    }
}

impl<T> Parameters<T> for Ffn<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1: CondLayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: CondLayerNorm<T>,
    pub ffn: Ffn<T>,
}

pub struct BlockCache<T> {
    ln1: ClnCache<T>,
    attn: AttnCache<T>,
    ln2: ClnCache<T>,
    ffn: FfnCache<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new(dim: usize, heads: usize, ffn_mult: usize, cond_dim: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let std = 0.02;
        let out_std = 0.02 / (2.0 * layers as f64).sqrt();
        Self {
            ln1: CondLayerNorm::new(cond_dim, dim),
            attn: Attention::new(dim, heads, std, out_std, rng),
            ln2: CondLayerNorm::new(cond_dim, dim),
            ffn: Ffn::new(dim, ffn_mult * dim, std, out_std, rng),
        }
    }

    pub fn forward(&self, x: &Array2<T>, cond: &Array2<T>, seq_len: usize, causal: bool) -> (Array2<T>, BlockCache<T>) {
        let (n1, ln1) = self.ln1.forward(x, cond, seq_len);
        let (a, attn) = self.attn.forward(&n1, seq_len, causal);
        let x1 = x + &a;
        let (n2, ln2) = self.ln2.forward(&x1, cond, seq_len);
        let (f, ffn) = self.ffn.forward(&n2);
        (x1 + &f, BlockCache { ln1, attn, ln2, ffn })
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &Array2<T>, cond: &Array2<T>, seq_len: usize, g: &mut Block<T>) -> Array2<T> {
        let dn2 = self.ffn.backward(&cache.ffn, dy, &mut g.ffn);
        let mut dx1 = self.ln2.backward(&cache.ln2, &dn2, cond, seq_len, &mut g.ln2);
        dx1 += dy;
        let dn1 = self.attn.backward(&cache.attn, &dx1, seq_len, &mut g.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &dn1, cond, seq_len, &mut g.ln1);
        dx += &dx1;
        dx
    }
}

impl<T> Parameters<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        self.ffn.visit(&join(prefix, "ffn"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
        self.ffn.visit_mut(&join(prefix, "ffn"), out);
    }
}

/// Stack of blocks, final norm and vocabulary head shared by the denoiser
/// and the autoregressive reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk<T> {
    pub blocks: Vec<Block<T>>,
    pub ln_f: CondLayerNorm<T>,
    pub head: Linear<T>,
}

pub struct TrunkCache<T> {
    blocks: Vec<BlockCache<T>>,
    ln_f: ClnCache<T>,
    normed: Array2<T>,
}

impl<T: Scalar> Trunk<T> {
    pub fn new(
        dim: usize,
        heads: usize,
        layers: usize,
        ffn_mult: usize,
        cond_dim: usize,
        vocab: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..layers).map(|_| Block::new(dim, heads, ffn_mult, cond_dim, layers, rng)).collect();
        Self { blocks, ln_f: CondLayerNorm::new(cond_dim, dim), head: Linear::new(dim, vocab, 0.02, rng) }
    }

    /// Returns `(B·S) × V` logits.
    pub fn forward(&self, h: Array2<T>, cond: &Array2<T>, seq_len: usize, causal: bool) -> (Array2<T>, TrunkCache<T>) {
        let mut h = h;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, c) = block.forward(&h, cond, seq_len, causal);
            caches.push(c);
            h = next;
        }
        let (normed, ln_f) = self.ln_f.forward(&h, cond, seq_len);
        let logits = self.head.forward(&normed);
        (logits, TrunkCache { blocks: caches, ln_f, normed })
    }

    /// Returns the gradient with respect to the trunk input.
    pub fn backward(&self, cache: &TrunkCache<T>, dlogits: &Array2<T>, cond: &Array2<T>, seq_len: usize, g: &mut Trunk<T>) -> Array2<T> {
        let dn = self.head.backward(&cache.normed, dlogits, &mut g.head);
        let mut dh = self.ln_f.backward(&cache.ln_f, &dn, cond, seq_len, &mut g.ln_f);
        for ((block, c), gb) in self.blocks.iter().zip(&cache.blocks).zip(&mut g.blocks).rev() {
            dh = block.backward(c, &dh, cond, seq_len, gb);
        }
        dh
    }
}

impl<T> Parameters<T> for Trunk<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), out);
        self.head.visit(&join(prefix, "head"), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Array2<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

//! Transformer encoder block: multi-head self-attention and a two-layer
//! MLP, each wrapped in a residual connection with LayerNorm and dropout.
//!
//! Tokens are rows of an `[N, C]` matrix and projections act on the right
//! (`y = x W + b`). There is no positional encoding, so the block is
//! equivariant to token permutations.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    col_sum, visit_arr1, visit_arr1_mut, visit_arr2, visit_arr2_mut, Differentiable, NamedParams,
    Tensor,
};
use crate::augmentation::{seeded_rng, AugRng};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormOrder {
    /// `x + f(norm(x))`
    PreNorm,
    /// `norm(x + f(x))`
    PostNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub heads: usize,
    pub dropout: f64,
    pub norm: NormOrder,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl EncoderParams {
    /// All projections zero, LayerNorm gains one.
    pub fn zeros(width: usize, heads: usize, expansion: usize) -> Result<Self> {
        if heads == 0 || width == 0 || width % heads != 0 {
            return Err(Error::invalid(format!(
                "width {width} must be a positive multiple of heads {heads}"
            )));
        }
        if expansion == 0 {
            return Err(Error::invalid("MLP expansion must be positive"));
        }
        let hidden = width * expansion;
        let sq = || Array2::zeros((width, width));
        let v = || Array1::zeros(width);
        Ok(EncoderParams {
            heads,
            dropout: 0.0,
            norm: NormOrder::PreNorm,
            wq: sq(),
            bq: v(),
            wk: sq(),
            bk: v(),
            wv: sq(),
            bv: v(),
            wo: sq(),
            bo: v(),
            ln1_gain: Array1::ones(width),
            ln1_bias: v(),
            ln2_gain: Array1::ones(width),
            ln2_bias: v(),
            w1: Array2::zeros((width, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, width)),
            b2: v(),
        })
    }

    /// Gaussian init with `1/sqrt(fan_in)` scale; biases and LayerNorm
    /// parameters are perturbed too so every gradient path is exercised.
    pub fn random(width: usize, heads: usize, expansion: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(width, heads, expansion)?;
        let mut rng = seeded_rng(seed, 0);
        let hidden = width * expansion;
        let fill = |a: &mut [f64], std: f64, mean: f64, rng: &mut AugRng| {
            let n = Normal::new(mean, std).expect("finite std");
            a.iter_mut().for_each(|v| *v = n.sample(rng));
        };
        let sw = 1.0 / (width as f64).sqrt();
        let sh = 1.0 / (hidden as f64).sqrt();
        p.visit_mut(&mut |name, _, v| match name {
            "ln1.gain" | "ln2.gain" => fill(v, 0.1, 1.0, &mut rng),
            "mlp.w2" => fill(v, sh, 0.0, &mut rng),
            _ if name.contains(".b") => fill(v, 0.1, 0.0, &mut rng),
            _ => fill(v, sw, 0.0, &mut rng),
        });
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, v| v.fill(0.0));
        z
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.width();
        let e = self.w1.ncols();
        let ok = self.heads > 0
            && c % self.heads == 0
            && [&self.wq, &self.wk, &self.wv, &self.wo]
                .iter()
                .all(|w| w.dim() == (c, c))
            && [
                &self.bq,
                &self.bk,
                &self.bv,
                &self.bo,
                &self.ln1_gain,
                &self.ln1_bias,
                &self.ln2_gain,
                &self.ln2_bias,
                &self.b2,
            ]
            .iter()
            .all(|b| b.len() == c)
            && self.w1.nrows() == c
            && self.b1.len() == e
            && self.w2.dim() == (e, c);
        if !ok {
            return Err(Error::shape(
                "encoder parameters are dimensionally inconsistent",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::shape("encoder input needs at least one token"));
        }
        if x.ncols() != self.width() {
            return Err(Error::shape(format!(
                "token width {} does not match model width {}",
                x.ncols(),
                self.width()
            )));
        }
        Ok(())
    }
}

impl NamedParams for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_arr2("attn.wq", &self.wq, f);
        visit_arr1("attn.bq", &self.bq, f);
        visit_arr2("attn.wk", &self.wk, f);
        visit_arr1("attn.bk", &self.bk, f);
        visit_arr2("attn.wv", &self.wv, f);
        visit_arr1("attn.bv", &self.bv, f);
        visit_arr2("attn.wo", &self.wo, f);
        visit_arr1("attn.bo", &self.bo, f);
        visit_arr1("ln1.gain", &self.ln1_gain, f);
        visit_arr1("ln1.bias", &self.ln1_bias, f);
        visit_arr1("ln2.gain", &self.ln2_gain, f);
        visit_arr1("ln2.bias", &self.ln2_bias, f);
        visit_arr2("mlp.w1", &self.w1, f);
        visit_arr1("mlp.b1", &self.b1, f);
        visit_arr2("mlp.w2", &self.w2, f);
        visit_arr1("mlp.b2", &self.b2, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_arr2_mut("attn.wq", &mut self.wq, f);
        visit_arr1_mut("attn.bq", &mut self.bq, f);
        visit_arr2_mut("attn.wk", &mut self.wk, f);
        visit_arr1_mut("attn.bk", &mut self.bk, f);
        visit_arr2_mut("attn.wv", &mut self.wv, f);
        visit_arr1_mut("attn.bv", &mut self.bv, f);
        visit_arr2_mut("attn.wo", &mut self.wo, f);
        visit_arr1_mut("attn.bo", &mut self.bo, f);
        visit_arr1_mut("ln1.gain", &mut self.ln1_gain, f);
        visit_arr1_mut("ln1.bias", &mut self.ln1_bias, f);
        visit_arr1_mut("ln2.gain", &mut self.ln2_gain, f);
        visit_arr1_mut("ln2.bias", &mut self.ln2_bias, f);
        visit_arr2_mut("mlp.w1", &mut self.w1, f);
        visit_arr1_mut("mlp.b1", &mut self.b1, f);
        visit_arr2_mut("mlp.w2", &mut self.w2, f);
        visit_arr1_mut("mlp.b2", &mut self.b2, f);
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let c = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / c;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / c;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    let out = &xhat * gain + bias;
    (out, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
fn ln_backward(
    dout: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (dout * &cache.xhat).sum_axis(Axis(0));
    let dbias = col_sum(dout);
    let dxhat = dout * gain;
    let c = dout.ncols() as f64;
    let mut dx = Array2::zeros(dout.raw_dim());
    for i in 0..dout.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / c;
        let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
        let s = cache.inv_std[i];
        for j in 0..dout.ncols() {
            dx[[i, j]] = s * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    (dx, dgain, dbias)
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_B: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

/// Sum that does not depend on term order, so attention stays exactly
/// equivariant when tokens are permuted.
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn softmax_rows(s: &mut Array2<f64>) {
    let mut buf = Vec::with_capacity(s.ncols());
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        buf.clear();
        buf.extend(row.iter().copied());
        let sum = order_free_sum(&mut buf);
        row.mapv_inplace(|v| v / sum);
    }
}

/// `q k^T * scale`, one dot product per query/key pair.
fn pair_scores(q: ArrayView2<f64>, k: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((q.nrows(), k.nrows()), |(i, j)| {
        q.row(i)
            .iter()
            .zip(k.row(j))
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * scale
    })
}

/// `a v` with each output summed over keys in an order-free way.
fn weighted_values(a: &Array2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
    let mut buf = Vec::with_capacity(a.ncols());
    Array2::from_shape_fn((a.nrows(), v.ncols()), |(i, c)| {
        buf.clear();
        buf.extend(a.row(i).iter().zip(v.column(c)).map(|(w, x)| w * x));
        order_free_sum(&mut buf)
    })
}

struct MhaCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

fn mha_forward(x: &Array2<f64>, p: &EncoderParams) -> (Array2<f64>, MhaCache) {
    let q = x.dot(&p.wq) + &p.bq;
    let k = x.dot(&p.wk) + &p.bk;
    let v = x.dot(&p.wv) + &p.bv;
    let d = p.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut concat = Array2::zeros(x.raw_dim());
    let mut attn = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = s![.., h * d..(h + 1) * d];
        let mut a = pair_scores(q.slice(cols), k.slice(cols), scale);
        softmax_rows(&mut a);
        concat
            .slice_mut(cols)
            .assign(&weighted_values(&a, v.slice(cols)));
        attn.push(a);
    }
    let out = concat.dot(&p.wo) + &p.bo;
    (
        out,
        MhaCache {
            input: x.clone(),
            q,
            k,
            v,
            attn,
            concat,
        },
    )
}

fn mha_backward(
    dout: &Array2<f64>,
    c: &MhaCache,
    p: &EncoderParams,
    g: &mut EncoderParams,
) -> Array2<f64> {
    g.wo += &c.concat.t().dot(dout);
    g.bo += &col_sum(dout);
    let dconcat = dout.dot(&p.wo.t());
    let d = p.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, a) in c.attn.iter().enumerate() {
        let cols = s![.., h * d..(h + 1) * d];
        let dout_h = dconcat.slice(cols);
        let da = dout_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dout_h));
        let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = a * &(&da - &row_dot) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let xt = c.input.t();
    g.wq += &xt.dot(&dq);
    g.bq += &col_sum(&dq);
    g.wk += &xt.dot(&dk);
    g.bk += &col_sum(&dk);
    g.wv += &xt.dot(&dv);
    g.bv += &col_sum(&dv);
    dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t())
}

struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

fn mlp_forward(x: &Array2<f64>, p: &EncoderParams) -> (Array2<f64>, MlpCache) {
    let pre = x.dot(&p.w1) + &p.b1;
    let act = pre.mapv(gelu);
    let out = act.dot(&p.w2) + &p.b2;
    (
        out,
        MlpCache {
            input: x.clone(),
            pre,
            act,
        },
    )
}

fn mlp_backward(
    dout: &Array2<f64>,
    c: &MlpCache,
    p: &EncoderParams,
    g: &mut EncoderParams,
) -> Array2<f64> {
    g.w2 += &c.act.t().dot(dout);
    g.b2 += &col_sum(dout);
    let dact = dout.dot(&p.w2.t());
    let dpre = dact * c.pre.mapv(gelu_grad);
    g.w1 += &c.input.t().dot(&dpre);
    g.b1 += &col_sum(&dpre);
    dpre.dot(&p.w1.t())
}

/// Inverted-dropout multiplier, `None` in evaluation mode.
fn dropout_mask(shape: (usize, usize), p: f64, rng: Option<&mut AugRng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

struct EncoderCache {
    ln1: LnCache,
    ln2: LnCache,
    mha: MhaCache,
    mlp: MlpCache,
    mask1: Option<Array2<f64>>,
    mask2: Option<Array2<f64>>,
}

fn encoder_forward_cached(
    x: &Array2<f64>,
    p: &EncoderParams,
    mut rng: Option<&mut AugRng>,
) -> (Array2<f64>, EncoderCache) {
    let mask1 = dropout_mask(x.dim(), p.dropout, rng.as_deref_mut());
    let mask2 = dropout_mask(x.dim(), p.dropout, rng.as_deref_mut());
    match p.norm {
        NormOrder::PreNorm => {
            let (n1, ln1) = ln_forward(x, &p.ln1_gain, &p.ln1_bias);
            let (a, mha) = mha_forward(&n1, p);
            let y = x + &apply_mask(a, &mask1);
            let (n2, ln2) = ln_forward(&y, &p.ln2_gain, &p.ln2_bias);
            let (m, mlp) = mlp_forward(&n2, p);
            let out = &y + &apply_mask(m, &mask2);
            (
                out,
                EncoderCache {
                    ln1,
                    ln2,
                    mha,
                    mlp,
                    mask1,
                    mask2,
                },
            )
        }
        NormOrder::PostNorm => {
            let (a, mha) = mha_forward(x, p);
            let r1 = x + &apply_mask(a, &mask1);
            let (y, ln1) = ln_forward(&r1, &p.ln1_gain, &p.ln1_bias);
            let (m, mlp) = mlp_forward(&y, p);
            let r2 = &y + &apply_mask(m, &mask2);
            let (out, ln2) = ln_forward(&r2, &p.ln2_gain, &p.ln2_bias);
            (
                out,
                EncoderCache {
                    ln1,
                    ln2,
                    mha,
                    mlp,
                    mask1,
                    mask2,
                },
            )
        }
    }
}

fn encoder_backward(
    dout: &Array2<f64>,
    c: &EncoderCache,
    p: &EncoderParams,
) -> (Array2<f64>, EncoderParams) {
    let mut g = p.zeros_like();
    let dx = match p.norm {
        NormOrder::PreNorm => {
            let dm = apply_mask(dout.clone(), &c.mask2);
            let dn2 = mlp_backward(&dm, &c.mlp, p, &mut g);
            let (dy_ln, dg2, db2) = ln_backward(&dn2, &c.ln2, &p.ln2_gain);
            g.ln2_gain += &dg2;
            g.ln2_bias += &db2;
            let dy = dout + &dy_ln;
            let da = apply_mask(dy.clone(), &c.mask1);
            let dn1 = mha_backward(&da, &c.mha, p, &mut g);
            let (dx_ln, dg1, db1) = ln_backward(&dn1, &c.ln1, &p.ln1_gain);
            g.ln1_gain += &dg1;
            g.ln1_bias += &db1;
            dy + dx_ln
        }
        NormOrder::PostNorm => {
            let (dr2, dg2, db2) = ln_backward(dout, &c.ln2, &p.ln2_gain);
            g.ln2_gain += &dg2;
            g.ln2_bias += &db2;
            let dm = apply_mask(dr2.clone(), &c.mask2);
            let dy = &dr2 + &mlp_backward(&dm, &c.mlp, p, &mut g);
            let (dr1, dg1, db1) = ln_backward(&dy, &c.ln1, &p.ln1_gain);
            g.ln1_gain += &dg1;
            g.ln1_bias += &db1;
            let da = apply_mask(dr1.clone(), &c.mask1);
            &dr1 + &mha_backward(&da, &c.mha, p, &mut g)
        }
    };
    (dx, g)
}

/// Self-attention over the rows of `x`: per-head scaled dot-product with a
/// softmax over keys, heads concatenated and projected.
pub fn multi_head_attention(x: ArrayView2<f64>, p: &EncoderParams) -> Result<Array2<f64>> {
    p.validate()?;
    p.check_input(&x)?;
    Ok(mha_forward(&x.to_owned(), p).0)
}

/// The per-head `[N, N]` attention matrices of [`multi_head_attention`].
pub fn attention_weights(x: ArrayView2<f64>, p: &EncoderParams) -> Result<Vec<Array2<f64>>> {
    p.validate()?;
    p.check_input(&x)?;
    Ok(mha_forward(&x.to_owned(), p).1.attn)
}

/// One encoder block. Pass an rng to run in training mode (dropout active);
/// `None` is evaluation mode, where dropout is the identity.
pub fn transformer_encoder_forward(
    x: ArrayView2<f64>,
    p: &EncoderParams,
    train_rng: Option<&mut AugRng>,
) -> Result<Array2<f64>> {
    p.validate()?;
    p.check_input(&x)?;
    Ok(encoder_forward_cached(&x.to_owned(), p, train_rng).0)
}

/// Run the encoder on a `[C, H, W]` feature map flattened to `H * W` tokens.
pub fn encode_feature_map(f: ArrayView3<f64>, p: &EncoderParams) -> Result<Array3<f64>> {
    let (c, h, w) = f.dim();
    let tokens = f
        .to_shape((c, h * w))
        .map_err(|e| Error::shape(e.to_string()))?
        .t()
        .to_owned();
    let out = transformer_encoder_forward(tokens.view(), p, None)?;
    out.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .map_err(|e| Error::shape(e.to_string()))
}

impl Differentiable for EncoderParams {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let x = input
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape("encoder input must be [N, C]"))?;
        Ok(transformer_encoder_forward(x, self, None)?.into_dyn())
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.validate()?;
        let x = input
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape("encoder input must be [N, C]"))?
            .to_owned();
        self.check_input(&x.view())?;
        let dout = grad_out
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::shape("encoder gradient must be [N, C]"))?
            .to_owned();
        let (_, cache) = encoder_forward_cached(&x, self, None);
        let (dx, g) = encoder_backward(&dout, &cache, self);
        Ok((dx.into_dyn(), g.flat_params()))
    }
}

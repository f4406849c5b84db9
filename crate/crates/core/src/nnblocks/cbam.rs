//! Convolutional block attention module: channel attention from pooled
//! descriptors through a shared MLP, then spatial attention from a k x k
//! convolution over channel-pooled maps. Both maps multiply the features.

use ndarray::{Array1, Array2, Array3, ArrayView3, Ix3};
use rand_distr::{Distribution, Normal};

use super::{
    sigmoid, visit_arr1, visit_arr1_mut, visit_arr2, visit_arr2_mut, Differentiable, NamedParams,
    Tensor,
};
use crate::augmentation::seeded_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CbamParams {
    /// `[C / r, C]`
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    /// `[C, C / r]`
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
    /// `[2, k * k]`: row 0 convolves the channel mean, row 1 the channel max.
    pub conv: Array2<f64>,
    /// Length 1.
    pub conv_bias: Array1<f64>,
    pub kernel: usize,
}

impl CbamParams {
    pub fn zeros(channels: usize, reduction: usize, kernel: usize) -> Result<Self> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::invalid(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "spatial kernel must be odd, got {kernel}"
            )));
        }
        let hidden = channels / reduction;
        Ok(CbamParams {
            mlp_w1: Array2::zeros((hidden, channels)),
            mlp_b1: Array1::zeros(hidden),
            mlp_w2: Array2::zeros((channels, hidden)),
            mlp_b2: Array1::zeros(channels),
            conv: Array2::zeros((2, kernel * kernel)),
            conv_bias: Array1::zeros(1),
            kernel,
        })
    }

    pub fn random(channels: usize, reduction: usize, kernel: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction, kernel)?;
        let mut rng = seeded_rng(seed, 1);
        let hidden = channels / reduction;
        let std_for = |name: &str| match name {
            "channel.w1" => 1.0 / (channels as f64).sqrt(),
            "channel.w2" => 1.0 / (hidden as f64).sqrt(),
            "spatial.weight" => 1.0 / ((2 * kernel * kernel) as f64).sqrt(),
            _ => 0.1,
        };
        p.visit_mut(&mut |name, _, v| {
            let n = Normal::new(0.0, std_for(name)).expect("finite std");
            v.iter_mut().for_each(|x| *x = n.sample(&mut rng));
        });
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.mlp_w1.ncols()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, v| v.fill(0.0));
        z
    }

    fn check(&self, f: &ArrayView3<f64>) -> Result<()> {
        let c = self.channels();
        let hidden = self.mlp_w1.nrows();
        let consistent = self.mlp_b1.len() == hidden
            && self.mlp_w2.dim() == (c, hidden)
            && self.mlp_b2.len() == c
            && self.kernel % 2 == 1
            && self.conv.dim() == (2, self.kernel * self.kernel)
            && self.conv_bias.len() == 1;
        if !consistent {
            return Err(Error::shape(
                "CBAM parameters are dimensionally inconsistent",
            ));
        }
        let (fc, h, w) = f.dim();
        if fc != c || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "CBAM expects [{c}, H, W], got {:?}",
                f.dim()
            )));
        }
        Ok(())
    }
}

impl NamedParams for CbamParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_arr2("channel.w1", &self.mlp_w1, f);
        visit_arr1("channel.b1", &self.mlp_b1, f);
        visit_arr2("channel.w2", &self.mlp_w2, f);
        visit_arr1("channel.b2", &self.mlp_b2, f);
        visit_arr2("spatial.weight", &self.conv, f);
        visit_arr1("spatial.bias", &self.conv_bias, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_arr2_mut("channel.w1", &mut self.mlp_w1, f);
        visit_arr1_mut("channel.b1", &mut self.mlp_b1, f);
        visit_arr2_mut("channel.w2", &mut self.mlp_w2, f);
        visit_arr1_mut("channel.b2", &mut self.mlp_b2, f);
        visit_arr2_mut("spatial.weight", &mut self.conv, f);
        visit_arr1_mut("spatial.bias", &mut self.conv_bias, f);
    }
}

struct Pooled {
    mean: Array1<f64>,
    max: Array1<f64>,
    argmax: Vec<(usize, usize)>,
}

fn pool_spatial(f: &Array3<f64>) -> Pooled {
    let (c, h, w) = f.dim();
    let mut mean = Array1::zeros(c);
    let mut max = Array1::from_elem(c, f64::NEG_INFINITY);
    let mut argmax = vec![(0, 0); c];
    for ch in 0..c {
        let mut sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = f[[ch, y, x]];
                sum += v;
                if v > max[ch] {
                    max[ch] = v;
                    argmax[ch] = (y, x);
                }
            }
        }
        mean[ch] = sum / (h * w) as f64;
    }
    Pooled { mean, max, argmax }
}

struct MlpPass {
    pre: Array1<f64>,
    hidden: Array1<f64>,
    out: Array1<f64>,
}

fn channel_mlp(v: &Array1<f64>, p: &CbamParams) -> MlpPass {
    let pre = p.mlp_w1.dot(v) + &p.mlp_b1;
    let hidden = pre.mapv(|x| x.max(0.0));
    let out = p.mlp_w2.dot(&hidden) + &p.mlp_b2;
    MlpPass { pre, hidden, out }
}

struct Cache {
    pooled: Pooled,
    mlp_mean: MlpPass,
    mlp_max: MlpPass,
    channel_att: Array1<f64>,
    refined: Array3<f64>,
    /// Channel-mean and channel-max maps.
    maps: [Array2<f64>; 2],
    max_channel: Array2<usize>,
    spatial_att: Array2<f64>,
}

fn conv_same(maps: &[Array2<f64>; 2], p: &CbamParams) -> Array2<f64> {
    let (h, w) = maps[0].dim();
    let k = p.kernel;
    let pad = (k / 2) as isize;
    let mut out = Array2::from_elem((h, w), p.conv_bias[0]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ch, m) in maps.iter().enumerate() {
                for i in 0..k {
                    let sy = y as isize + i as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let sx = x as isize + j as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += p.conv[[ch, i * k + j]] * m[[sy as usize, sx as usize]];
                    }
                }
            }
            out[[y, x]] += acc;
        }
    }
    out
}

fn forward_cached(f: &Array3<f64>, p: &CbamParams) -> (Array3<f64>, Cache) {
    let (c, h, w) = f.dim();
    let pooled = pool_spatial(f);
    let mlp_mean = channel_mlp(&pooled.mean, p);
    let mlp_max = channel_mlp(&pooled.max, p);
    let channel_att = (&mlp_mean.out + &mlp_max.out).mapv(sigmoid);

    let mut refined = f.clone();
    for ch in 0..c {
        let a = channel_att[ch];
        refined
            .index_axis_mut(ndarray::Axis(0), ch)
            .mapv_inplace(|v| v * a);
    }

    let mut mean_map = Array2::zeros((h, w));
    let mut max_map = Array2::from_elem((h, w), f64::NEG_INFINITY);
    let mut max_channel = Array2::zeros((h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = refined[[ch, y, x]];
                mean_map[[y, x]] += v / c as f64;
                if v > max_map[[y, x]] {
                    max_map[[y, x]] = v;
                    max_channel[[y, x]] = ch;
                }
            }
        }
    }
    let maps = [mean_map, max_map];
    let spatial_att = conv_same(&maps, p).mapv(sigmoid);

    let mut out = refined.clone();
    for ch in 0..c {
        let mut plane = out.index_axis_mut(ndarray::Axis(0), ch);
        plane *= &spatial_att;
    }
    (
        out,
        Cache {
            pooled,
            mlp_mean,
            mlp_max,
            channel_att,
            refined,
            maps,
            max_channel,
            spatial_att,
        },
    )
}

fn backward(
    f: &Array3<f64>,
    dout: &Array3<f64>,
    c: &Cache,
    p: &CbamParams,
) -> (Array3<f64>, CbamParams) {
    let (ch_n, h, w) = f.dim();
    let k = p.kernel;
    let pad = (k / 2) as isize;
    let mut g = p.zeros_like();

    // out = spatial_att * refined
    let mut d_refined = dout.clone();
    let mut d_spatial = Array2::<f64>::zeros((h, w));
    for ch in 0..ch_n {
        for y in 0..h {
            for x in 0..w {
                d_spatial[[y, x]] += dout[[ch, y, x]] * c.refined[[ch, y, x]];
                d_refined[[ch, y, x]] *= c.spatial_att[[y, x]];
            }
        }
    }
    let d_logit = &d_spatial * &c.spatial_att.mapv(|s| s * (1.0 - s));

    g.conv_bias[0] = d_logit.sum();
    let mut d_maps = [Array2::<f64>::zeros((h, w)), Array2::<f64>::zeros((h, w))];
    for y in 0..h {
        for x in 0..w {
            let dl = d_logit[[y, x]];
            for (m, map) in c.maps.iter().enumerate() {
                for i in 0..k {
                    let sy = y as isize + i as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let sx = x as isize + j as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let (sy, sx) = (sy as usize, sx as usize);
                        g.conv[[m, i * k + j]] += dl * map[[sy, sx]];
                        d_maps[m][[sy, sx]] += dl * p.conv[[m, i * k + j]];
                    }
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let share = d_maps[0][[y, x]] / ch_n as f64;
            for ch in 0..ch_n {
                d_refined[[ch, y, x]] += share;
            }
            d_refined[[c.max_channel[[y, x]], y, x]] += d_maps[1][[y, x]];
        }
    }

    // refined = channel_att * f
    let mut df = d_refined.clone();
    let mut d_channel = Array1::<f64>::zeros(ch_n);
    for ch in 0..ch_n {
        let a = c.channel_att[ch];
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += d_refined[[ch, y, x]] * f[[ch, y, x]];
                df[[ch, y, x]] *= a;
            }
        }
        d_channel[ch] = acc;
    }
    let dz = &d_channel * &c.channel_att.mapv(|s| s * (1.0 - s));

    let mut branch = |pass: &MlpPass, v: &Array1<f64>| -> Array1<f64> {
        for i in 0..ch_n {
            for j in 0..pass.hidden.len() {
                g.mlp_w2[[i, j]] += dz[i] * pass.hidden[j];
            }
        }
        g.mlp_b2 += &dz;
        let d_hidden = p.mlp_w2.t().dot(&dz) * pass.pre.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        for i in 0..d_hidden.len() {
            for j in 0..ch_n {
                g.mlp_w1[[i, j]] += d_hidden[i] * v[j];
            }
        }
        g.mlp_b1 += &d_hidden;
        p.mlp_w1.t().dot(&d_hidden)
    };
    let d_mean = branch(&c.mlp_mean, &c.pooled.mean);
    let d_max = branch(&c.mlp_max, &c.pooled.max);

    let area = (h * w) as f64;
    for ch in 0..ch_n {
        let share = d_mean[ch] / area;
        df.index_axis_mut(ndarray::Axis(0), ch)
            .mapv_inplace(|v| v + share);
        let (y, x) = c.pooled.argmax[ch];
        df[[ch, y, x]] += d_max[ch];
    }
    (df, g)
}

/// `Ms ⊙ (Mc ⊙ f)` for a `[C, H, W]` feature map.
pub fn cbam_forward(f: ArrayView3<f64>, p: &CbamParams) -> Result<Array3<f64>> {
    p.check(&f)?;
    Ok(forward_cached(&f.to_owned(), p).0)
}

/// The channel (`[C]`) and spatial (`[H, W]`) attention maps.
pub fn cbam_attention(f: ArrayView3<f64>, p: &CbamParams) -> Result<(Array1<f64>, Array2<f64>)> {
    p.check(&f)?;
    let (_, c) = forward_cached(&f.to_owned(), p);
    Ok((c.channel_att, c.spatial_att))
}

fn as3(t: &Tensor, what: &str) -> Result<Array3<f64>> {
    t.view()
        .into_dimensionality::<Ix3>()
        .map(|v| v.to_owned())
        .map_err(|_| Error::shape(format!("CBAM {what} must be [C, H, W]")))
}

impl Differentiable for CbamParams {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(cbam_forward(as3(input, "input")?.view(), self)?.into_dyn())
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let f = as3(input, "input")?;
        self.check(&f.view())?;
        let dout = as3(grad_out, "gradient")?;
        let (_, cache) = forward_cached(&f, self);
        let (df, g) = backward(&f, &dout, &cache, self);
        Ok((df.into_dyn(), g.flat_params()))
    }
}

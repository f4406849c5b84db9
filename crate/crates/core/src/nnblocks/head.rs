//! Anchor-based decode for the four prediction heads, including the
//! stride-4 head for tiny objects.

use ndarray::{Array4, ArrayView4, Ix4};
use serde::{Deserialize, Serialize};

use super::{sigmoid, Differentiable, NamedParams, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub stride: u32,
    /// `(width, height)` in input pixels.
    pub anchors: Vec<(f64, f64)>,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn new(stride: u32, anchors: Vec<(f64, f64)>, num_classes: usize) -> Result<Self> {
        let s = HeadSpec {
            stride,
            anchors,
            num_classes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 4 | 8 | 16 | 32) {
            return Err(Error::invalid(format!(
                "stride must be one of 4, 8, 16, 32, got {}",
                self.stride
            )));
        }
        if self.anchors.is_empty() {
            return Err(Error::invalid("head needs at least one anchor"));
        }
        if self
            .anchors
            .iter()
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
        {
            return Err(Error::invalid("anchor sizes must be positive and finite"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("head needs at least one class"));
        }
        Ok(())
    }

    /// Channels per anchor in the raw map: box, objectness, classes.
    pub fn raw_channels(&self) -> usize {
        5 + self.num_classes
    }

    fn check_raw(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        self.validate()?;
        let (a, h, w, c) = dim;
        if a != self.anchors.len() || c != self.raw_channels() || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "stride-{} head expects [{}, H, W, {}], got [{a}, {h}, {w}, {c}]",
                self.stride,
                self.anchors.len(),
                self.raw_channels()
            )));
        }
        Ok(())
    }
}

/// Strides 4, 8, 16 and 32 with three anchors each. The anchor sizes are
/// working defaults; the stride-4 set is a scaled-down copy of the
/// stride-8 pattern.
pub fn default_heads(num_classes: usize) -> Vec<HeadSpec> {
    let table: [(u32, [(f64, f64); 3]); 4] = [
        (4, [(4.0, 5.0), (8.0, 10.0), (22.0, 18.0)]),
        (8, [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)]),
        (16, [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)]),
        (32, [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)]),
    ];
    table
        .iter()
        .map(|(stride, anchors)| HeadSpec {
            stride: *stride,
            anchors: anchors.to_vec(),
            num_classes,
        })
        .collect()
}

/// Dense decode: `[A, H, W, 5 + K]` logits to `[A, H, W, 4 + K]` holding
/// center x, center y, width, height and per-class scores.
pub fn decode_dense(raw: ArrayView4<f64>, spec: &HeadSpec) -> Result<Array4<f64>> {
    spec.check_raw(raw.dim())?;
    let (a, h, w, _) = raw.dim();
    let k = spec.num_classes;
    let stride = spec.stride as f64;
    let mut out = Array4::zeros((a, h, w, 4 + k));
    for ai in 0..a {
        let (aw, ah) = spec.anchors[ai];
        for y in 0..h {
            for x in 0..w {
                let t = raw.slice(ndarray::s![ai, y, x, ..]);
                let mut o = out.slice_mut(ndarray::s![ai, y, x, ..]);
                o[0] = (2.0 * sigmoid(t[0]) - 0.5 + x as f64) * stride;
                o[1] = (2.0 * sigmoid(t[1]) - 0.5 + y as f64) * stride;
                o[2] = (2.0 * sigmoid(t[2])).powi(2) * aw;
                o[3] = (2.0 * sigmoid(t[3])).powi(2) * ah;
                let obj = sigmoid(t[4]);
                for c in 0..k {
                    o[4 + c] = obj * sigmoid(t[5 + c]);
                }
            }
        }
    }
    Ok(out)
}

fn decode_backward(raw: ArrayView4<f64>, dout: ArrayView4<f64>, spec: &HeadSpec) -> Array4<f64> {
    let (a, h, w, _) = raw.dim();
    let k = spec.num_classes;
    let stride = spec.stride as f64;
    let mut g = Array4::zeros(raw.dim());
    for ai in 0..a {
        let (aw, ah) = spec.anchors[ai];
        for y in 0..h {
            for x in 0..w {
                let t = raw.slice(ndarray::s![ai, y, x, ..]);
                let d = dout.slice(ndarray::s![ai, y, x, ..]);
                let mut gi = g.slice_mut(ndarray::s![ai, y, x, ..]);
                let ds = |v: f64| {
                    let s = sigmoid(v);
                    s * (1.0 - s)
                };
                gi[0] = d[0] * 2.0 * stride * ds(t[0]);
                gi[1] = d[1] * 2.0 * stride * ds(t[1]);
                gi[2] = d[2] * 8.0 * sigmoid(t[2]) * ds(t[2]) * aw;
                gi[3] = d[3] * 8.0 * sigmoid(t[3]) * ds(t[3]) * ah;
                let obj = sigmoid(t[4]);
                let mut d_obj = 0.0;
                for c in 0..k {
                    let cls = sigmoid(t[5 + c]);
                    d_obj += d[4 + c] * cls;
                    gi[5 + c] = d[4 + c] * obj * ds(t[5 + c]);
                }
                gi[4] = d_obj * ds(t[4]);
            }
        }
    }
    g
}

/// Sparse decode: every cell and anchor whose best class score reaches
/// `conf_thr`, as corner boxes with the argmax class.
pub fn yolo_head_decode(
    raw: ArrayView4<f64>,
    spec: &HeadSpec,
    conf_thr: f64,
) -> Result<Vec<ScoredBox>> {
    if !(0.0..=1.0).contains(&conf_thr) {
        return Err(Error::invalid(format!(
            "confidence threshold {conf_thr} outside [0, 1]"
        )));
    }
    let dense = decode_dense(raw, spec)?;
    let (a, h, w, _) = dense.dim();
    let mut out = Vec::new();
    for ai in 0..a {
        for y in 0..h {
            for x in 0..w {
                let o = dense.slice(ndarray::s![ai, y, x, ..]);
                let (class_id, score) = o.iter().skip(4).copied().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, s)| if s > best.1 { (i, s) } else { best },
                );
                if score >= conf_thr && score > 0.0 {
                    out.push(ScoredBox {
                        bbox: BBox::from_center(o[0], o[1], o[2], o[3]),
                        score,
                        class_id,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// The dense decode as a parameter-free differentiable op.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDecodeOp {
    pub spec: HeadSpec,
}

impl NamedParams for HeadDecodeOp {
    fn visit(&self, _: &mut dyn FnMut(&str, &[usize], &[f64])) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&str, &[usize], &mut [f64])) {}
}

fn as4(t: &Tensor, what: &str) -> Result<Array4<f64>> {
    t.view()
        .into_dimensionality::<Ix4>()
        .map(|v| v.to_owned())
        .map_err(|_| Error::shape(format!("head decode {what} must be [A, H, W, C]")))
}

impl Differentiable for HeadDecodeOp {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(decode_dense(as4(input, "input")?.view(), &self.spec)?.into_dyn())
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let raw = as4(input, "input")?;
        self.spec.check_raw(raw.dim())?;
        let dout = as4(grad_out, "gradient")?;
        let (a, h, w, _) = raw.dim();
        if dout.dim() != (a, h, w, 4 + self.spec.num_classes) {
            return Err(Error::shape(
                "head decode gradient shape does not match output",
            ));
        }
        Ok((
            decode_backward(raw.view(), dout.view(), &self.spec).into_dyn(),
            Vec::new(),
        ))
    }
}

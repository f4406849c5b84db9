//! Training-time augmentation with exact label bookkeeping: mosaic, mixup,
//! HSV jitter, random affine, and gray masking of labels too small to learn.
//!
//! Images are `H x W x 3` arrays of `f64` in `[0, 255]`. Every random draw
//! comes from an explicit [`AugRng`], so a seed fully determines the output.

use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::par::{self, ExecMode};

pub type AugRng = ChaCha8Rng;

/// Letterbox gray used for padding and masking.
pub const FILL_GRAY: f64 = 114.0;

/// A deterministic stream; different `stream` values are independent.
pub fn seeded_rng(seed: u64, stream: u64) -> AugRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Mixup weight; 1 for unmixed samples.
    pub weight: f64,
}

impl Label {
    pub fn new(class_id: usize, bbox: BBox) -> Self {
        Label {
            class_id,
            bbox,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array3<f64>,
    pub labels: Vec<Label>,
}

impl Sample {
    pub fn new(image: Array3<f64>, labels: Vec<Label>) -> Result<Self> {
        if image.dim().2 != 3 {
            return Err(Error::shape(format!(
                "expected 3 channels, got {}",
                image.dim().2
            )));
        }
        if image.dim().0 == 0 || image.dim().1 == 0 {
            return Err(Error::shape("image must be non-empty"));
        }
        Ok(Sample { image, labels })
    }

    pub fn solid(width: usize, height: usize, value: f64) -> Self {
        Sample {
            image: Array3::from_elem((height, width, 3), value),
            labels: Vec::new(),
        }
    }

    pub fn size(&self) -> ImageSize {
        ImageSize {
            width: self.image.dim().1,
            height: self.image.dim().0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvGains {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl Default for HsvGains {
    fn default() -> Self {
        HsvGains {
            h: 0.015,
            s: 0.7,
            v: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineRanges {
    /// Rotation drawn from `[-degrees, degrees]`.
    pub degrees: f64,
    /// Translation drawn from `[-translate, translate]` times the image side.
    pub translate: f64,
    /// Isotropic scale drawn from `[scale.0, scale.1]`.
    pub scale: (f64, f64),
    /// Shear angle drawn from `[-shear, shear]` for each axis.
    pub shear: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            degrees: 0.0,
            translate: 0.1,
            scale: (0.5, 1.5),
            shear: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mosaic_output: ImageSize,
    pub mosaic_center_jitter: f64,
    pub mixup_beta: f64,
    pub hsv: HsvGains,
    pub affine: AffineRanges,
    pub min_box_survival: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mosaic_output: ImageSize {
                width: 640,
                height: 640,
            },
            mosaic_center_jitter: 0.25,
            mixup_beta: 32.0,
            hsv: HsvGains::default(),
            affine: AffineRanges::default(),
            min_box_survival: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mosaic_output.width == 0 || self.mosaic_output.height == 0 {
            return Err(Error::invalid("mosaic_output must be positive"));
        }
        if !(0.0..0.5).contains(&self.mosaic_center_jitter) {
            return Err(Error::invalid("mosaic_center_jitter must lie in [0, 0.5)"));
        }
        if !(self.mixup_beta > 0.0) {
            return Err(Error::invalid("mixup_beta must be positive"));
        }
        if !(self.min_box_survival > 0.0 && self.min_box_survival <= 1.0) {
            return Err(Error::invalid("min_box_survival must lie in (0, 1]"));
        }
        let a = &self.affine;
        if a.degrees < 0.0
            || a.translate < 0.0
            || a.shear < 0.0
            || !(a.scale.0 > 0.0 && a.scale.0 <= a.scale.1)
        {
            return Err(Error::invalid(
                "affine ranges must be non-negative with 0 < scale.0 <= scale.1",
            ));
        }
        Ok(())
    }
}

/// Bilinear sample at continuous pixel-index coordinates, edges clamped.
pub fn sample_bilinear(img: &ArrayView3<f64>, x: f64, y: f64, c: usize) -> f64 {
    let (h, w, _) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
    let bottom = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resample the region `region` of `img` to `out_w x out_h` with
/// pixel-center alignment.
pub fn crop_resize(
    img: &ArrayView3<f64>,
    region: &BBox,
    out_w: usize,
    out_h: usize,
) -> Array3<f64> {
    let channels = img.dim().2;
    let sx = region.width() / out_w as f64;
    let sy = region.height() / out_h as f64;
    Array3::from_shape_fn((out_h, out_w, channels), |(i, j, c)| {
        let x = region.x1 + (j as f64 + 0.5) * sx - 0.5;
        let y = region.y1 + (i as f64 + 0.5) * sy - 0.5;
        sample_bilinear(img, x, y, c)
    })
}

pub fn resize(img: &ArrayView3<f64>, out_w: usize, out_h: usize) -> Array3<f64> {
    let (h, w, _) = img.dim();
    if (w, h) == (out_w, out_h) {
        return img.to_owned();
    }
    crop_resize(img, &BBox::new(0.0, 0.0, w as f64, h as f64), out_w, out_h)
}

/// Clip `mapped` to `visible`; keep it when the retained area fraction
/// reaches `min_survival`.
fn survive(mapped: &BBox, visible: &BBox, min_survival: f64) -> Option<BBox> {
    let full = mapped.area();
    if full <= 0.0 {
        return None;
    }
    let clipped = BBox {
        x1: mapped.x1.clamp(visible.x1, visible.x2),
        y1: mapped.y1.clamp(visible.y1, visible.y2),
        x2: mapped.x2.clamp(visible.x1, visible.x2),
        y2: mapped.y2.clamp(visible.y1, visible.y2),
    };
    let area = clipped.area();
    (area > 0.0 && area / full >= min_survival).then_some(clipped)
}

/// Stitch four samples around a random center.
///
/// Each input is bilinearly resized by `min(W / 2w, H / 2h)` and anchored
/// with one corner on the center: the first sample fills the top-left
/// quadrant, then top-right, bottom-left, bottom-right. Pixels outside the
/// placed images stay at [`FILL_GRAY`].
pub fn mosaic(samples: &[Sample], cfg: &AugmentConfig, rng: &mut AugRng) -> Result<Sample> {
    if samples.len() != 4 {
        return Err(Error::invalid(format!(
            "mosaic needs exactly 4 samples, got {}",
            samples.len()
        )));
    }
    let out = cfg.mosaic_output;
    let (w_out, h_out) = (out.width as f64, out.height as f64);
    let ux: f64 = rng.random_range(-1.0..=1.0);
    let uy: f64 = rng.random_range(-1.0..=1.0);
    let xc = (w_out / 2.0 + cfg.mosaic_center_jitter * w_out * ux)
        .round()
        .clamp(0.0, w_out) as i64;
    let yc = (h_out / 2.0 + cfg.mosaic_center_jitter * h_out * uy)
        .round()
        .clamp(0.0, h_out) as i64;

    let mut canvas = Array3::from_elem((out.height, out.width, 3), FILL_GRAY);
    let mut labels = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let (h, w, _) = s.image.dim();
        let r = (w_out / (2.0 * w as f64)).min(h_out / (2.0 * h as f64));
        let nw = ((w as f64 * r).round() as usize).max(1);
        let nh = ((h as f64 * r).round() as usize).max(1);
        let placed = resize(&s.image.view(), nw, nh);
        let (nw_i, nh_i) = (nw as i64, nh as i64);
        let (ox, oy) = match k {
            0 => (xc - nw_i, yc - nh_i),
            1 => (xc, yc - nh_i),
            2 => (xc - nw_i, yc),
            _ => (xc, yc),
        };
        let (qx0, qx1) = if k % 2 == 0 {
            (0, xc)
        } else {
            (xc, out.width as i64)
        };
        let (qy0, qy1) = if k < 2 {
            (0, yc)
        } else {
            (yc, out.height as i64)
        };
        let vx0 = qx0.max(ox);
        let vx1 = qx1.min(ox + nw_i);
        let vy0 = qy0.max(oy);
        let vy1 = qy1.min(oy + nh_i);
        if vx0 >= vx1 || vy0 >= vy1 {
            continue;
        }
        for y in vy0..vy1 {
            for x in vx0..vx1 {
                for c in 0..3 {
                    canvas[[y as usize, x as usize, c]] =
                        placed[[(y - oy) as usize, (x - ox) as usize, c]];
                }
            }
        }
        let visible = BBox::new(vx0 as f64, vy0 as f64, vx1 as f64, vy1 as f64);
        let fx = nw as f64 / w as f64;
        let fy = nh as f64 / h as f64;
        for l in &s.labels {
            let b = &l.bbox;
            let mapped = BBox::new(
                b.x1 * fx + ox as f64,
                b.y1 * fy + oy as f64,
                b.x2 * fx + ox as f64,
                b.y2 * fy + oy as f64,
            );
            if let Some(bbox) = survive(&mapped, &visible, cfg.min_box_survival) {
                labels.push(Label { bbox, ..*l });
            }
        }
    }
    Ok(Sample {
        image: canvas,
        labels,
    })
}

/// Convex blend `lambda * a + (1 - lambda) * b`; both label sets are kept
/// with their weights scaled by `lambda` and `1 - lambda`.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if a.image.dim() != b.image.dim() {
        return Err(Error::shape(format!(
            "mixup needs equal shapes, got {:?} and {:?}",
            a.image.dim(),
            b.image.dim()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "mixup lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let mut image = a.image.clone();
    image.zip_mut_with(&b.image, |x, &y| *x = lambda * *x + (1.0 - lambda) * y);
    let labels = a
        .labels
        .iter()
        .map(|l| Label {
            weight: l.weight * lambda,
            ..*l
        })
        .chain(b.labels.iter().map(|l| Label {
            weight: l.weight * (1.0 - lambda),
            ..*l
        }))
        .collect();
    Ok(Sample { image, labels })
}

/// Draw a mixup ratio from `Beta(beta, beta)`.
pub fn sample_mixup_lambda(beta: f64, rng: &mut AugRng) -> Result<f64> {
    let dist = Beta::new(beta, beta).map_err(|e| Error::invalid(format!("mixup beta: {e}")))?;
    Ok(dist.sample(rng))
}

/// RGB in `[0, 255]` to `(hue in [0, 1), saturation in [0, 1], value in [0, 255])`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Scale hue, saturation and value by `1 + gain * u`, `u ~ U[-1, 1]` drawn
/// once per channel for the whole image.
pub fn hsv_distort(s: &Sample, gains: &HsvGains, rng: &mut AugRng) -> Sample {
    let rh = 1.0 + gains.h * rng.random_range(-1.0..=1.0);
    let rs = 1.0 + gains.s * rng.random_range(-1.0..=1.0);
    let rv = 1.0 + gains.v * rng.random_range(-1.0..=1.0);
    hsv_scale(s, rh, rs, rv)
}

/// Deterministic core of [`hsv_distort`].
pub fn hsv_scale(s: &Sample, rh: f64, rs: f64, rv: f64) -> Sample {
    let mut image = s.image.clone();
    for mut px in image.lanes_mut(ndarray::Axis(2)) {
        let (h, sat, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(
            (h * rh).rem_euclid(1.0),
            (sat * rs).clamp(0.0, 1.0),
            (v * rv).clamp(0.0, 255.0),
        );
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
    Sample {
        image,
        labels: s.labels.clone(),
    }
}

/// Row-major 2x3 affine map on pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Affine2 {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// Rotation by `degrees` and isotropic scale about `(cx, cy)`.
    pub fn rotation_about(degrees: f64, scale: f64, cx: f64, cy: f64) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let r = Affine2 {
            m: [
                [cos * scale, -sin * scale, 0.0],
                [sin * scale, cos * scale, 0.0],
            ],
        };
        Affine2::translation(cx, cy)
            .then_after(&r)
            .then_after(&Affine2::translation(-cx, -cy))
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn then_after(&self, inner: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &inner.m;
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                m[i][j] =
                    a[i][0] * b[0][j] + a[i][1] * b[1][j] + if j == 2 { a[i][2] } else { 0.0 };
            }
        }
        Affine2 { m }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let a = m[1][1] / det;
        let b = -m[0][1] / det;
        let c = -m[1][0] / det;
        let d = m[0][0] / det;
        Some(Affine2 {
            m: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
        })
    }

    /// Axis-aligned envelope of the four mapped corners.
    pub fn map_box(&self, b: &BBox) -> BBox {
        let pts =
            [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)].map(|(x, y)| self.apply(x, y));
        let xs = pts.map(|p| p.0);
        let ys = pts.map(|p| p.1);
        BBox {
            x1: xs.iter().copied().fold(f64::INFINITY, f64::min),
            y1: ys.iter().copied().fold(f64::INFINITY, f64::min),
            x2: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            y2: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Concrete parameters of one geometric distortion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineParams {
    pub degrees: f64,
    pub scale: f64,
    pub shear_x: f64,
    pub shear_y: f64,
    /// Pixels.
    pub translate_x: f64,
    pub translate_y: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            scale: 1.0,
            ..Default::default()
        }
    }

    pub fn sample(ranges: &AffineRanges, size: ImageSize, rng: &mut AugRng) -> Self {
        let sym = |rng: &mut AugRng, r: f64| {
            if r > 0.0 {
                rng.random_range(-r..=r)
            } else {
                0.0
            }
        };
        let degrees = sym(rng, ranges.degrees);
        let scale = if ranges.scale.1 > ranges.scale.0 {
            rng.random_range(ranges.scale.0..=ranges.scale.1)
        } else {
            ranges.scale.0
        };
        let shear_x = sym(rng, ranges.shear);
        let shear_y = sym(rng, ranges.shear);
        let translate_x = sym(rng, ranges.translate) * size.width as f64;
        let translate_y = sym(rng, ranges.translate) * size.height as f64;
        AffineParams {
            degrees,
            scale,
            shear_x,
            shear_y,
            translate_x,
            translate_y,
        }
    }

    /// `T * S * R * C`: move the center to the origin, rotate and scale,
    /// shear, then move back with the extra translation.
    pub fn matrix(&self, size: ImageSize) -> Affine2 {
        let cx = size.width as f64 / 2.0;
        let cy = size.height as f64 / 2.0;
        let (sin, cos) = self.degrees.to_radians().sin_cos();
        let rot = Affine2 {
            m: [
                [cos * self.scale, -sin * self.scale, 0.0],
                [sin * self.scale, cos * self.scale, 0.0],
            ],
        };
        let shear = Affine2 {
            m: [
                [1.0, self.shear_x.to_radians().tan(), 0.0],
                [self.shear_y.to_radians().tan(), 1.0, 0.0],
            ],
        };
        Affine2::translation(cx + self.translate_x, cy + self.translate_y)
            .then_after(&shear)
            .then_after(&rot)
            .then_after(&Affine2::translation(-cx, -cy))
    }
}

/// Warp image and labels by `m`, keeping the canvas size.
///
/// Output pixels take the nearest source pixel under the inverse map (gray
/// when it falls outside). Labels become the envelope of their mapped
/// corners, clipped to the canvas, and are dropped below `min_survival`.
pub fn apply_affine(s: &Sample, m: &Affine2, min_survival: f64) -> Result<Sample> {
    let inv = m
        .inverse()
        .ok_or_else(|| Error::invalid("affine transform is singular"))?;
    let (h, w, c) = s.image.dim();
    let mut image = Array3::from_elem((h, w, c), FILL_GRAY);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            let (sx, sy) = (sx.floor(), sy.floor());
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                for ch in 0..c {
                    image[[y, x, ch]] = s.image[[sy as usize, sx as usize, ch]];
                }
            }
        }
    }
    let canvas = BBox::new(0.0, 0.0, w as f64, h as f64);
    let labels = s
        .labels
        .iter()
        .filter_map(|l| {
            survive(&m.map_box(&l.bbox), &canvas, min_survival).map(|bbox| Label { bbox, ..*l })
        })
        .collect();
    Ok(Sample { image, labels })
}

pub fn geometric_distort(s: &Sample, cfg: &AugmentConfig, rng: &mut AugRng) -> Result<Sample> {
    let params = AffineParams::sample(&cfg.affine, s.size(), rng);
    apply_affine(s, &params.matrix(s.size()), cfg.min_box_survival)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TinyCriterion {
    /// `max(w, h) < min_px`
    MaxSide,
    /// `min(w, h) < min_px`
    MinSide,
    /// `w * h < min_px^2`
    Area,
}

/// Which labels count as too small, measured after rescaling the image so
/// its long side equals `ref_long_side`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyRule {
    pub min_px: f64,
    pub ref_long_side: f64,
    pub criterion: TinyCriterion,
}

impl Default for TinyRule {
    fn default() -> Self {
        TinyRule {
            min_px: 3.0,
            ref_long_side: 1536.0,
            criterion: TinyCriterion::MaxSide,
        }
    }
}

impl TinyRule {
    pub fn is_tiny(&self, b: &BBox, size: ImageSize) -> bool {
        let k = self.ref_long_side / size.long_side() as f64;
        let (w, h) = (b.width() * k, b.height() * k);
        match self.criterion {
            TinyCriterion::MaxSide => w.max(h) < self.min_px,
            TinyCriterion::MinSide => w.min(h) < self.min_px,
            TinyCriterion::Area => w * h < self.min_px * self.min_px,
        }
    }
}

/// Paint `FILL_GRAY` over every pixel touched by `b`.
pub fn paint_gray(image: &mut Array3<f64>, b: &BBox) {
    let (h, w, _) = image.dim();
    let x0 = b.x1.floor().clamp(0.0, w as f64) as usize;
    let x1 = b.x2.ceil().clamp(0.0, w as f64) as usize;
    let y0 = b.y1.floor().clamp(0.0, h as f64) as usize;
    let y1 = b.y2.ceil().clamp(0.0, h as f64) as usize;
    image
        .slice_mut(ndarray::s![y0..y1, x0..x1, ..])
        .fill(FILL_GRAY);
}

/// Remove tiny labels and cover them with gray squares.
pub fn mask_tiny_labels(s: &Sample, rule: &TinyRule) -> Sample {
    let size = s.size();
    let mut image = s.image.clone();
    let mut labels = Vec::with_capacity(s.labels.len());
    for l in &s.labels {
        if rule.is_tiny(&l.bbox, size) {
            paint_gray(&mut image, &l.bbox);
        } else {
            labels.push(*l);
        }
    }
    Sample { image, labels }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePlan {
    pub mosaic: bool,
    pub mixup_prob: f64,
    pub affine: bool,
    pub hsv: bool,
}

impl Default for PipelinePlan {
    fn default() -> Self {
        PipelinePlan {
            mosaic: true,
            mixup_prob: 0.5,
            affine: true,
            hsv: true,
        }
    }
}

fn one_pipeline(
    pool: &[Sample],
    cfg: &AugmentConfig,
    plan: &PipelinePlan,
    rng: &mut AugRng,
) -> Result<Sample> {
    let draw = |rng: &mut AugRng| -> Result<Sample> {
        if plan.mosaic {
            let picks: Vec<Sample> = (0..4)
                .map(|_| pool[rng.random_range(0..pool.len())].clone())
                .collect();
            mosaic(&picks, cfg, rng)
        } else {
            let s = &pool[rng.random_range(0..pool.len())];
            let out = cfg.mosaic_output;
            let fx = out.width as f64 / s.size().width as f64;
            let fy = out.height as f64 / s.size().height as f64;
            let labels = s
                .labels
                .iter()
                .map(|l| Label {
                    bbox: BBox::new(
                        l.bbox.x1 * fx,
                        l.bbox.y1 * fy,
                        l.bbox.x2 * fx,
                        l.bbox.y2 * fy,
                    ),
                    ..*l
                })
                .collect();
            Ok(Sample {
                image: resize(&s.image.view(), out.width, out.height),
                labels,
            })
        }
    };
    let mut s = draw(rng)?;
    if plan.mixup_prob > 0.0 && rng.random::<f64>() < plan.mixup_prob {
        let other = draw(rng)?;
        let lambda = sample_mixup_lambda(cfg.mixup_beta, rng)?;
        s = mixup(&s, &other, lambda)?;
    }
    if plan.affine {
        s = geometric_distort(&s, cfg, rng)?;
    }
    if plan.hsv {
        s = hsv_distort(&s, &cfg.hsv, rng);
    }
    Ok(s)
}

/// Produce `count` augmented samples; output `i` uses stream `i` of `seed`,
/// so results do not depend on the execution mode.
pub fn augment_batch(
    mode: ExecMode,
    pool: &[Sample],
    cfg: &AugmentConfig,
    plan: &PipelinePlan,
    seed: u64,
    count: usize,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::invalid(
            "augmentation needs at least one input sample",
        ));
    }
    par::map_range(mode, count, |i| {
        let mut rng = seeded_rng(seed, i as u64);
        one_pipeline(pool, cfg, plan, &mut rng)
    })
    .into_iter()
    .collect()
}

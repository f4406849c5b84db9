//! Box fusion: NMS, Soft-NMS, weighted boxes fusion (WBF), the six-view
//! multi-scale test plan and per-category loss weights.
//!
//! All routines work on the detections of a single image. Use
//! [`fuse_batch`] to run one of them over many images.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    clip_boxes, iou, transform_boxes, BBox, Direction, ImageSize, ScoredBox, ViewTransform,
};
use crate::par::{self, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftNmsMode {
    Linear,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub softnms_mode: SoftNmsMode,
    pub softnms_sigma: f64,
    /// Multiply WBF confidences by `min(T, N) / T`.
    pub wbf_conf_rescale: bool,
    pub class_agnostic: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            iou_threshold: 0.5,
            score_threshold: 0.001,
            softnms_mode: SoftNmsMode::Gaussian,
            softnms_sigma: 0.5,
            wbf_conf_rescale: false,
            class_agnostic: false,
        }
    }
}

impl FusionConfig {
    pub fn with_iou(iou_threshold: f64) -> Self {
        FusionConfig {
            iou_threshold,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "iou_threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        if !(self.score_threshold >= 0.0 && self.score_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "score_threshold must lie in [0, 1), got {}",
                self.score_threshold
            )));
        }
        if !(self.softnms_sigma > 0.0 && self.softnms_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "softnms_sigma must be positive, got {}",
                self.softnms_sigma
            )));
        }
        Ok(())
    }

    fn same_group(&self, a: &ScoredBox, b: &ScoredBox) -> bool {
        self.class_agnostic || a.class_id == b.class_id
    }
}

/// Detections of one model on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrediction {
    pub model_id: String,
    pub weight: f64,
    pub detections: Vec<ScoredBox>,
}

impl ModelPrediction {
    pub fn new(
        model_id: impl Into<String>,
        weight: f64,
        detections: Vec<ScoredBox>,
    ) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!(
                "model weight must be positive, got {weight}"
            )));
        }
        Ok(ModelPrediction {
            model_id: model_id.into(),
            weight,
            detections,
        })
    }
}

/// Indices sorted by descending score; equal scores keep input order.
fn score_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Indices of the boxes kept by greedy NMS, in descending score order.
pub fn nms_indices(dets: &[ScoredBox], cfg: &FusionConfig) -> Vec<usize> {
    let order = score_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j]
                && cfg.same_group(&dets[i], &dets[j])
                && iou(&dets[i].bbox, &dets[j].bbox) > cfg.iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms(dets: &[ScoredBox], cfg: &FusionConfig) -> Vec<ScoredBox> {
    nms_indices(dets, cfg)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Soft-NMS returning `(input index, rescored box)` in selection order.
pub fn soft_nms_indexed(dets: &[ScoredBox], cfg: &FusionConfig) -> Vec<(usize, ScoredBox)> {
    let mut live: Vec<(usize, ScoredBox)> = dets
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, d)| d.score >= cfg.score_threshold)
        .collect();
    let mut out = Vec::with_capacity(live.len());
    while !live.is_empty() {
        let mut best = 0;
        for (k, (idx, d)) in live.iter().enumerate().skip(1) {
            let (bidx, bd) = &live[best];
            if d.score > bd.score || (d.score == bd.score && idx < bidx) {
                best = k;
            }
        }
        let (idx, picked) = live.remove(best);
        out.push((idx, picked));
        for (_, d) in live.iter_mut() {
            if !cfg.same_group(&picked, d) {
                continue;
            }
            let overlap = iou(&picked.bbox, &d.bbox);
            d.score *= soft_nms_decay(overlap, cfg);
        }
        live.retain(|(_, d)| d.score >= cfg.score_threshold);
    }
    out
}

/// Multiplicative score decay applied to a neighbour at the given IoU.
pub fn soft_nms_decay(overlap: f64, cfg: &FusionConfig) -> f64 {
    match cfg.softnms_mode {
        SoftNmsMode::Linear => {
            if overlap > cfg.iou_threshold {
                1.0 - overlap
            } else {
                1.0
            }
        }
        SoftNmsMode::Gaussian => (-(overlap * overlap) / cfg.softnms_sigma).exp(),
    }
}

pub fn soft_nms(dets: &[ScoredBox], cfg: &FusionConfig) -> Vec<ScoredBox> {
    soft_nms_indexed(dets, cfg)
        .into_iter()
        .map(|(_, d)| d)
        .collect()
}

struct Cluster {
    class_id: usize,
    fused: BBox,
    weighted: [f64; 4],
    plain: [f64; 4],
    score_sum: f64,
    members: usize,
}

impl Cluster {
    fn new(d: &ScoredBox) -> Self {
        let mut c = Cluster {
            class_id: d.class_id,
            fused: d.bbox,
            weighted: [0.0; 4],
            plain: [0.0; 4],
            score_sum: 0.0,
            members: 0,
        };
        c.push(d);
        c
    }

    fn push(&mut self, d: &ScoredBox) {
        let coords = d.bbox.to_array();
        for k in 0..4 {
            self.weighted[k] += d.score * coords[k];
            self.plain[k] += coords[k];
        }
        self.score_sum += d.score;
        self.members += 1;
        if self.members == 1 {
            self.fused = d.bbox;
            return;
        }
        let c = if self.score_sum > 0.0 {
            self.weighted.map(|v| v / self.score_sum)
        } else {
            self.plain.map(|v| v / self.members as f64)
        };
        self.fused = BBox {
            x1: c[0],
            y1: c[1],
            x2: c[2],
            y2: c[3],
        };
    }
}

/// Weighted boxes fusion over the predictions of several models for one image.
///
/// Scores are multiplied by the model weight. Boxes are visited in
/// descending weighted score; each
/// joins the first existing cluster of its class whose current fused box
/// overlaps it with IoU above the threshold, otherwise it opens a new
/// cluster. Fused coordinates are score-weighted means and the cluster
/// confidence is the mean member score.
pub fn wbf(preds: &[ModelPrediction], cfg: &FusionConfig) -> Vec<ScoredBox> {
    if preds.is_empty() {
        return Vec::new();
    }
    let pooled: Vec<ScoredBox> = preds
        .iter()
        .flat_map(|p| {
            let w = p.weight;
            p.detections
                .iter()
                .filter(|d| d.score >= cfg.score_threshold)
                .map(move |d| ScoredBox {
                    score: d.score * w,
                    ..*d
                })
        })
        .collect();

    let mut clusters: Vec<Cluster> = Vec::new();
    for i in score_order(&pooled) {
        let d = &pooled[i];
        let slot = clusters.iter().position(|c| {
            (cfg.class_agnostic || c.class_id == d.class_id)
                && iou(&c.fused, &d.bbox) > cfg.iou_threshold
        });
        match slot {
            Some(k) => clusters[k].push(d),
            None => clusters.push(Cluster::new(d)),
        }
    }

    let models = preds.len() as f64;
    let fused: Vec<ScoredBox> = clusters
        .iter()
        .map(|c| {
            let mut conf = c.score_sum / c.members as f64;
            if cfg.wbf_conf_rescale {
                conf *= (c.members as f64).min(models) / models;
            }
            ScoredBox::new(c.fused, conf, c.class_id)
        })
        .collect();
    score_order(&fused).into_iter().map(|i| fused[i]).collect()
}

/// Cross-model ensemble of already TTA-fused predictions.
pub fn ensemble_fuse(models: &[ModelPrediction], cfg: &FusionConfig) -> Vec<ScoredBox> {
    wbf(models, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleComposition {
    /// Each factor multiplies the base-scaled image.
    Multiplicative,
    /// Factors are absolute scales of the original image.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub base_scale: f64,
    pub factors: Vec<f64>,
    pub composition: ScaleComposition,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            base_scale: 1.3,
            factors: vec![1.0, 0.83, 0.67],
            composition: ScaleComposition::Multiplicative,
        }
    }
}

impl TtaConfig {
    pub fn scales(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .factors
            .iter()
            .map(|f| match self.composition {
                ScaleComposition::Multiplicative => self.base_scale * f,
                ScaleComposition::Absolute => *f,
            })
            .collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaPlan {
    pub views: Vec<ViewTransform>,
}

impl TtaPlan {
    pub fn source(&self) -> Option<ImageSize> {
        self.views.first().map(|v| v.source())
    }
}

/// The six ms-testing views: three scales, each unflipped then flipped.
pub fn tta_views(size: ImageSize) -> TtaPlan {
    tta_views_with(size, &TtaConfig::default()).expect("default plan is valid")
}

pub fn tta_views_with(size: ImageSize, cfg: &TtaConfig) -> Result<TtaPlan> {
    let scales = cfg.scales();
    for w in scales.windows(2) {
        if w[0] == w[1] {
            return Err(Error::invalid("ms-testing scales must be distinct"));
        }
    }
    let mut views = Vec::with_capacity(scales.len() * 2);
    for s in scales {
        views.push(ViewTransform::new(s, false, size)?);
        views.push(ViewTransform::new(s, true, size)?);
    }
    Ok(TtaPlan { views })
}

/// Map each view's detections back to the original frame, clip, and NMS.
pub fn tta_fuse(
    per_view: &[(ViewTransform, Vec<ScoredBox>)],
    cfg: &FusionConfig,
) -> Result<Vec<ScoredBox>> {
    let Some((first, _)) = per_view.first() else {
        return Ok(Vec::new());
    };
    let size = first.source();
    if let Some((v, _)) = per_view.iter().find(|(v, _)| v.source() != size) {
        return Err(Error::invalid(format!(
            "views disagree on source size: {}x{} vs {}x{}",
            size.width,
            size.height,
            v.source().width,
            v.source().height
        )));
    }
    let pooled: Vec<ScoredBox> = per_view
        .iter()
        .flat_map(|(v, dets)| transform_boxes(dets, v, Direction::Inverse))
        .collect();
    Ok(nms(&clip_boxes(&pooled, size), cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    Nms,
    SoftNms,
    Wbf,
}

/// Fuse several models' detections of one image. NMS variants pool raw
/// detections; WBF uses the model weights.
pub fn fuse_models(
    method: FusionMethod,
    preds: &[ModelPrediction],
    cfg: &FusionConfig,
) -> Vec<ScoredBox> {
    match method {
        FusionMethod::Wbf => wbf(preds, cfg),
        FusionMethod::Nms | FusionMethod::SoftNms => {
            let pooled: Vec<ScoredBox> = preds
                .iter()
                .flat_map(|p| p.detections.iter().copied())
                .collect();
            if method == FusionMethod::Nms {
                nms(&pooled, cfg)
            } else {
                soft_nms(&pooled, cfg)
            }
        }
    }
}

/// Per-image fusion over a batch of images.
pub fn fuse_batch(
    mode: ExecMode,
    method: FusionMethod,
    images: &[Vec<ModelPrediction>],
    cfg: &FusionConfig,
) -> Vec<Vec<ScoredBox>> {
    par::map(mode, images, |preds| fuse_models(method, preds, cfg))
}

/// Inverse-frequency class weights `(N_max / N_c)^exponent`, normalized to mean 1.
///
/// Classes without labels get the largest weight among labelled classes.
pub fn class_weights(label_counts: &[u64], exponent: f64) -> Result<Vec<f64>> {
    if !(exponent >= 0.0 && exponent.is_finite()) {
        return Err(Error::invalid(format!(
            "exponent must be >= 0, got {exponent}"
        )));
    }
    let max = label_counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::invalid(
            "class_weights needs at least one non-zero count",
        ));
    }
    let raw: Vec<Option<f64>> = label_counts
        .iter()
        .map(|&n| (n > 0).then(|| (max as f64 / n as f64).powf(exponent)))
        .collect();
    let top = raw.iter().flatten().copied().fold(0.0, f64::max);
    let raw: Vec<f64> = raw.into_iter().map(|w| w.unwrap_or(top)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

//! COCO-style detection evaluation: greedy matching, 101-point interpolated
//! AP over a range of IoU thresholds, and the class confusion matrix.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ScoredBox};
use crate::par::{self, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    /// Ignored regions absorb detections without producing TP, FP or FN.
    pub ignore: bool,
}

impl GroundTruthBox {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        GroundTruthBox {
            bbox,
            class_id,
            ignore: false,
        }
    }

    pub fn ignored(bbox: BBox) -> Self {
        GroundTruthBox {
            bbox,
            class_id: 0,
            ignore: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    /// Matched the ground truth with this index.
    Tp(usize),
    Fp,
    /// Only overlapped an ignored region.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetMatch {
    /// Index into the detection list passed to [`match_detections`].
    pub det_index: usize,
    pub class_id: usize,
    pub score: f64,
    pub outcome: Outcome,
}

/// Matching of one image's detections at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// Sorted by descending score.
    pub matches: Vec<DetMatch>,
    /// Non-ignored ground truth count per class.
    pub num_gt: BTreeMap<usize, usize>,
}

impl MatchResult {
    pub fn tp_count(&self) -> usize {
        self.matches
            .iter()
            .filter(|m| matches!(m.outcome, Outcome::Tp(_)))
            .count()
    }

    /// Restrict to a single class.
    pub fn for_class(&self, class_id: usize) -> MatchResult {
        MatchResult {
            matches: self
                .matches
                .iter()
                .filter(|m| m.class_id == class_id)
                .copied()
                .collect(),
            num_gt: self
                .num_gt
                .get(&class_id)
                .map(|&n| BTreeMap::from([(class_id, n)]))
                .unwrap_or_default(),
        }
    }
}

fn by_score_desc(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Fraction of the detection covered by an ignored region.
fn ignore_overlap(det: &BBox, region: &BBox) -> f64 {
    let area = det.area();
    if area <= 0.0 {
        0.0
    } else {
        det.intersection_area(region) / area
    }
}

/// Greedy matching in descending score order.
///
/// A detection takes the highest-IoU unmatched ground truth of its class
/// with IoU ≥ `iou_thr`. Failing that, if an ignored region covers at least
/// `iou_thr` of the detection's area the detection is ignored; otherwise it
/// is a false positive.
pub fn match_detections(dets: &[ScoredBox], gts: &[GroundTruthBox], iou_thr: f64) -> MatchResult {
    let mut num_gt = BTreeMap::new();
    for g in gts.iter().filter(|g| !g.ignore) {
        *num_gt.entry(g.class_id).or_insert(0) += 1;
    }
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::with_capacity(dets.len());
    for i in by_score_desc(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.ignore || taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let outcome = match best {
            Some((g, _)) => {
                taken[g] = true;
                Outcome::Tp(g)
            }
            None if gts
                .iter()
                .any(|g| g.ignore && ignore_overlap(&d.bbox, &g.bbox) >= iou_thr) =>
            {
                Outcome::Ignored
            }
            None => Outcome::Fp,
        };
        matches.push(DetMatch {
            det_index: i,
            class_id: d.class_id,
            score: d.score,
            outcome,
        });
    }
    MatchResult { matches, num_gt }
}

pub const RECALL_POINTS: usize = 101;

/// 101-point interpolated AP of one class at one threshold, pooled over
/// images in the given order. `None` when the class has no ground truth.
pub fn average_precision(results: &[MatchResult]) -> Option<f64> {
    let num_gt: usize = results.iter().flat_map(|r| r.num_gt.values()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut scored: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| r.matches.iter())
        .filter_map(|m| match m.outcome {
            Outcome::Tp(_) => Some((m.score, true)),
            Outcome::Fp => Some((m.score, false)),
            Outcome::Ignored => None,
        })
        .collect();
    // stable: ties keep image order, then per-image score order
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &scored {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let sum: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(sum / RECALL_POINTS as f64)
}

/// `start:step:stop` inclusive, e.g. `0.5:0.05:0.95`.
pub fn iou_range(start: f64, step: f64, stop: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && start > 0.0 && stop <= 1.0 && start <= stop) {
        return Err(Error::invalid(format!(
            "bad IoU range {start}:{step}:{stop}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    // snap to 1e-6 so 0.5 + 9 * 0.05 lands exactly on 0.95
    Ok((0..n)
        .map(|k| ((start + k as f64 * step) * 1e6).round() / 1e6)
        .collect())
}

pub fn parse_iou_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("bad IoU range '{spec}'")))?;
    match nums.as_slice() {
        [single] => iou_range(*single, 1.0, *single),
        [start, step, stop] => iou_range(*start, *step, *stop),
        _ => Err(Error::invalid(format!(
            "bad IoU range '{spec}', expected start:step:stop"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Keep at most this many detections per image, highest score first.
    pub max_dets: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: iou_range(0.5, 0.05, 0.95).expect("static range"),
            max_dets: Some(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_det: usize,
    /// AP at each configured threshold; `None` when the class has no ground truth.
    pub ap: Vec<Option<f64>>,
    pub ap50: Option<f64>,
    /// Mean over thresholds.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    pub ap50: f64,
    pub map: f64,
    pub num_images: usize,
    pub num_dets: usize,
    pub num_gts: usize,
}

impl EvalReport {
    pub fn class(&self, class_id: usize) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate(
    dets_by_image: &BTreeMap<String, Vec<ScoredBox>>,
    gts_by_image: &BTreeMap<String, Vec<GroundTruthBox>>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_with(ExecMode::default(), dets_by_image, gts_by_image, cfg)
}

pub fn evaluate_with(
    mode: ExecMode,
    dets_by_image: &BTreeMap<String, Vec<ScoredBox>>,
    gts_by_image: &BTreeMap<String, Vec<GroundTruthBox>>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let images: Vec<&String> = dets_by_image
        .keys()
        .chain(gts_by_image.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if images.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    if cfg.iou_thresholds.is_empty() {
        return Err(Error::invalid("at least one IoU threshold is required"));
    }
    let mut thresholds = cfg.iou_thresholds.clone();
    let ap50_slot = match thresholds.iter().position(|&t| (t - 0.5).abs() < 1e-12) {
        Some(k) => k,
        None => {
            thresholds.push(0.5);
            thresholds.len() - 1
        }
    };

    let empty_d: Vec<ScoredBox> = Vec::new();
    let empty_g: Vec<GroundTruthBox> = Vec::new();
    // per image: one MatchResult per threshold
    let per_image: Vec<(Vec<MatchResult>, usize, usize)> = par::map(mode, &images, |id| {
        let mut dets = dets_by_image.get(*id).unwrap_or(&empty_d).clone();
        if let Some(cap) = cfg.max_dets {
            if dets.len() > cap {
                let order = by_score_desc(&dets);
                dets = order[..cap].iter().map(|&i| dets[i]).collect();
            }
        }
        let gts = gts_by_image.get(*id).unwrap_or(&empty_g);
        let results = thresholds
            .iter()
            .map(|&t| match_detections(&dets, gts, t))
            .collect();
        (
            results,
            dets.len(),
            gts.iter().filter(|g| !g.ignore).count(),
        )
    });

    let mut classes: BTreeSet<usize> = BTreeSet::new();
    let mut det_count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    for (results, _, _) in &per_image {
        let r = &results[0];
        for m in &r.matches {
            classes.insert(m.class_id);
            *det_count.entry(m.class_id).or_insert(0) += 1;
        }
        for (&c, &n) in &r.num_gt {
            classes.insert(c);
            *gt_count.entry(c).or_insert(0) += n;
        }
    }

    let classes: Vec<usize> = classes.into_iter().collect();
    let class_aps: Vec<Vec<Option<f64>>> = par::map(mode, &classes, |&c| {
        (0..thresholds.len())
            .map(|t| {
                let pooled: Vec<MatchResult> = per_image
                    .iter()
                    .map(|(r, _, _)| r[t].for_class(c))
                    .collect();
                average_precision(&pooled)
            })
            .collect()
    });

    let n_cfg = cfg.iou_thresholds.len();
    let reports: Vec<ClassReport> = classes
        .iter()
        .zip(class_aps)
        .map(|(&c, aps)| {
            let ap50 = aps[ap50_slot];
            let ap: Vec<Option<f64>> = aps[..n_cfg].to_vec();
            let map = if gt_count.get(&c).copied().unwrap_or(0) > 0 {
                mean(ap.iter().map(|a| a.unwrap_or(0.0)))
            } else {
                None
            };
            ClassReport {
                class_id: c,
                num_gt: gt_count.get(&c).copied().unwrap_or(0),
                num_det: det_count.get(&c).copied().unwrap_or(0),
                ap,
                ap50,
                map,
            }
        })
        .collect();

    Ok(EvalReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        ap50: mean(reports.iter().filter_map(|r| r.ap50)).unwrap_or(0.0),
        map: mean(reports.iter().filter_map(|r| r.map)).unwrap_or(0.0),
        classes: reports,
        num_images: images.len(),
        num_dets: per_image.iter().map(|p| p.1).sum(),
        num_gts: per_image.iter().map(|p| p.2).sum(),
    })
}

/// `(K+1) x (K+1)` counts indexed `[predicted][true]`; the last row and
/// column stand for background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
    /// Boxes whose class is not in `classes`.
    pub skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionConfig {
    pub iou_threshold: f64,
    pub conf_threshold: f64,
}

impl Default for ConfusionConfig {
    fn default() -> Self {
        ConfusionConfig {
            iou_threshold: 0.45,
            conf_threshold: 0.25,
        }
    }
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<usize>) -> Self {
        let k = classes.len() + 1;
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; k]; k],
            skipped: 0,
        }
    }

    pub fn background(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }

    /// Class-agnostic greedy matching of one image: pairs above the IoU
    /// threshold are taken in descending IoU, each box at most once.
    pub fn accumulate(
        &mut self,
        dets: &[ScoredBox],
        gts: &[GroundTruthBox],
        cfg: &ConfusionConfig,
    ) {
        let bg = self.background();
        let mut gt_idx = Vec::new();
        let mut gt_boxes = Vec::new();
        for g in gts.iter().filter(|g| !g.ignore) {
            match self.index_of(g.class_id) {
                Some(k) => {
                    gt_idx.push(k);
                    gt_boxes.push(g.bbox);
                }
                None => self.skipped += 1,
            }
        }
        let mut det_idx = Vec::new();
        let mut det_boxes = Vec::new();
        for d in dets.iter().filter(|d| d.score >= cfg.conf_threshold) {
            match self.index_of(d.class_id) {
                Some(k) => {
                    det_idx.push(k);
                    det_boxes.push(d.bbox);
                }
                None => self.skipped += 1,
            }
        }

        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (g, gb) in gt_boxes.iter().enumerate() {
            for (d, db) in det_boxes.iter().enumerate() {
                let v = iou(gb, db);
                if v > cfg.iou_threshold {
                    pairs.push((v, g, d));
                }
            }
        }
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then((a.1, a.2).cmp(&(b.1, b.2)))
        });
        let mut gt_used = vec![false; gt_boxes.len()];
        let mut det_used = vec![false; det_boxes.len()];
        for (_, g, d) in pairs {
            if gt_used[g] || det_used[d] {
                continue;
            }
            gt_used[g] = true;
            det_used[d] = true;
            self.counts[det_idx[d]][gt_idx[g]] += 1;
        }
        for (g, used) in gt_used.iter().enumerate() {
            if !used {
                self.counts[bg][gt_idx[g]] += 1;
            }
        }
        for (d, used) in det_used.iter().enumerate() {
            if !used {
                self.counts[det_idx[d]][bg] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(
            self.classes, other.classes,
            "merging matrices over different classes"
        );
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
        self.skipped += other.skipped;
    }

    /// Column sums: ground-truth count per class (background column = FP total).
    pub fn true_totals(&self) -> Vec<u64> {
        let k = self.counts.len();
        (0..k)
            .map(|c| self.counts.iter().map(|row| row[c]).sum())
            .collect()
    }

    /// Row sums: detection count per predicted class (background row = FN total).
    pub fn predicted_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    /// CSV with a header row; `names` maps class ids to labels.
    pub fn to_csv(&self, names: impl Fn(usize) -> String) -> String {
        let labels: Vec<String> = self
            .classes
            .iter()
            .map(|&c| names(c))
            .chain(std::iter::once("background".to_string()))
            .collect();
        let mut out = String::from("predicted\\true");
        for l in &labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in labels.iter().zip(&self.counts) {
            out.push_str(l);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Single-image confusion matrix.
pub fn confusion_matrix(
    dets: &[ScoredBox],
    gts: &[GroundTruthBox],
    classes: &[usize],
    cfg: &ConfusionConfig,
) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(classes.to_vec());
    m.accumulate(dets, gts, cfg);
    m
}

/// Confusion matrix summed over a dataset.
pub fn confusion_over_images(
    mode: ExecMode,
    dets_by_image: &BTreeMap<String, Vec<ScoredBox>>,
    gts_by_image: &BTreeMap<String, Vec<GroundTruthBox>>,
    classes: &[usize],
    cfg: &ConfusionConfig,
) -> ConfusionMatrix {
    let images: Vec<&String> = dets_by_image
        .keys()
        .chain(gts_by_image.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let parts = par::map(mode, &images, |id| {
        confusion_matrix(
            dets_by_image.get(*id).map(Vec::as_slice).unwrap_or(&[]),
            gts_by_image.get(*id).map(Vec::as_slice).unwrap_or(&[]),
            classes,
            cfg,
        )
    });
    let mut total = ConfusionMatrix::new(classes.to_vec());
    for p in &parts {
        total.merge(p);
    }
    total
}

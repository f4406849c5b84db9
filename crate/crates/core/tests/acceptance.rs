//! Acceptance criteria, each checked against an independent oracle.
//!
//! Runs as a plain binary: one `PASS`/`FAIL` line per criterion, non-zero
//! exit status when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use tph_core::augmentation::{
    augment_batch, mask_tiny_labels, mixup, mosaic, seeded_rng, AugRng, AugmentConfig, Label,
    PipelinePlan, Sample, TinyRule, FILL_GRAY,
};
use tph_core::evaluation::{
    evaluate_with, ConfusionConfig, ConfusionMatrix, EvalConfig, GroundTruthBox,
};
use tph_core::fusion::{
    nms, soft_nms, tta_fuse, tta_views, wbf, FusionConfig, ModelPrediction, SoftNmsMode,
};
use tph_core::geometry::Direction;
use tph_core::io::detections::{read_detections, write_detections, DetectionRecord};
use tph_core::io::pnm::{read_pnm, write_ppm};
use tph_core::io::visdrone::{parse_visdrone, serialize_visdrone, VisDroneRecord};
use tph_core::nnblocks::cbam::cbam_forward;
use tph_core::nnblocks::encoder::attention_weights;
use tph_core::nnblocks::gradcheck::DEFAULT_EPS;
use tph_core::nnblocks::head::decode_dense;
use tph_core::nnblocks::schedule::DEFAULT_FINAL_FRACTION;
use tph_core::nnblocks::{
    cosine_lr, default_heads, grad_check, transformer_encoder_forward, CbamParams, EncoderParams,
    NormOrder, Tensor,
};
use tph_core::rescore::{
    build_patch_dataset, rescore_detections, train_tiny_classifier, RescorePolicy, TrainConfig,
};
use tph_core::{iou, BBox, ExecMode, ImageSize, ScoredBox};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> AugRng {
    seeded_rng(seed, 0xacce)
}

fn random_box(r: &mut AugRng, extent: f64, min_side: f64, max_side: f64) -> BBox {
    let w = r.random_range(min_side..max_side);
    let h = r.random_range(min_side..max_side);
    let x = r.random_range(0.0..extent - w);
    let y = r.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h)
}

/// Boxes scattered around a few centers so that overlaps are common.
fn clustered_boxes(r: &mut AugRng, n: usize, classes: usize) -> Vec<ScoredBox> {
    let anchors: Vec<BBox> = (0..r.random_range(1..=3))
        .map(|_| random_box(r, 100.0, 10.0, 40.0))
        .collect();
    (0..n)
        .map(|_| {
            let a = anchors[r.random_range(0..anchors.len())];
            let j = |r: &mut AugRng| r.random_range(-4.0..4.0);
            let b = BBox::new(a.x1 + j(r), a.y1 + j(r), a.x2 + j(r), a.y2 + j(r));
            ScoredBox::new(b, r.random_range(0.0..1.0), r.random_range(0..classes))
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn boxes_close(a: &BBox, b: &BBox, tol: f64) -> bool {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .all(|(x, y)| close(*x, y, tol))
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn wbf_oracle(preds: &[ModelPrediction], cfg: &FusionConfig) -> Vec<ScoredBox> {
    let mut pool = Vec::new();
    for p in preds {
        for d in &p.detections {
            if d.score >= cfg.score_threshold {
                pool.push(ScoredBox::new(d.bbox, d.score * p.weight, d.class_id));
            }
        }
    }
    let scores: Vec<f64> = pool.iter().map(|d| d.score).collect();
    let fused_box = |members: &[usize]| -> BBox {
        if members.len() == 1 {
            return pool[members[0]].bbox;
        }
        let total: f64 = members.iter().map(|&m| pool[m].score).sum();
        let coord = |k: usize| -> f64 {
            if total > 0.0 {
                members
                    .iter()
                    .map(|&m| pool[m].score * pool[m].bbox.to_array()[k])
                    .sum::<f64>()
                    / total
            } else {
                members
                    .iter()
                    .map(|&m| pool[m].bbox.to_array()[k])
                    .sum::<f64>()
                    / members.len() as f64
            }
        };
        BBox::new(coord(0), coord(1), coord(2), coord(3))
    };
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in descending(&scores) {
        let target = clusters.iter().position(|c| {
            pool[c[0]].class_id == pool[i].class_id
                && iou(&fused_box(c), &pool[i].bbox) > cfg.iou_threshold
        });
        match target {
            Some(k) => clusters[k].push(i),
            None => clusters.push(vec![i]),
        }
    }
    let t = preds.len() as f64;
    let fused: Vec<ScoredBox> = clusters
        .iter()
        .map(|c| {
            let n = c.len() as f64;
            let mut conf = c.iter().map(|&m| pool[m].score).sum::<f64>() / n;
            if cfg.wbf_conf_rescale {
                conf *= n.min(t) / t;
            }
            ScoredBox::new(fused_box(c), conf, pool[c[0]].class_id)
        })
        .collect();
    let order = descending(&fused.iter().map(|d| d.score).collect::<Vec<_>>());
    order.into_iter().map(|i| fused[i]).collect()
}

fn wbf_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut merged = 0usize;
    for case in 0..1000 {
        let models = r.random_range(1..=3);
        let mut remaining = r.random_range(0..=6usize);
        let preds: Vec<ModelPrediction> = (0..models)
            .map(|m| {
                let n = if m + 1 == models {
                    remaining
                } else {
                    r.random_range(0..=remaining)
                };
                remaining -= n;
                let w = if r.random_bool(0.5) {
                    1.0
                } else {
                    r.random_range(0.5..2.0)
                };
                ModelPrediction::new(format!("m{m}"), w, clustered_boxes(&mut r, n, 2)).unwrap()
            })
            .collect();
        let cfg = FusionConfig {
            iou_threshold: r.random_range(0.3..0.7),
            score_threshold: if r.random_bool(0.5) { 0.0 } else { 0.2 },
            wbf_conf_rescale: r.random_bool(0.5),
            ..FusionConfig::default()
        };
        let got = wbf(&preds, &cfg);
        let want = wbf_oracle(&preds, &cfg);
        let input: usize = preds.iter().map(|p| p.detections.len()).sum();
        if want.len() < input {
            merged += 1;
        }
        ensure!(
            got.len() == want.len(),
            "case {case}: {} fused boxes, oracle {}",
            got.len(),
            want.len()
        );
        for (g, w) in got.iter().zip(&want) {
            ensure!(
                g.class_id == w.class_id
                    && close(g.score, w.score, 1e-9)
                    && boxes_close(&g.bbox, &w.bbox, 1e-9),
                "case {case}: {g:?} vs oracle {w:?}"
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2} s");
    Ok(format!("1000 instances, {merged} with merges, {secs:.3} s"))
}

fn nms_oracle(dets: &[ScoredBox], thr: f64, agnostic: bool) -> Vec<ScoredBox> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = descending(&scores);
    let mut kept: Vec<usize> = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        // kept iff no higher-ranked kept box of its group overlaps it
        let blocked = order[..rank].iter().any(|&j| {
            kept.contains(&j)
                && (agnostic || dets[j].class_id == dets[i].class_id)
                && iou(&dets[j].bbox, &dets[i].bbox) > thr
        });
        if !blocked {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

fn nms_oracle_check() -> Outcome {
    let mut r = rng(2);
    let mut suppressed = 0usize;
    for case in 0..1000 {
        let n = r.random_range(0..=20);
        let mut dets = clustered_boxes(&mut r, n, 3);
        if r.random_bool(0.2) && n > 1 {
            dets[1].score = dets[0].score;
        }
        let cfg = FusionConfig {
            iou_threshold: r.random_range(0.2..0.8),
            class_agnostic: r.random_bool(0.3),
            ..FusionConfig::default()
        };
        let got = nms(&dets, &cfg);
        let want = nms_oracle(&dets, cfg.iou_threshold, cfg.class_agnostic);
        ensure!(got == want, "case {case}: {got:?} vs oracle {want:?}");
        ensure!(nms(&got, &cfg) == got, "case {case}: not idempotent");
        suppressed += n - got.len();
    }
    Ok(format!(
        "1000 instances exact, {suppressed} boxes suppressed, idempotent"
    ))
}

fn soft_nms_formulas() -> Outcome {
    // IoU([0,0,10,10], [0,0,10,6]) = 60 / 100
    let top = ScoredBox::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9, 0);
    let next = ScoredBox::new(BBox::new(0.0, 0.0, 10.0, 6.0), 0.8, 0);
    let linear = FusionConfig {
        iou_threshold: 0.5,
        score_threshold: 0.0,
        softnms_mode: SoftNmsMode::Linear,
        ..FusionConfig::default()
    };
    let out = soft_nms(&[top, next], &linear);
    ensure!(out.len() == 2 && out[0].score == 0.9, "linear: {out:?}");
    ensure!(
        close(out[1].score, 0.32, 1e-12),
        "linear: {} != 0.32",
        out[1].score
    );

    let gaussian = FusionConfig {
        softnms_mode: SoftNmsMode::Gaussian,
        softnms_sigma: 0.5,
        ..linear
    };
    let out = soft_nms(&[top, next], &gaussian);
    let want = 0.8 * (-0.72f64).exp();
    ensure!(
        close(out[1].score, want, 1e-12),
        "gaussian: {} != {want}",
        out[1].score
    );

    // below the linear threshold the score is untouched
    let low = ScoredBox::new(BBox::new(0.0, 0.0, 10.0, 3.0), 0.8, 0);
    let out = soft_nms(&[top, low], &linear);
    ensure!(
        out[1].score == 0.8,
        "linear below threshold: {}",
        out[1].score
    );
    Ok(format!("linear 0.32, gaussian {want:.12}"))
}

fn tta_plan() -> Outcome {
    let size = ImageSize::new(1920, 1080).unwrap();
    let plan = tta_views(size);
    ensure!(plan.views.len() == 6, "{} views", plan.views.len());
    let scales = [1.3, 1.3 * 0.83, 1.3 * 0.67];
    for (k, s) in scales.iter().enumerate() {
        for (flip, v) in [false, true].iter().zip(&plan.views[2 * k..2 * k + 2]) {
            ensure!(
                close(v.scale(), *s, 1e-12) && v.hflip() == *flip,
                "view {k}: {v:?}"
            );
        }
    }

    let mut r = rng(3);
    let mut worst = 0.0f64;
    for v in &plan.views {
        for _ in 0..1000 {
            let b = random_box(&mut r, 1000.0, 1.0, 200.0);
            let back = v.apply(&v.apply(&b, Direction::Forward), Direction::Inverse);
            for (x, y) in b.to_array().iter().zip(back.to_array()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure!(worst < 1e-6, "round-trip error {worst}");

    // a detector that sees the same objects in every view, moved by the view transform
    for case in 0..50 {
        let objects: Vec<ScoredBox> = (0..r.random_range(1..12))
            .map(|_| {
                ScoredBox::new(
                    random_box(&mut r, 1000.0, 5.0, 120.0),
                    r.random_range(0.05..1.0),
                    r.random_range(0..3),
                )
            })
            .collect();
        let cfg = FusionConfig::with_iou(0.5);
        let per_view: Vec<_> = plan
            .views
            .iter()
            .map(|v| {
                let seen = objects
                    .iter()
                    .map(|o| ScoredBox {
                        bbox: v.apply(&o.bbox, Direction::Forward),
                        ..*o
                    })
                    .collect();
                (*v, seen)
            })
            .collect();
        let fused = tta_fuse(&per_view, &cfg).map_err(|e| e.to_string())?;
        let single = nms(&objects, &cfg);
        ensure!(
            fused.len() == single.len(),
            "case {case}: {} fused vs {} single",
            fused.len(),
            single.len()
        );
        for (f, s) in fused.iter().zip(&single) {
            ensure!(
                f.class_id == s.class_id
                    && f.score == s.score
                    && boxes_close(&f.bbox, &s.bbox, 1e-9),
                "case {case}: {f:?} vs {s:?}"
            );
        }
    }
    Ok(format!(
        "6 views, round-trip error {worst:.2e}, equivariant detector matches on 50 scenes"
    ))
}

const THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// (score, is_tp) for one image, class and threshold, or None for ignored detections.
fn oracle_match(
    dets: &[ScoredBox],
    gts: &[GroundTruthBox],
    class: usize,
    thr: f64,
) -> Vec<(f64, bool)> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for i in descending(&scores) {
        let d = &dets[i];
        let mut best: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.ignore || used[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= thr && best.is_none_or(|b| v > iou(&d.bbox, &gts[b].bbox)) {
                best = Some(g);
            }
        }
        let outcome = match best {
            Some(g) => {
                used[g] = true;
                Some(true)
            }
            None => {
                let covered = gts.iter().any(|g| {
                    g.ignore
                        && d.bbox.area() > 0.0
                        && d.bbox.intersection_area(&g.bbox) / d.bbox.area() >= thr
                });
                if covered {
                    None
                } else {
                    Some(false)
                }
            }
        };
        if d.class_id == class {
            if let Some(tp) = outcome {
                out.push((d.score, tp));
            }
        }
    }
    out
}

/// AP as the mean over 101 recall levels of the best precision at any
/// rank reaching that recall.
fn oracle_ap(ranked: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0).then(a.cmp(&b)));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for i in order {
        seen += 1;
        if ranked[i].1 {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / seen as f64));
    }
    let mut sum = 0.0;
    for k in 0..101 {
        let level = k as f64 / 100.0;
        sum += points
            .iter()
            .filter(|p| p.0 >= level)
            .map(|p| p.1)
            .fold(0.0, f64::max);
    }
    sum / 101.0
}

fn evaluator_oracle() -> Outcome {
    let mut r = rng(4);
    let cfg = EvalConfig {
        iou_thresholds: THRESHOLDS.to_vec(),
        max_dets: None,
    };
    let grid_box = |r: &mut AugRng| {
        let x = r.random_range(0..6) as f64 * 4.0;
        let y = r.random_range(0..6) as f64 * 4.0;
        BBox::new(
            x,
            y,
            x + r.random_range(4..14) as f64,
            y + r.random_range(4..14) as f64,
        )
    };
    let mut nontrivial = 0usize;
    for case in 0..500 {
        let images = r.random_range(1..=2);
        let mut dets = BTreeMap::new();
        let mut gts = BTreeMap::new();
        for im in 0..images {
            let d: Vec<ScoredBox> = (0..r.random_range(0..=5))
                .map(|_| {
                    ScoredBox::new(
                        grid_box(&mut r),
                        r.random_range(0.0..1.0),
                        r.random_range(0..2),
                    )
                })
                .collect();
            let g: Vec<GroundTruthBox> = (0..r.random_range(0..=5))
                .map(|_| {
                    if r.random_bool(0.15) {
                        GroundTruthBox::ignored(grid_box(&mut r))
                    } else {
                        GroundTruthBox::new(grid_box(&mut r), r.random_range(0..2))
                    }
                })
                .collect();
            dets.insert(format!("img{im}"), d);
            gts.insert(format!("img{im}"), g);
        }
        let report =
            evaluate_with(ExecMode::Sequential, &dets, &gts, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            report.iou_thresholds == THRESHOLDS,
            "thresholds {:?}",
            report.iou_thresholds
        );
        let mut classes: Vec<usize> = dets
            .values()
            .flatten()
            .map(|d| d.class_id)
            .chain(
                gts.values()
                    .flatten()
                    .filter(|g| !g.ignore)
                    .map(|g| g.class_id),
            )
            .collect();
        classes.sort_unstable();
        classes.dedup();
        ensure!(
            report.classes.len() == classes.len(),
            "case {case}: classes {:?}",
            report.classes
        );
        for (c, rep) in classes.iter().zip(&report.classes) {
            let num_gt: usize = gts
                .values()
                .flatten()
                .filter(|g| !g.ignore && g.class_id == *c)
                .count();
            ensure!(
                rep.class_id == *c && rep.num_gt == num_gt,
                "case {case}: class {c} header"
            );
            for (t, thr) in THRESHOLDS.iter().enumerate() {
                let want = (num_gt > 0).then(|| {
                    let ranked: Vec<(f64, bool)> = dets
                        .keys()
                        .flat_map(|id| oracle_match(&dets[id], &gts[id], *c, *thr))
                        .collect();
                    oracle_ap(&ranked, num_gt)
                });
                ensure!(
                    rep.ap[t] == want,
                    "case {case}: class {c} AP@{thr} {:?} vs oracle {want:?}",
                    rep.ap[t]
                );
                if want.is_some_and(|a| a > 0.0 && a < 1.0) {
                    nontrivial += 1;
                }
            }
            ensure!(rep.ap50 == rep.ap[0], "case {case}: AP50 mismatch");
        }
    }

    let gt = BTreeMap::from([(
        "a".to_string(),
        vec![GroundTruthBox::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0)],
    )]);
    let hand = BTreeMap::from([(
        "a".to_string(),
        vec![
            ScoredBox::new(BBox::new(50.0, 50.0, 60.0, 60.0), 0.9, 0),
            ScoredBox::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0.8, 0),
        ],
    )]);
    let report =
        evaluate_with(ExecMode::Sequential, &hand, &gt, &cfg).map_err(|e| e.to_string())?;
    ensure!(report.ap50 == 0.5, "hand case AP50 {}", report.ap50);
    Ok(format!(
        "500 instances exact ({nontrivial} fractional APs), hand case AP = 0.5"
    ))
}

fn confusion_checks() -> Outcome {
    let cfg = ConfusionConfig::default();
    ensure!(
        cfg.iou_threshold == 0.45 && cfg.conf_threshold == 0.25,
        "defaults {cfg:?}"
    );
    let b = BBox::new;
    let gts = vec![
        GroundTruthBox::new(b(0.0, 0.0, 10.0, 10.0), 1),
        GroundTruthBox::new(b(20.0, 0.0, 30.0, 10.0), 2),
        GroundTruthBox::new(b(40.0, 0.0, 50.0, 10.0), 3),
        GroundTruthBox::new(b(60.0, 0.0, 70.0, 10.0), 1),
        GroundTruthBox::ignored(b(0.0, 50.0, 100.0, 100.0)),
    ];
    let dets = vec![
        // exact hit
        ScoredBox::new(b(0.0, 0.0, 10.0, 10.0), 0.9, 1),
        // class confusion 2 -> 3, IoU 0.6
        ScoredBox::new(b(20.0, 0.0, 30.0, 6.0), 0.5, 3),
        // below the confidence threshold, GT 3 stays unmatched
        ScoredBox::new(b(40.0, 0.0, 50.0, 10.0), 0.2, 3),
        // IoU 0.4 is not enough
        ScoredBox::new(b(60.0, 0.0, 70.0, 4.0), 0.8, 1),
        // nothing there
        ScoredBox::new(b(200.0, 200.0, 210.0, 210.0), 0.7, 2),
    ];
    let mut m = ConfusionMatrix::new(vec![1, 2, 3]);
    m.accumulate(&dets, &gts, &cfg);
    // rows: predicted 1, 2, 3, background; columns: true 1, 2, 3, background
    let want = vec![
        vec![1, 0, 0, 1],
        vec![0, 0, 0, 1],
        vec![0, 1, 0, 0],
        vec![1, 0, 1, 0],
    ];
    ensure!(m.counts == want, "hand matrix {:?} vs {want:?}", m.counts);

    // IoU of exactly 0.45 does not match
    let edge = ConfusionMatrix::new(vec![1]);
    let mut edge = edge;
    edge.accumulate(
        &[ScoredBox::new(b(0.0, 0.0, 9.0, 10.0), 0.9, 1)],
        &[GroundTruthBox::new(b(0.0, 0.0, 20.0, 10.0), 1)],
        &cfg,
    );
    ensure!(
        edge.counts == vec![vec![0, 1], vec![1, 0]],
        "IoU 0.45 edge {:?}",
        edge.counts
    );

    let mut r = rng(5);
    for case in 0..1000 {
        let (nd, ng) = (r.random_range(0..10), r.random_range(0..10));
        let d: Vec<ScoredBox> = clustered_boxes(&mut r, nd, 3)
            .into_iter()
            .map(|x| ScoredBox {
                class_id: x.class_id + 1,
                ..x
            })
            .collect();
        let g: Vec<GroundTruthBox> = clustered_boxes(&mut r, ng, 3)
            .into_iter()
            .map(|x| {
                if r.random_bool(0.1) {
                    GroundTruthBox::ignored(x.bbox)
                } else {
                    GroundTruthBox::new(x.bbox, x.class_id + 1)
                }
            })
            .collect();
        let mut m = ConfusionMatrix::new(vec![1, 2, 3]);
        m.accumulate(&d, &g, &cfg);
        let cols = m.true_totals();
        let rows = m.predicted_totals();
        for c in 1..=3usize {
            let n_gt = g.iter().filter(|x| !x.ignore && x.class_id == c).count() as u64;
            let n_det = d
                .iter()
                .filter(|x| x.score >= 0.25 && x.class_id == c)
                .count() as u64;
            ensure!(
                cols[c - 1] == n_gt,
                "case {case}: column {c} sums to {} not {n_gt}",
                cols[c - 1]
            );
            ensure!(
                rows[c - 1] == n_det,
                "case {case}: row {c} sums to {} not {n_det}",
                rows[c - 1]
            );
        }
    }
    Ok("hand-counted matrix exact, marginals reconcile on 1000 instances".into())
}

fn gradient_checks() -> Outcome {
    let mut r = rng(6);
    let mut worst = Vec::new();
    for (norm, label) in [
        (NormOrder::PreNorm, "encoder pre-norm"),
        (NormOrder::PostNorm, "encoder post-norm"),
    ] {
        let mut p = EncoderParams::random(8, 2, 4, 11).map_err(|e| e.to_string())?;
        p.norm = norm;
        let x = Tensor::from_shape_fn(vec![5, 8], |_| r.random_range(-1.5..1.5));
        let rep = grad_check(&p, &x, DEFAULT_EPS).map_err(|e| e.to_string())?;
        ensure!(
            rep.max_error() < 1e-4,
            "{label}: max relative error {:e}",
            rep.max_error()
        );
        worst.push(format!("{label} {:.1e}", rep.max_error()));
    }
    for (c, red, k, seed) in [(4, 2, 3, 5), (8, 4, 7, 9)] {
        let p = CbamParams::random(c, red, k, seed).map_err(|e| e.to_string())?;
        let x = Tensor::from_shape_fn(vec![c, 5, 6], |_| r.random_range(-1.5..1.5));
        let rep = grad_check(&p, &x, DEFAULT_EPS).map_err(|e| e.to_string())?;
        ensure!(
            rep.max_error() < 1e-4,
            "CBAM C={c}: max relative error {:e}",
            rep.max_error()
        );
        worst.push(format!("CBAM C={c} {:.1e}", rep.max_error()));
    }

    let p = EncoderParams::random(16, 4, 4, 3).map_err(|e| e.to_string())?;
    let mut worst_row = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(1..20);
        let x = Array2::from_shape_fn((n, 16), |_| r.random_range(-4.0..4.0));
        for a in attention_weights(x.view(), &p).map_err(|e| e.to_string())? {
            for row in a.rows() {
                worst_row = worst_row.max((row.sum() - 1.0).abs());
                ensure!(row.iter().all(|v| *v >= 0.0), "negative attention weight");
            }
        }
    }
    ensure!(worst_row <= 1e-9, "attention row sum off by {worst_row:e}");

    for trial in 0..50 {
        let n = r.random_range(2..16);
        let x = Array2::from_shape_fn((n, 16), |_| r.random_range(-3.0..3.0));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let out = transformer_encoder_forward(x.view(), &p, None).map_err(|e| e.to_string())?;
        let pout = transformer_encoder_forward(x.select(Axis(0), &perm).view(), &p, None)
            .map_err(|e| e.to_string())?;
        ensure!(
            pout == out.select(Axis(0), &perm),
            "trial {trial}: permutation changed token outputs"
        );
    }

    for seed in 0..50 {
        let p = CbamParams::random(8, 2, 3, seed).map_err(|e| e.to_string())?;
        let f = Array3::from_shape_fn((8, 6, 7), |_| r.random_range(-5.0..5.0));
        let out = cbam_forward(f.view(), &p).map_err(|e| e.to_string())?;
        ensure!(
            out.iter().zip(f.iter()).all(|(o, i)| o.abs() <= i.abs()),
            "seed {seed}: |out| > |in|"
        );
    }
    Ok(format!(
        "{}; row sums within {worst_row:.1e}; permutation exact; CBAM bound holds",
        worst.join(", ")
    ))
}

fn head_decode() -> Outcome {
    let classes = 10;
    let heads = default_heads(classes);
    let strides: Vec<u32> = heads.iter().map(|h| h.stride).collect();
    ensure!(strides == [4, 8, 16, 32], "strides {strides:?}");
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for spec in &heads {
        let (a, h, w) = (spec.anchors.len(), 3, 4);
        let zero = Array4::zeros((a, h, w, 5 + classes));
        let dense = decode_dense(zero.view(), spec).map_err(|e| e.to_string())?;
        let s = spec.stride as f64;
        for ai in 0..a {
            for y in 0..h {
                for x in 0..w {
                    let o = dense.slice(ndarray::s![ai, y, x, ..]);
                    let want = [
                        (x as f64 + 0.5) * s,
                        (y as f64 + 0.5) * s,
                        spec.anchors[ai].0,
                        spec.anchors[ai].1,
                    ];
                    ensure!(
                        o.iter().take(4).zip(want).all(|(g, w)| *g == w),
                        "stride {s}: t=0 decodes to {:?}, want {want:?}",
                        o.iter().take(4).collect::<Vec<_>>()
                    );
                }
            }
        }

        let n = 10_000usize.div_ceil(a * h * w);
        for _ in 0..n {
            let raw =
                Array4::from_shape_fn((a, h, w, 5 + classes), |_| r.random_range(-30.0..30.0));
            let dense = decode_dense(raw.view(), spec).map_err(|e| e.to_string())?;
            for ((ai, y, x, ch), v) in dense.indexed_iter() {
                let _ = ai;
                let cell = match ch {
                    0 => x,
                    1 => y,
                    _ => continue,
                } as f64;
                let offset = v / s - cell;
                ensure!(
                    (-0.5..=1.5).contains(&offset),
                    "stride {s}: center offset {offset}"
                );
                worst = worst.max((offset - 0.5).abs());
            }
        }
    }
    Ok(format!("4 heads, t=0 exact, centers within the cell +/- half a stride (max |offset - 0.5| = {worst:.4})"))
}

fn cosine_endpoints() -> Outcome {
    for (total, lr0) in [(101usize, 0.01), (301, 0.032), (3, 1.0)] {
        let first = cosine_lr(0, total, lr0, DEFAULT_FINAL_FRACTION).map_err(|e| e.to_string())?;
        let last =
            cosine_lr(total - 1, total, lr0, DEFAULT_FINAL_FRACTION).map_err(|e| e.to_string())?;
        let mid = cosine_lr((total - 1) / 2, total, lr0, DEFAULT_FINAL_FRACTION)
            .map_err(|e| e.to_string())?;
        ensure!(first == lr0, "lr(0) = {first}, want {lr0}");
        ensure!(last == 0.12 * lr0, "lr(last) = {last}, want {}", 0.12 * lr0);
        ensure!(
            close(mid, 0.56 * lr0, 1e-12),
            "midpoint {mid}, want {}",
            0.56 * lr0
        );
    }
    Ok("lr(0) = lr0, lr(last) = 0.12 lr0 exactly; midpoint 0.56 lr0".into())
}

fn solid_sample(r: &mut AugRng, color: f64, tag: usize) -> Sample {
    let w = r.random_range(30..120usize);
    let h = r.random_range(30..120usize);
    let mut s = Sample::solid(w, h, color);
    for j in 0..r.random_range(0..5usize) {
        let b = random_box(r, w.min(h) as f64, 2.0, (w.min(h) as f64 / 2.0).max(3.0));
        s.labels.push(Label::new(tag * 10 + j, b));
    }
    s
}

fn augmentation_checks() -> Outcome {
    let colors = [10.0, 60.0, 170.0, 230.0];
    let mut r = rng(8);
    let cfg = AugmentConfig {
        mosaic_output: ImageSize::new(128, 96).unwrap(),
        ..AugmentConfig::default()
    };
    let mut labels_seen = 0usize;
    for run in 0..100u64 {
        let samples: Vec<Sample> = (0..4).map(|k| solid_sample(&mut r, colors[k], k)).collect();
        let out = mosaic(&samples, &cfg, &mut seeded_rng(run, 1)).map_err(|e| e.to_string())?;
        let (hh, ww, _) = out.image.dim();
        ensure!((ww, hh) == (128, 96), "run {run}: canvas {ww}x{hh}");
        // the bottom-right sample starts at the mosaic center
        let is = |y: usize, x: usize, c: f64| (out.image[[y, x, 0]] - c).abs() < 1e-9;
        let xc = (0..ww)
            .find(|&x| (0..hh).any(|y| is(y, x, colors[3])))
            .ok_or("no bottom-right pixels")?;
        let yc = (0..hh)
            .find(|&y| (0..ww).any(|x| is(y, x, colors[3])))
            .ok_or("no bottom-right pixels")?;
        let (w_out, h_out) = (128.0, 96.0);
        for (k, s) in samples.iter().enumerate() {
            let (h, w, _) = s.image.dim();
            let scale = (w_out / (2.0 * w as f64)).min(h_out / (2.0 * h as f64));
            let nw = (w as f64 * scale).round() as i64;
            let nh = (h as f64 * scale).round() as i64;
            let (xc, yc) = (xc as i64, yc as i64);
            let (x0, y0) = (
                if k % 2 == 0 { xc - nw } else { xc },
                if k < 2 { yc - nh } else { yc },
            );
            let (qx0, qx1) = if k % 2 == 0 { (0, xc) } else { (xc, 128) };
            let (qy0, qy1) = if k < 2 { (0, yc) } else { (yc, 96) };
            let (vx0, vx1, vy0, vy1) =
                (qx0.max(x0), qx1.min(x0 + nw), qy0.max(y0), qy1.min(y0 + nh));
            for y in qy0..qy1 {
                for x in qx0..qx1 {
                    let inside = x >= vx0 && x < vx1 && y >= vy0 && y < vy1;
                    let want = if inside { colors[k] } else { FILL_GRAY };
                    for c in 0..3 {
                        let got = out.image[[y as usize, x as usize, c]];
                        ensure!(
                            (got - want).abs() < 1e-9 && (inside || got == FILL_GRAY),
                            "run {run}: quadrant {k} pixel ({x}, {y}) = {got}, want {want}"
                        );
                    }
                }
            }
            let (fx, fy) = (nw as f64 / w as f64, nh as f64 / h as f64);
            let visible = BBox::new(vx0 as f64, vy0 as f64, vx1 as f64, vy1 as f64);
            let expected: Vec<(usize, BBox)> = s
                .labels
                .iter()
                .filter_map(|l| {
                    let m = BBox::new(
                        l.bbox.x1 * fx + x0 as f64,
                        l.bbox.y1 * fy + y0 as f64,
                        l.bbox.x2 * fx + x0 as f64,
                        l.bbox.y2 * fy + y0 as f64,
                    );
                    let kept = BBox::new(
                        m.x1.max(visible.x1).min(visible.x2),
                        m.y1.max(visible.y1).min(visible.y2),
                        m.x2.max(visible.x1).min(visible.x2),
                        m.y2.max(visible.y1).min(visible.y2),
                    );
                    (vx0 < vx1
                        && vy0 < vy1
                        && kept.area() > 0.0
                        && kept.area() / m.area() >= cfg.min_box_survival)
                        .then_some((l.class_id, kept))
                })
                .collect();
            let got: Vec<&Label> = out.labels.iter().filter(|l| l.class_id / 10 == k).collect();
            ensure!(
                got.len() == expected.len(),
                "run {run}: quadrant {k} kept {} labels, want {}",
                got.len(),
                expected.len()
            );
            for (g, (id, b)) in got.iter().zip(&expected) {
                ensure!(
                    g.class_id == *id && boxes_close(&g.bbox, b, 1e-9),
                    "run {run}: label {g:?} vs {b:?}"
                );
                ensure!(
                    g.bbox.x1 >= visible.x1
                        && g.bbox.x2 <= visible.x2
                        && g.bbox.y1 >= visible.y1
                        && g.bbox.y2 <= visible.y2
                        && g.bbox.area() > 0.0,
                    "run {run}: label {g:?} leaves its quadrant"
                );
            }
            labels_seen += got.len();
        }
    }

    let mut worst_mix = 0.0f64;
    for _ in 0..20 {
        let a = Sample::new(
            Array3::from_shape_fn((17, 23, 3), |_| r.random_range(0.0..255.0)),
            vec![Label::new(1, BBox::new(1.0, 1.0, 5.0, 5.0))],
        )
        .unwrap();
        let b = Sample::new(
            Array3::from_shape_fn((17, 23, 3), |_| r.random_range(0.0..255.0)),
            vec![Label::new(2, BBox::new(2.0, 2.0, 9.0, 9.0))],
        )
        .unwrap();
        let lambda = r.random_range(0.0..=1.0);
        let m = mixup(&a, &b, lambda).map_err(|e| e.to_string())?;
        for ((o, x), y) in m.image.iter().zip(&a.image).zip(&b.image) {
            worst_mix = worst_mix.max((o - (y + lambda * (x - y))).abs());
        }
        ensure!(
            m.labels.len() == 2
                && close(m.labels[0].weight, lambda, 1e-12)
                && close(m.labels[1].weight, 1.0 - lambda, 1e-12),
            "mixup label weights"
        );
        ensure!(
            mixup(&a, &b, 1.0).unwrap().image == a.image
                && mixup(&a, &b, 0.0).unwrap().image == b.image,
            "mixup endpoints"
        );
    }
    ensure!(worst_mix <= 1e-9, "mixup off by {worst_mix:e}");

    // 1920-wide frames at 1536 shrink by 0.8: tiny means max side < 3.75 px
    let rule = TinyRule::default();
    let mut removed_total = 0usize;
    for run in 0..20 {
        let (w, h) = (1920usize, 1080usize);
        let mut s = Sample::new(
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                ((x * 7 + y * 13 + c * 29) % 200) as f64
            }),
            Vec::new(),
        )
        .unwrap();
        for j in 0..40 {
            let side_w = r.random_range(1.0..8.0f64);
            let side_h = r.random_range(1.0..8.0f64);
            let x = r.random_range(0.0..(w as f64 - 10.0));
            let y = r.random_range(0.0..(h as f64 - 10.0));
            s.labels
                .push(Label::new(j, BBox::new(x, y, x + side_w, y + side_h)));
        }
        let tiny: Vec<bool> = s
            .labels
            .iter()
            .map(|l| l.bbox.width().max(l.bbox.height()) * 1536.0 / 1920.0 < 3.0)
            .collect();
        let masked = mask_tiny_labels(&s, &rule);
        let kept: Vec<usize> = masked.labels.iter().map(|l| l.class_id).collect();
        let want: Vec<usize> = (0..s.labels.len()).filter(|&i| !tiny[i]).collect();
        ensure!(kept == want, "run {run}: kept {kept:?}, want {want:?}");
        let mut painted = ndarray::Array2::from_elem((h, w), false);
        for (l, _) in s.labels.iter().zip(&tiny).filter(|(_, t)| **t) {
            for y in l.bbox.y1.floor() as usize..l.bbox.y2.ceil() as usize {
                for x in l.bbox.x1.floor() as usize..l.bbox.x2.ceil() as usize {
                    painted[[y, x]] = true;
                }
            }
        }
        for ((y, x, c), v) in masked.image.indexed_iter() {
            let want = if painted[[y, x]] {
                FILL_GRAY
            } else {
                s.image[[y, x, c]]
            };
            ensure!(*v == want, "run {run}: pixel ({x}, {y}) = {v}, want {want}");
        }
        let again = mask_tiny_labels(&masked, &rule);
        ensure!(again == masked, "run {run}: masking is not idempotent");
        removed_total += tiny.iter().filter(|t| **t).count();
    }

    let pool: Vec<Sample> = (0..4)
        .map(|k| solid_sample(&mut r, colors[k], k))
        .chain((0..2).map(common::color_scene))
        .collect();
    let aug_cfg = AugmentConfig {
        mosaic_output: ImageSize::new(96, 96).unwrap(),
        ..AugmentConfig::default()
    };
    let plan = PipelinePlan::default();
    let a = augment_batch(ExecMode::Parallel, &pool, &aug_cfg, &plan, 42, 12)
        .map_err(|e| e.to_string())?;
    let b = augment_batch(ExecMode::Parallel, &pool, &aug_cfg, &plan, 42, 12)
        .map_err(|e| e.to_string())?;
    let c = augment_batch(ExecMode::Sequential, &pool, &aug_cfg, &plan, 42, 12)
        .map_err(|e| e.to_string())?;
    let d = augment_batch(ExecMode::Sequential, &pool, &aug_cfg, &plan, 43, 12)
        .map_err(|e| e.to_string())?;
    let bits = |v: &[Sample]| -> Vec<u64> {
        v.iter()
            .flat_map(|s| {
                s.image
                    .iter()
                    .map(|x| x.to_bits())
                    .chain(s.labels.iter().flat_map(|l| {
                        l.bbox
                            .to_array()
                            .map(f64::to_bits)
                            .into_iter()
                            .chain([l.weight.to_bits(), l.class_id as u64])
                    }))
            })
            .collect()
    };
    ensure!(
        bits(&a) == bits(&b) && bits(&a) == bits(&c),
        "same seed gave different outputs"
    );
    ensure!(
        bits(&a) != bits(&d),
        "different seeds gave identical outputs"
    );
    Ok(format!(
        "100 mosaics exact ({labels_seen} labels checked), mixup within {worst_mix:.1e}, {removed_total} tiny labels masked exactly, seeds bit-identical"
    ))
}

fn rescore_pipeline() -> Outcome {
    let start = Instant::now();
    let scenes: Vec<Sample> = (0..6).map(common::color_scene).collect();
    let train = build_patch_dataset(ExecMode::default(), &scenes, None);
    let clf = train_tiny_classifier(
        &train,
        &TrainConfig {
            epochs: 60,
            ..TrainConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        clf.train_accuracy == 1.0,
        "train accuracy {}",
        clf.train_accuracy
    );

    let mut r = rng(9);
    let (mut total, mut restored) = (0usize, 0usize);
    for seed in 100..110 {
        let scene = common::color_scene(seed);
        let dets: Vec<ScoredBox> = scene
            .labels
            .iter()
            .map(|l| {
                let class_id = if r.random_bool(0.3) {
                    l.class_id % 3 + 1
                } else {
                    l.class_id
                };
                ScoredBox::new(l.bbox, r.random_range(0.3..1.0), class_id)
            })
            .collect();
        let out = rescore_detections(
            ExecMode::default(),
            &dets,
            scene.image.view(),
            &clf,
            &RescorePolicy::default(),
        )
        .map_err(|e| e.to_string())?;
        ensure!(out.len() == dets.len(), "detection count changed");
        for ((o, d), l) in out.iter().zip(&dets).zip(&scene.labels) {
            ensure!(
                o.bbox == d.bbox && o.score == d.score,
                "box or score changed: {o:?} vs {d:?}"
            );
            total += 1;
            restored += usize::from(o.class_id == l.class_id);
        }
    }
    let frac = restored as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    ensure!(frac >= 0.95, "restored {restored}/{total}");
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "train accuracy 1.0, restored {restored}/{total} labels, {secs:.2} s"
    ))
}

fn io_round_trips() -> Outcome {
    let mut r = rng(10);
    let records: Vec<VisDroneRecord> = (0..10_000)
        .map(|_| VisDroneRecord {
            bbox_left: r.random_range(0..4000),
            bbox_top: r.random_range(0..3000),
            bbox_width: r.random_range(0..500),
            bbox_height: r.random_range(0..500),
            score: r.random_range(0..=1),
            category: r.random_range(0..=11),
            truncation: r.random_range(0..=2),
            occlusion: r.random_range(0..=2),
        })
        .collect();
    let text = serialize_visdrone(&records);
    let back = parse_visdrone(&text).map_err(|e| e.to_string())?;
    ensure!(back == records, "VisDrone records changed");
    ensure!(serialize_visdrone(&back) == text, "VisDrone text changed");

    for (w, h) in [(1, 1), (37, 19), (256, 128)] {
        let img = Array3::from_shape_fn((h, w, 3), |_| r.random_range(0..=255u8) as f64);
        let bytes = write_ppm(&img).map_err(|e| e.to_string())?;
        let back = read_pnm(&bytes).map_err(|e| e.to_string())?;
        ensure!(back == img, "PPM {w}x{h} pixels changed");
        ensure!(
            write_ppm(&back).map_err(|e| e.to_string())? == bytes,
            "PPM {w}x{h} bytes changed"
        );
    }

    let dets: Vec<DetectionRecord> = (0..5000)
        .map(|i| DetectionRecord {
            image_id: format!("seq_{}/frame \"{}\"", i % 7, i),
            class_id: r.random_range(0..12),
            score: r.random_range(0.0..=1.0),
            bbox: [
                r.random_range(-10.0..2000.0),
                r.random_range(-10.0..2000.0),
                r.random_range(0.0..4000.0),
                f64::from(r.random::<u32>()) * 1e-3,
            ],
        })
        .collect();
    let text = write_detections(&dets).map_err(|e| e.to_string())?;
    let back = read_detections(&text).map_err(|e| e.to_string())?;
    if let Some((a, b)) = back.iter().zip(&dets).find(|(a, b)| a != b) {
        return Err(format!("detection record changed: {a:?} vs {b:?}"));
    }
    ensure!(back.len() == dets.len(), "detection count changed");
    Ok("10000 VisDrone records, 3 PPM images bit-exact, 5000 detections lossless".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("WBF equivalence", wbf_equivalence),
        ("NMS oracle", nms_oracle_check),
        ("Soft-NMS formulas", soft_nms_formulas),
        ("TTA plan", tta_plan),
        ("Evaluator oracle", evaluator_oracle),
        ("Confusion matrix", confusion_checks),
        ("Gradient checks", gradient_checks),
        ("Head decode", head_decode),
        ("Cosine LR endpoints", cosine_endpoints),
        ("Augmentation", augmentation_checks),
        ("Rescore pipeline", rescore_pipeline),
        ("I/O round trips", io_round_trips),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name} ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({detail})");
            }
        }
    }
    println!("{} passed, {failed} failed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

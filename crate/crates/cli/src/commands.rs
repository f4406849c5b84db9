use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use tph_core::augmentation::{
    augment_batch, paint_gray, AugmentConfig, Label, PipelinePlan, Sample, TinyCriterion, TinyRule,
};
use tph_core::evaluation::{
    confusion_over_images, evaluate_with, parse_iou_range, ConfusionConfig, EvalConfig,
};
use tph_core::fusion::{self, FusionConfig, FusionMethod, ModelPrediction, SoftNmsMode};
use tph_core::io::pnm::save_pnm;
use tph_core::io::stats::dataset_stats;
use tph_core::io::visdrone::{serialize_visdrone, IGNORED_REGION};
use tph_core::nnblocks::gradcheck::{grad_check, GradCheckReport};
use tph_core::nnblocks::head::HeadDecodeOp;
use tph_core::nnblocks::{default_heads, CbamParams, EncoderParams, Tensor};
use tph_core::rescore::{
    build_patch_dataset, rescore_detections, train_tiny_classifier, PatchClassifier, RescorePolicy,
    ScoreCombine, TrainConfig,
};
use tph_core::{ExecMode, ImageSize, ScoredBox, ViewTransform};

use crate::data::*;

#[derive(Clone, Copy, ValueEnum)]
pub enum Criterion {
    MaxSide,
    MinSide,
    Area,
}

impl From<Criterion> for TinyCriterion {
    fn from(c: Criterion) -> Self {
        match c {
            Criterion::MaxSide => TinyCriterion::MaxSide,
            Criterion::MinSide => TinyCriterion::MinSide,
            Criterion::Area => TinyCriterion::Area,
        }
    }
}

#[derive(Args)]
pub struct TinyArgs {
    /// Labels below this many pixels at the reference scale are tiny.
    #[arg(long, default_value_t = 3.0)]
    min_px: f64,
    /// Long side the image is rescaled to before measuring.
    #[arg(long, default_value_t = 1536.0)]
    ref_long_side: f64,
    #[arg(long, value_enum, default_value = "max-side")]
    criterion: Criterion,
}

impl TinyArgs {
    fn rule(&self) -> Result<TinyRule> {
        ensure!(
            self.min_px >= 0.0 && self.ref_long_side > 0.0,
            "tiny rule needs min_px >= 0 and ref_long_side > 0"
        );
        Ok(TinyRule {
            min_px: self.min_px,
            ref_long_side: self.ref_long_side,
            criterion: self.criterion.into(),
        })
    }
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Directory of VisDrone `.txt` annotations, or a single file.
    ann_dir: PathBuf,
    /// Directory of PPM/PGM images named like the annotations.
    #[arg(long, conflicts_with = "image_size")]
    images: Option<PathBuf>,
    /// Use one size for every image, e.g. 1360x765.
    #[arg(long)]
    image_size: Option<String>,
    #[command(flatten)]
    tiny: TinyArgs,
    /// Also write the full statistics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let fixed = a.image_size.as_deref().map(parse_size).transpose()?;
    let images = annotated_images(&a.ann_dir, a.images.as_deref(), fixed)?;
    let s = dataset_stats(&images, &a.tiny.rule()?);
    let mut t = String::new();
    writeln!(t, "images          {}", s.images)?;
    writeln!(t, "records         {}", s.total)?;
    writeln!(t, "ignored regions {}", s.ignored_regions)?;
    writeln!(t, "others          {}", s.others)?;
    for (name, n) in &s.per_category {
        writeln!(t, "{name:<16}{n}")?;
    }
    let objects = s.total - s.ignored_regions;
    writeln!(
        t,
        "tiny            {} of {} ({})",
        s.tiny,
        objects,
        criterion_name(s.tiny_rule.criterion)
    )?;
    writeln!(
        t,
        "tiny by rule    max-side {}, min-side {}, area {}",
        s.tiny_by_criterion.max_side, s.tiny_by_criterion.min_side, s.tiny_by_criterion.area
    )?;
    print!("{t}");
    if let Some(path) = a.json {
        write_output(Some(&path), &to_json(&s)?)?;
    }
    Ok(())
}

fn criterion_name(c: TinyCriterion) -> &'static str {
    match c {
        TinyCriterion::MaxSide => "max-side",
        TinyCriterion::MinSide => "min-side",
        TinyCriterion::Area => "area",
    }
}

#[derive(Args)]
pub struct MaskTinyArgs {
    image: PathBuf,
    annotation: PathBuf,
    /// Output directory for the masked image and filtered annotation.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tiny: TinyArgs,
}

pub fn mask_tiny(a: MaskTinyArgs) -> Result<()> {
    let rule = a.tiny.rule()?;
    let mut image = load_image(&a.image)?;
    let size = ImageSize::new(image.dim().1, image.dim().0)?;
    let records = read_annotation(&a.annotation)?;
    let (mut kept, mut removed) = (Vec::new(), 0usize);
    for r in records {
        if r.category != IGNORED_REGION && rule.is_tiny(&r.bbox(), size) {
            paint_gray(&mut image, &r.bbox());
            removed += 1;
        } else {
            kept.push(r);
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let stem = file_stem(&a.image)?;
    save_pnm(a.out.join(format!("{stem}.ppm")), &image)?;
    let ann_stem = file_stem(&a.annotation)?;
    fs::write(
        a.out.join(format!("{ann_stem}.txt")),
        serialize_visdrone(&kept),
    )?;
    println!(
        "{}",
        serde_json::json!({ "removed": removed, "kept": kept.len() })
    );
    Ok(())
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AugmentFile {
    augment: AugmentConfig,
    plan: PipelinePlan,
}

#[derive(Args)]
pub struct AugmentArgs {
    /// JSON with optional `augment` and `plan` objects; `default` for built-in settings.
    config: String,
    seed: u64,
    /// PPM images; labels come from a sibling `.txt` VisDrone file when present.
    #[arg(required = true)]
    samples: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

pub fn augment(a: AugmentArgs, mode: ExecMode) -> Result<()> {
    let cfg: AugmentFile = if a.config == "default" {
        AugmentFile::default()
    } else {
        let text =
            fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config))?
    };
    let pool = a
        .samples
        .iter()
        .map(|p| {
            let image = load_image(p)?;
            let ann = p.with_extension("txt");
            let labels = if ann.is_file() {
                read_annotation(&ann)?
                    .iter()
                    .filter(|r| r.is_evaluated())
                    .map(|r| r.to_label())
                    .collect()
            } else {
                Vec::new()
            };
            Ok(Sample::new(image, labels)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = augment_batch(mode, &pool, &cfg.augment, &cfg.plan, a.seed, a.count)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, s) in out.iter().enumerate() {
        save_pnm(a.out.join(format!("aug_{i:04}.ppm")), &s.image)?;
        let labels: Vec<&Label> = s.labels.iter().collect();
        fs::write(a.out.join(format!("aug_{i:04}.json")), to_json(&labels)?)?;
    }
    println!("{}", serde_json::json!({ "written": out.len() }));
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    Nms,
    SoftNms,
    Wbf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SoftMode {
    Linear,
    Gaussian,
}

#[derive(Args)]
pub struct FuseArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, default_value_t = 0.5)]
    iou_thr: f64,
    /// Gaussian soft-NMS spread.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    soft_mode: SoftMode,
    /// Drop boxes below this score.
    #[arg(long, default_value_t = 0.001)]
    skip_thr: f64,
    /// One weight per detection file, comma separated (WBF only).
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    /// Scale WBF confidences by the share of models that contributed.
    #[arg(long)]
    conf_rescale: bool,
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Detection JSONL files, one per model.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

pub fn fuse(a: FuseArgs, mode: ExecMode) -> Result<()> {
    let cfg = FusionConfig {
        iou_threshold: a.iou_thr,
        score_threshold: a.skip_thr,
        softnms_mode: match a.soft_mode {
            SoftMode::Linear => SoftNmsMode::Linear,
            SoftMode::Gaussian => SoftNmsMode::Gaussian,
        },
        softnms_sigma: a.sigma,
        wbf_conf_rescale: a.conf_rescale,
        class_agnostic: a.class_agnostic,
    };
    cfg.validate()?;
    let weights = if a.weights.is_empty() {
        vec![1.0; a.files.len()]
    } else {
        a.weights.clone()
    };
    ensure!(
        weights.iter().all(|w| *w > 0.0 && w.is_finite()),
        "weights must be positive"
    );
    // relative weights keep fused scores in [0, 1]
    let top = weights.iter().copied().fold(0.0, f64::max);
    let weights: Vec<f64> = weights.iter().map(|w| w / top).collect();
    ensure!(
        weights.len() == a.files.len(),
        "{} weights given for {} detection files",
        weights.len(),
        a.files.len()
    );
    let models = a
        .files
        .iter()
        .map(|f| load_detections(f))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = models
        .iter()
        .flat_map(|m| m.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let batch = ids
        .iter()
        .map(|id| {
            models
                .iter()
                .zip(&a.files)
                .zip(&weights)
                .map(|((m, f), &w)| {
                    ModelPrediction::new(
                        f.display().to_string(),
                        w,
                        m.get(id).cloned().unwrap_or_default(),
                    )
                })
                .collect::<tph_core::Result<Vec<_>>>()
        })
        .collect::<tph_core::Result<Vec<_>>>()?;
    let method = match a.method {
        Method::Nms => FusionMethod::Nms,
        Method::SoftNms => FusionMethod::SoftNms,
        Method::Wbf => FusionMethod::Wbf,
    };
    let fused = fusion::fuse_batch(mode, method, &batch, &cfg);
    let groups: BTreeMap<String, Vec<ScoredBox>> = ids.into_iter().zip(fused).collect();
    write_output(a.out.as_deref(), &detections_text(&groups)?)
}

#[derive(Serialize, Deserialize)]
struct PlanView {
    scale: f64,
    hflip: bool,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    source: ImageSize,
    views: Vec<PlanView>,
}

#[derive(Args)]
pub struct TtaPlanArgs {
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn tta_plan(a: TtaPlanArgs) -> Result<()> {
    let size = ImageSize::new(a.width, a.height)?;
    let plan = fusion::tta_views(size);
    let file = PlanFile {
        source: size,
        views: plan
            .views
            .iter()
            .map(|v| {
                let s = v.view_size();
                PlanView {
                    scale: v.scale(),
                    hflip: v.hflip(),
                    width: s.width,
                    height: s.height,
                }
            })
            .collect(),
    };
    write_output(a.out.as_deref(), &to_json(&file)?)
}

#[derive(Args)]
pub struct TtaFuseArgs {
    /// Plan written by `tta-plan`.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou_thr: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// One detection file per view, in plan order, in view coordinates.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

pub fn tta_fuse(a: TtaFuseArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.plan).with_context(|| format!("reading {}", a.plan.display()))?;
    let plan: PlanFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.plan.display()))?;
    ensure!(
        plan.views.len() == a.files.len(),
        "plan has {} views but {} detection files were given",
        plan.views.len(),
        a.files.len()
    );
    let views = plan
        .views
        .iter()
        .map(|v| ViewTransform::new(v.scale, v.hflip, plan.source))
        .collect::<tph_core::Result<Vec<_>>>()?;
    let per_file = a
        .files
        .iter()
        .map(|f| load_detections(f))
        .collect::<Result<Vec<_>>>()?;
    let ids: std::collections::BTreeSet<String> =
        per_file.iter().flat_map(|m| m.keys().cloned()).collect();
    let cfg = FusionConfig::with_iou(a.iou_thr);
    cfg.validate()?;
    let mut groups = BTreeMap::new();
    for id in ids {
        let per_view: Vec<(ViewTransform, Vec<ScoredBox>)> = views
            .iter()
            .zip(&per_file)
            .map(|(v, m)| (*v, m.get(&id).cloned().unwrap_or_default()))
            .collect();
        groups.insert(id, fusion::tta_fuse(&per_view, &cfg)?);
    }
    write_output(a.out.as_deref(), &detections_text(&groups)?)
}

#[derive(Args)]
pub struct EvalArgs {
    /// Detection JSONL.
    dets: PathBuf,
    /// VisDrone annotation directory or file.
    gts: PathBuf,
    /// `start:step:stop` or a single threshold.
    #[arg(long, default_value = "0.5:0.05:0.95")]
    iou_range: String,
    #[arg(long, default_value_t = 500)]
    max_dets: usize,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", v * 100.0))
}

pub fn eval(a: EvalArgs, mode: ExecMode) -> Result<()> {
    let cfg = EvalConfig {
        iou_thresholds: parse_iou_range(&a.iou_range)?,
        max_dets: Some(a.max_dets),
    };
    let report = evaluate_with(
        mode,
        &load_detections(&a.dets)?,
        &load_ground_truth(&a.gts)?,
        &cfg,
    )?;
    let mut header = vec!["metric".to_string(), "all".to_string()];
    header.extend(report.classes.iter().map(|c| class_label(c.class_id)));
    let mut rows = vec![header];
    let mut map_row = vec!["mAP".to_string(), pct(Some(report.map))];
    map_row.extend(report.classes.iter().map(|c| pct(c.map)));
    let mut ap50_row = vec!["AP50".to_string(), pct(Some(report.ap50))];
    ap50_row.extend(report.classes.iter().map(|c| pct(c.ap50)));
    rows.push(map_row);
    rows.push(ap50_row);
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        println!("{}", cells.join(" | "));
    }
    if let Some(path) = a.json {
        write_output(Some(&path), &to_json(&report)?)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct ConfusionArgs {
    dets: PathBuf,
    gts: PathBuf,
    #[arg(long, default_value_t = 0.45)]
    iou: f64,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn confusion(a: ConfusionArgs, mode: ExecMode) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&a.iou) && (0.0..=1.0).contains(&a.conf),
        "thresholds must lie in [0, 1]"
    );
    let classes: Vec<usize> = (1..=10).collect();
    let m = confusion_over_images(
        mode,
        &load_detections(&a.dets)?,
        &load_ground_truth(&a.gts)?,
        &classes,
        &ConfusionConfig {
            iou_threshold: a.iou,
            conf_threshold: a.conf,
        },
    );
    write_output(a.out.as_deref(), &m.to_csv(class_label))
}

#[derive(Args)]
pub struct RescoreArgs {
    dets: PathBuf,
    /// Directory of PPM/PGM images named by image id.
    images: PathBuf,
    /// Classifier archive from `train-classifier`.
    classifier: PathBuf,
    /// JSON policy file; overrides the flags below.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    min_conf: f64,
    /// Keep detector labels and only adjust scores.
    #[arg(long)]
    keep_labels: bool,
    #[arg(long, value_enum, default_value = "keep")]
    combine: Combine,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Combine {
    Keep,
    Multiply,
}

pub fn rescore(a: RescoreArgs, mode: ExecMode) -> Result<()> {
    let policy = match &a.policy {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => RescorePolicy {
            replace_label: !a.keep_labels,
            min_classifier_conf: a.min_conf,
            score_combine: match a.combine {
                Combine::Keep => ScoreCombine::Keep,
                Combine::Multiply => ScoreCombine::Multiply,
            },
        },
    };
    let clf = PatchClassifier::load(&a.classifier)
        .with_context(|| format!("loading {}", a.classifier.display()))?;
    let mut groups = BTreeMap::new();
    for (id, dets) in load_detections(&a.dets)? {
        let image = load_image(&image_path(&a.images, &id)?)?;
        groups.insert(
            id,
            rescore_detections(mode, &dets, image.view(), &clf, &policy)?,
        );
    }
    write_output(a.out.as_deref(), &detections_text(&groups)?)
}

#[derive(Args)]
pub struct TrainArgs {
    ann_dir: PathBuf,
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn train_classifier(a: TrainArgs, mode: ExecMode) -> Result<()> {
    let samples = load_annotations(&a.ann_dir)?
        .into_iter()
        .map(|(id, recs)| {
            let image = load_image(&image_path(&a.images, &id)?)?;
            let labels = recs
                .iter()
                .filter(|r| r.is_evaluated())
                .map(|r| r.to_label())
                .collect();
            Ok(Sample::new(image, labels)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let patches = build_patch_dataset(mode, &samples, None);
    let cfg = TrainConfig {
        hidden: a.hidden,
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
    };
    let clf = train_tiny_classifier(&patches, &cfg)?;
    clf.save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({
            "patches": patches.len(),
            "classes": clf.classes,
            "train_accuracy": clf.train_accuracy,
            "final_loss": clf.loss_history.last(),
        })
    );
    Ok(())
}

#[derive(Args)]
pub struct ClassWeightsArgs {
    ann_dir: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    exponent: f64,
}

#[derive(Serialize)]
struct ClassWeight {
    class_id: usize,
    name: String,
    count: u64,
    weight: f64,
}

pub fn class_weights(a: ClassWeightsArgs) -> Result<()> {
    let mut counts = vec![0u64; 10];
    for recs in load_annotations(&a.ann_dir)?.values() {
        for r in recs.iter().filter(|r| r.is_evaluated()) {
            counts[r.category as usize - 1] += 1;
        }
    }
    let weights = fusion::class_weights(&counts, a.exponent)?;
    let out: Vec<ClassWeight> = counts
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(i, (&count, &weight))| ClassWeight {
            class_id: i + 1,
            name: class_label(i + 1),
            count,
            weight,
        })
        .collect();
    print!("{}", to_json(&out)?);
    Ok(())
}

#[derive(Args)]
pub struct BlocksCheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Serialize)]
struct BlockResult {
    block: &'static str,
    input_shape: Vec<usize>,
    #[serde(flatten)]
    report: GradCheckReport,
    max_error: f64,
    pass: bool,
}

fn wave(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_shape_vec(
        shape.to_vec(),
        (0..n).map(|i| (i as f64 * 0.731).sin()).collect(),
    )
    .expect("length matches")
}

pub fn blocks_check(a: BlocksCheckArgs) -> Result<()> {
    let encoder = EncoderParams::random(8, 2, 4, 1)?;
    let post = EncoderParams {
        norm: tph_core::nnblocks::NormOrder::PostNorm,
        ..encoder.clone()
    };
    let cbam = CbamParams::random(4, 2, 3, 2)?;
    let cbam_default = CbamParams::random(32, 16, 7, 3)?;
    let head = HeadDecodeOp {
        spec: default_heads(3)
            .into_iter()
            .next()
            .context("default heads are non-empty")?,
    };
    let mut results = Vec::new();
    let mut push = |block, input: Tensor, report: GradCheckReport| {
        let max_error = report.max_error();
        results.push(BlockResult {
            block,
            input_shape: input.shape().to_vec(),
            report,
            max_error,
            pass: max_error < a.tolerance,
        });
    };
    let x = wave(&[4, 8]);
    push(
        "encoder-pre-norm",
        x.clone(),
        grad_check(&encoder, &x, a.eps)?,
    );
    push(
        "encoder-post-norm",
        x.clone(),
        grad_check(&post, &x, a.eps)?,
    );
    let f = wave(&[4, 5, 5]);
    push("cbam", f.clone(), grad_check(&cbam, &f, a.eps)?);
    let f = wave(&[32, 6, 6]);
    push(
        "cbam-r16-k7",
        f.clone(),
        grad_check(&cbam_default, &f, a.eps)?,
    );
    let raw = Array4::from_shape_fn((3, 2, 2, 8), |(i, j, k, l)| {
        ((i * 32 + j * 16 + k * 8 + l) as f64 * 0.37).cos()
    })
    .into_dyn();
    push("head-decode", raw.clone(), grad_check(&head, &raw, a.eps)?);
    let all_pass = results.iter().all(|r| r.pass);
    print!(
        "{}",
        to_json(&serde_json::json!({ "eps": a.eps, "tolerance": a.tolerance, "blocks": results }))?
    );
    if !all_pass {
        bail!("gradient check exceeded tolerance {}", a.tolerance);
    }
    Ok(())
}

//! Second-stage patch classifier: crop ground-truth boxes to 64 x 64
//! patches, train a small network on them, and relabel detections.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3, Axis, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augmentation::{crop_resize, seeded_rng, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize, ScoredBox};
use crate::io::archive::Archive;
use crate::nnblocks::NamedParams;
use crate::par::{self, ExecMode};

pub const PATCH_SIZE: usize = 64;
pub const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE * 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `[64, 64, 3]`, values in `[0, 255]`.
    pub pixels: Array3<f64>,
    pub class_id: usize,
}

/// Clip `b` to the image and resample it to 64 x 64 with bilinear
/// interpolation.
pub fn crop_resize_patch(image: ArrayView3<f64>, b: &BBox) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let clipped = b.clamp_to(ImageSize {
        width: w,
        height: h,
    });
    if !(clipped.width() > 0.0 && clipped.height() > 0.0) {
        return Err(Error::invalid(format!(
            "box {:?} has no area inside the image",
            b.to_array()
        )));
    }
    Ok(crop_resize(&image, &clipped, PATCH_SIZE, PATCH_SIZE))
}

/// One patch per label whose class is in `classes` (every label when
/// `None`). Labels with no visible area are skipped.
pub fn build_patch_dataset(
    mode: ExecMode,
    samples: &[Sample],
    classes: Option<&[usize]>,
) -> Vec<Patch> {
    let jobs: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.labels
                .iter()
                .enumerate()
                .filter(|(_, l)| classes.is_none_or(|c| c.contains(&l.class_id)))
                .map(move |(li, _)| (si, li))
        })
        .collect();
    par::map(mode, &jobs, |&(si, li)| {
        let s = &samples[si];
        let l = &s.labels[li];
        crop_resize_patch(s.image.view(), &l.bbox)
            .ok()
            .map(|pixels| Patch {
                pixels,
                class_id: l.class_id,
            })
    })
    .into_iter()
    .flatten()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hidden width; 0 gives a single softmax-regression layer.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 128,
            epochs: 200,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `[in, out]`
    weight: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassifier {
    /// Class id for each output index, ascending.
    pub classes: Vec<usize>,
    /// Per-feature mean of the scaled training patches.
    mean: Array1<f64>,
    layers: Vec<Dense>,
    /// Training loss at the start of every epoch.
    pub loss_history: Vec<f64>,
    /// Accuracy on the training set after the last epoch.
    pub train_accuracy: f64,
}

impl NamedParams for PatchClassifier {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            crate::nnblocks::visit_arr2(&format!("layer{i}.weight"), &l.weight, f);
            crate::nnblocks::visit_arr1(&format!("layer{i}.bias"), &l.bias, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            crate::nnblocks::visit_arr2_mut(&format!("layer{i}.weight"), &mut l.weight, f);
            crate::nnblocks::visit_arr1_mut(&format!("layer{i}.bias"), &mut l.bias, f);
        }
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

struct Pass {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

impl PatchClassifier {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn hidden(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].bias.len()
        } else {
            0
        }
    }

    fn features(&self, patches: &[ArrayView3<f64>]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((patches.len(), PATCH_LEN));
        for (mut row, p) in x.rows_mut().into_iter().zip(patches) {
            if p.dim() != (PATCH_SIZE, PATCH_SIZE, 3) {
                return Err(Error::shape(format!(
                    "patch must be [64, 64, 3], got {:?}",
                    p.dim()
                )));
            }
            row.iter_mut()
                .zip(p.iter())
                .zip(self.mean.iter())
                .for_each(|((d, &v), &m)| *d = v / 255.0 - m);
        }
        Ok(x)
    }

    fn run(&self, x: Array2<f64>) -> Pass {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight) + &l.bias;
            inputs.push(a);
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        softmax_rows(&mut a);
        Pass { inputs, probs: a }
    }

    /// Class probabilities, one row per patch, columns ordered as [`Self::classes`].
    pub fn predict_proba(&self, patches: &[ArrayView3<f64>]) -> Result<Array2<f64>> {
        Ok(self.run(self.features(patches)?).probs)
    }

    /// `(class_id, probability)` of the most likely class.
    pub fn predict(&self, patch: ArrayView3<f64>) -> Result<(usize, f64)> {
        let p = self.predict_proba(&[patch])?;
        let (idx, prob) = argmax(p.row(0).iter().copied());
        Ok((self.classes[idx], prob))
    }

    pub fn accuracy(&self, patches: &[Patch]) -> Result<f64> {
        if patches.is_empty() {
            return Ok(0.0);
        }
        let views: Vec<_> = patches.iter().map(|p| p.pixels.view()).collect();
        let probs = self.predict_proba(&views)?;
        let correct = probs
            .rows()
            .into_iter()
            .zip(patches)
            .filter(|(row, p)| self.classes[argmax(row.iter().copied()).0] == p.class_id)
            .count();
        Ok(correct as f64 / patches.len() as f64)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        let classes = self.classes.iter().map(|&c| c as f64).collect::<Vec<_>>();
        a.insert(
            "classes",
            ArrayD::from_shape_vec(IxDyn(&[classes.len()]), classes).expect("1-D"),
        );
        a.insert("input.mean", self.mean.clone().into_dyn());
        self.write_to(&mut a, "clf");
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let get = |k: &str| {
            a.get(k)
                .ok_or_else(|| Error::Format(format!("archive is missing '{k}'")))
        };
        let classes: Vec<usize> = get("classes")?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("invalid class id {v} in archive")))
                }
            })
            .collect::<Result<_>>()?;
        let mean = get("input.mean")?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::Format("input.mean must be 1-D".into()))?;
        let mut layers = Vec::new();
        while let Some(w) = a.get(&format!("clf.layer{}.weight", layers.len())) {
            let weight: Array2<f64> = w
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::Format("layer weight must be 2-D".into()))?;
            let bias = Array1::zeros(weight.ncols());
            layers.push(Dense { weight, bias });
        }
        let mut clf = PatchClassifier {
            classes,
            mean,
            layers,
            loss_history: Vec::new(),
            train_accuracy: f64::NAN,
        };
        clf.read_from(a, "clf")?;
        clf.check_architecture()?;
        Ok(clf)
    }

    fn check_architecture(&self) -> Result<()> {
        let ok = !self.layers.is_empty()
            && self.mean.len() == PATCH_LEN
            && self.layers[0].weight.nrows() == PATCH_LEN
            && self
                .layers
                .windows(2)
                .all(|w| w[0].weight.ncols() == w[1].weight.nrows())
            && self
                .layers
                .last()
                .is_some_and(|l| l.weight.ncols() == self.classes.len())
            && self.classes.len() >= 2
            && self.classes.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::Format(
                "classifier archive has inconsistent shapes".into(),
            ))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
}

/// Full-batch gradient descent on mean cross-entropy.
pub fn train_tiny_classifier(patches: &[Patch], cfg: &TrainConfig) -> Result<PatchClassifier> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.lr
        )));
    }
    let mut classes: Vec<usize> = patches.iter().map(|p| p.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let n = patches.len();
    let k = classes.len();

    let mut raw = Array2::zeros((n, PATCH_LEN));
    for (mut row, p) in raw.rows_mut().into_iter().zip(patches) {
        if p.pixels.dim() != (PATCH_SIZE, PATCH_SIZE, 3) {
            return Err(Error::shape(format!(
                "patch must be [64, 64, 3], got {:?}",
                p.pixels.dim()
            )));
        }
        row.iter_mut()
            .zip(p.pixels.iter())
            .for_each(|(d, &v)| *d = v / 255.0);
    }
    let mean = raw.mean_axis(Axis(0)).expect("non-empty");
    let x = &raw - &mean;

    let mut rng = seeded_rng(cfg.seed, 7);
    let mut dense = |fan_in: usize, fan_out: usize| {
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
        Dense {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(&mut rng)),
            bias: Array1::zeros(fan_out),
        }
    };
    let layers = if cfg.hidden == 0 {
        vec![dense(PATCH_LEN, k)]
    } else {
        vec![dense(PATCH_LEN, cfg.hidden), dense(cfg.hidden, k)]
    };
    let mut clf = PatchClassifier {
        classes: classes.clone(),
        mean,
        layers,
        loss_history: Vec::with_capacity(cfg.epochs),
        train_accuracy: 0.0,
    };

    let mut onehot = Array2::zeros((n, k));
    for (i, p) in patches.iter().enumerate() {
        onehot[[i, classes.binary_search(&p.class_id).expect("collected")]] = 1.0;
    }

    for _ in 0..cfg.epochs {
        let pass = clf.run(x.clone());
        let loss = -(&pass.probs * &onehot)
            .sum_axis(Axis(1))
            .mapv(|p| p.max(f64::MIN_POSITIVE).ln())
            .sum()
            / n as f64;
        clf.loss_history.push(loss);
        if cfg.lr == 0.0 {
            continue;
        }
        let mut delta = (&pass.probs - &onehot) / n as f64;
        for li in (0..clf.layers.len()).rev() {
            let input = &pass.inputs[li];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if li > 0 {
                let mut back = delta.dot(&clf.layers[li].weight.t());
                back.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
            let l = &mut clf.layers[li];
            l.weight.scaled_add(-cfg.lr, &gw);
            l.bias.scaled_add(-cfg.lr, &gb);
        }
    }
    clf.train_accuracy = clf.accuracy(patches)?;
    Ok(clf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreCombine {
    Keep,
    Multiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RescorePolicy {
    pub replace_label: bool,
    pub min_classifier_conf: f64,
    pub score_combine: ScoreCombine,
}

impl Default for RescorePolicy {
    fn default() -> Self {
        RescorePolicy {
            replace_label: true,
            min_classifier_conf: 0.5,
            score_combine: ScoreCombine::Keep,
        }
    }
}

impl RescorePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_classifier_conf) {
            return Err(Error::invalid(format!(
                "min_classifier_conf {} outside [0, 1]",
                self.min_classifier_conf
            )));
        }
        Ok(())
    }
}

/// Classify each detection's patch and apply `policy`. Boxes and the
/// detection count never change; detections with no visible area pass
/// through untouched.
pub fn rescore_detections(
    mode: ExecMode,
    dets: &[ScoredBox],
    image: ArrayView3<f64>,
    clf: &PatchClassifier,
    policy: &RescorePolicy,
) -> Result<Vec<ScoredBox>> {
    policy.validate()?;
    par::map(mode, dets, |d| {
        let Ok(patch) = crop_resize_patch(image, &d.bbox) else {
            return Ok(*d);
        };
        let (class_id, p) = clf.predict(patch.view())?;
        let mut out = *d;
        if policy.replace_label && p >= policy.min_classifier_conf {
            out.class_id = class_id;
        }
        if policy.score_combine == ScoreCombine::Multiply {
            out.score = d.score * p;
        }
        Ok(out)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::Label;

    #[test]
    fn full_box_is_identity() {
        let img = Array3::from_shape_fn((64, 64, 3), |(y, x, c)| {
            ((y * 64 + x) * 3 + c) as f64 % 256.0
        });
        let p = crop_resize_patch(img.view(), &BBox::new(0.0, 0.0, 64.0, 64.0)).unwrap();
        assert_eq!(p, img);
    }

    #[test]
    fn constant_image_gives_constant_patch() {
        let img = Array3::from_elem((40, 90, 3), 77.0);
        let p = crop_resize_patch(img.view(), &BBox::new(3.2, 5.7, 20.1, 9.9)).unwrap();
        assert!(p.iter().all(|&v| (v - 77.0).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_center_sample() {
        let img = Array3::from_shape_fn(
            (2, 2, 3),
            |(y, x, _)| if (x + y) % 2 == 0 { 0.0 } else { 255.0 },
        );
        let one = crop_resize(&img.view(), &BBox::new(0.0, 0.0, 2.0, 2.0), 1, 1);
        assert_eq!(one[[0, 0, 0]], 127.5);
    }

    #[test]
    fn zero_area_rejected() {
        let img = Array3::zeros((10, 10, 3));
        assert!(crop_resize_patch(img.view(), &BBox::new(2.0, 2.0, 2.0, 8.0)).is_err());
        assert!(crop_resize_patch(img.view(), &BBox::new(20.0, 2.0, 30.0, 8.0)).is_err());
    }

    #[test]
    fn dataset_one_patch_per_label() {
        let labels = vec![
            Label::new(1, BBox::new(0.0, 0.0, 5.0, 5.0)),
            Label::new(2, BBox::new(5.0, 5.0, 9.0, 9.0)),
            Label::new(1, BBox::new(1.0, 2.0, 8.0, 9.0)),
        ];
        let s = Sample::new(Array3::zeros((10, 10, 3)), labels).unwrap();
        let all = build_patch_dataset(ExecMode::default(), std::slice::from_ref(&s), None);
        assert_eq!(
            all.iter().map(|p| p.class_id).collect::<Vec<_>>(),
            vec![1, 2, 1]
        );
        let only_two = build_patch_dataset(ExecMode::default(), &[s], Some(&[2]));
        assert_eq!(only_two.len(), 1);
        assert!(
            build_patch_dataset(ExecMode::default(), &[Sample::solid(4, 4, 0.0)], None).is_empty()
        );
    }

    #[test]
    fn single_class_rejected() {
        let p = Patch {
            pixels: Array3::zeros((64, 64, 3)),
            class_id: 3,
        };
        assert!(train_tiny_classifier(&[p.clone(), p], &TrainConfig::default()).is_err());
    }
}

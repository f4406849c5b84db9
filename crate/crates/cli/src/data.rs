use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tph_core::evaluation::GroundTruthBox;
use tph_core::io::detections::{
    group_by_image, read_detections, write_detections, DetectionRecord,
};
use tph_core::io::pnm::{load_rgb, read_pnm_size};
use tph_core::io::stats::AnnotatedImage;
use tph_core::io::visdrone::{category_name, parse_visdrone, VisDroneRecord};
use tph_core::{ImageSize, ScoredBox};

pub fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("cannot derive an image id from {}", path.display()))
}

/// Annotation files: every `*.txt` in a directory (sorted), or a single file.
pub fn annotation_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_annotation(path: &Path) -> Result<Vec<VisDroneRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_visdrone(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Image id to records, keyed by file stem.
pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, Vec<VisDroneRecord>>> {
    annotation_files(path)?
        .iter()
        .map(|f| Ok((file_stem(f)?, read_annotation(f)?)))
        .collect()
}

pub fn load_ground_truth(path: &Path) -> Result<BTreeMap<String, Vec<GroundTruthBox>>> {
    Ok(load_annotations(path)?
        .into_iter()
        .map(|(id, recs)| {
            (
                id,
                recs.iter().map(VisDroneRecord::to_ground_truth).collect(),
            )
        })
        .collect())
}

pub fn read_detection_file(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    read_detections(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_detections(path: &Path) -> Result<BTreeMap<String, Vec<ScoredBox>>> {
    Ok(group_by_image(&read_detection_file(path)?))
}

/// `<dir>/<id>.ppm` or `<dir>/<id>.pgm`.
pub fn image_path(dir: &Path, id: &str) -> Result<PathBuf> {
    ["ppm", "pgm", "pnm"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .with_context(|| format!("no PPM/PGM image for '{id}' in {}", dir.display()))
}

pub fn image_size(path: &Path) -> Result<ImageSize> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_pnm_size(&bytes).with_context(|| format!("reading {}", path.display()))
}

pub fn load_image(path: &Path) -> Result<ndarray::Array3<f64>> {
    load_rgb(path).with_context(|| format!("reading {}", path.display()))
}

pub fn parse_size(s: &str) -> Result<ImageSize> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .context("image size must look like WIDTHxHEIGHT")?;
    Ok(ImageSize::new(w.trim().parse()?, h.trim().parse()?)?)
}

/// Annotations paired with image sizes, from image headers or a fixed size.
pub fn annotated_images(
    ann: &Path,
    images: Option<&Path>,
    fixed: Option<ImageSize>,
) -> Result<Vec<AnnotatedImage>> {
    load_annotations(ann)?
        .into_iter()
        .map(|(image_id, records)| {
            let size = match (images, fixed) {
                (Some(dir), _) => image_size(&image_path(dir, &image_id)?)?,
                (None, Some(s)) => s,
                (None, None) => bail!("image sizes unknown: pass --images DIR or --image-size WxH"),
            };
            Ok(AnnotatedImage {
                image_id,
                size,
                records,
            })
        })
        .collect()
}

pub fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn detections_text(groups: &BTreeMap<String, Vec<ScoredBox>>) -> Result<String> {
    Ok(write_detections(
        &tph_core::io::detections::flatten_groups(groups),
    )?)
}

pub fn class_label(id: usize) -> String {
    u8::try_from(id)
        .ok()
        .and_then(category_name)
        .map_or_else(|| format!("class{id}"), str::to_string)
}

pub fn to_json(value: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

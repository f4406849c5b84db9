//! Line-delimited JSON detections.
//!
//! The first line is a header `{"format":"tph-detections","version":1}`;
//! every following line is one detection:
//! `{"image_id":"0001","class_id":4,"score":0.91,"box":[x1,y1,x2,y2]}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};

pub const FORMAT_NAME: &str = "tph-detections";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

impl DetectionRecord {
    pub fn from_scored(image_id: impl Into<String>, d: &ScoredBox) -> Self {
        DetectionRecord {
            image_id: image_id.into(),
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox.to_array(),
        }
    }

    pub fn to_scored(&self) -> ScoredBox {
        let [x1, y1, x2, y2] = self.bbox;
        ScoredBox::new(BBox::new(x1, y1, x2, y2), self.score, self.class_id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        if self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("detection box".into()));
        }
        Ok(())
    }
}

pub fn write_detections(records: &[DetectionRecord]) -> Result<String> {
    let mut out = serde_json::to_string(&Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
    })
    .expect("header serializes");
    out.push('\n');
    for r in records {
        r.validate()?;
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads detections; the header line is optional but must match when present.
pub fn read_detections(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) {
            if let Ok(h) = serde_json::from_str::<Header>(trimmed) {
                if h.format != FORMAT_NAME || h.version != FORMAT_VERSION {
                    return Err(Error::parse(
                        line,
                        format!("unsupported detections header {}/{}", h.format, h.version),
                    ));
                }
                continue;
            }
        }
        let rec: DetectionRecord =
            serde_json::from_str(trimmed).map_err(|e| Error::parse(line, e.to_string()))?;
        rec.validate()
            .map_err(|e| Error::parse(line, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Groups records by image id, preserving file order within an image.
pub fn group_by_image(records: &[DetectionRecord]) -> BTreeMap<String, Vec<ScoredBox>> {
    let mut map: BTreeMap<String, Vec<ScoredBox>> = BTreeMap::new();
    for r in records {
        map.entry(r.image_id.clone())
            .or_default()
            .push(r.to_scored());
    }
    map
}

pub fn flatten_groups(groups: &BTreeMap<String, Vec<ScoredBox>>) -> Vec<DetectionRecord> {
    groups
        .iter()
        .flat_map(|(id, dets)| {
            dets.iter()
                .map(move |d| DetectionRecord::from_scored(id.clone(), d))
        })
        .collect()
}

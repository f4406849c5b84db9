//! VisDrone-DET annotation lines:
//! `left,top,width,height,score,category,truncation,occlusion`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augmentation::Label;
use crate::error::{Error, Result};
use crate::evaluation::GroundTruthBox;
use crate::geometry::BBox;

pub const IGNORED_REGION: u8 = 0;
pub const OTHERS: u8 = 11;

/// Evaluated categories 1 to 10, in id order.
pub const CATEGORY_NAMES: [&str; 10] = [
    "pedestrian",
    "people",
    "bicycle",
    "car",
    "van",
    "truck",
    "tricycle",
    "awning-tricycle",
    "bus",
    "motor",
];

/// Alternative spellings accepted by [`category_id`].
const ALIASES: [(&str, u8); 1] = [("trunk", 6)];

pub fn category_name(id: u8) -> Option<&'static str> {
    match id {
        IGNORED_REGION => Some("ignored-region"),
        OTHERS => Some("others"),
        1..=10 => Some(CATEGORY_NAMES[id as usize - 1]),
        _ => None,
    }
}

pub fn category_id(name: &str) -> Option<u8> {
    let name = name.trim().to_ascii_lowercase();
    CATEGORY_NAMES
        .iter()
        .position(|&n| n == name)
        .map(|i| i as u8 + 1)
        .or_else(|| ALIASES.iter().find(|(a, _)| *a == name).map(|&(_, id)| id))
}

/// Names for the evaluated ids; index 0 holds the ignored-region name so
/// that `names[class_id]` works directly.
pub fn class_names() -> Vec<String> {
    (0..=10)
        .map(|i| category_name(i).expect("known id").to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisDroneRecord {
    pub bbox_left: u32,
    pub bbox_top: u32,
    pub bbox_width: u32,
    pub bbox_height: u32,
    /// 1 for a valid box, 0 when the box should not be evaluated.
    pub score: u8,
    pub category: u8,
    pub truncation: u8,
    pub occlusion: u8,
}

impl VisDroneRecord {
    pub fn bbox(&self) -> BBox {
        BBox::from_ltwh(
            self.bbox_left as f64,
            self.bbox_top as f64,
            self.bbox_width as f64,
            self.bbox_height as f64,
        )
    }

    /// Ignored regions, "others" and score-0 boxes are excluded from evaluation.
    pub fn is_ignored(&self) -> bool {
        self.category == IGNORED_REGION || self.category == OTHERS || self.score == 0
    }

    pub fn is_evaluated(&self) -> bool {
        !self.is_ignored()
    }

    pub fn to_ground_truth(&self) -> GroundTruthBox {
        if self.is_ignored() {
            GroundTruthBox::ignored(self.bbox())
        } else {
            GroundTruthBox::new(self.bbox(), self.category as usize)
        }
    }

    pub fn to_label(&self) -> Label {
        Label::new(self.category as usize, self.bbox())
    }

    pub fn validate(&self) -> Result<()> {
        if self.score > 1 {
            return Err(Error::invalid(format!(
                "score flag {} not in {{0, 1}}",
                self.score
            )));
        }
        if self.category > OTHERS {
            return Err(Error::invalid(format!(
                "category {} outside 0..=11",
                self.category
            )));
        }
        if self.truncation > 2 || self.occlusion > 2 {
            return Err(Error::invalid("truncation and occlusion must be in 0..=2"));
        }
        Ok(())
    }
}

fn field<T: std::str::FromStr>(raw: &str, name: &str, line: usize) -> Result<T> {
    raw.trim().parse().map_err(|_| {
        Error::parse(
            line,
            format!("{name} {:?} is not a non-negative integer", raw.trim()),
        )
    })
}

/// Parses one record per non-blank line. A trailing comma is accepted.
pub fn parse_visdrone(text: &str) -> Result<Vec<VisDroneRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let body = trimmed.strip_suffix(',').unwrap_or(trimmed);
        let parts: Vec<&str> = body.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::parse(
                line,
                format!("expected 8 fields, found {}", parts.len()),
            ));
        }
        let rec = VisDroneRecord {
            bbox_left: field(parts[0], "bbox_left", line)?,
            bbox_top: field(parts[1], "bbox_top", line)?,
            bbox_width: field(parts[2], "bbox_width", line)?,
            bbox_height: field(parts[3], "bbox_height", line)?,
            score: field(parts[4], "score", line)?,
            category: field(parts[5], "category", line)?,
            truncation: field(parts[6], "truncation", line)?,
            occlusion: field(parts[7], "occlusion", line)?,
        };
        rec.validate().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::parse(line, m),
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn serialize_visdrone(records: &[VisDroneRecord]) -> String {
    let mut s = String::new();
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.bbox_left,
            r.bbox_top,
            r.bbox_width,
            r.bbox_height,
            r.score,
            r.category,
            r.truncation,
            r.occlusion
        )
        .expect("writing to a String");
    }
    s
}

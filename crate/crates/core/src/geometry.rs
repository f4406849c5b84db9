//! Axis-aligned boxes, IoU and the scale/flip view transforms used by
//! multi-scale testing.
//!
//! Boxes are kept in continuous corner form `(x1, y1, x2, y2)`; rounding to
//! the pixel grid only happens when an image is rasterized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box from two corners in any order.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    /// `(left, top, width, height)` as used by VisDrone annotations.
    pub fn from_ltwh(left: f64, top: f64, width: f64, height: f64) -> Self {
        BBox::new(left, top, left + width, top + height)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Clamp into `[0, W] x [0, H]`.
    pub fn clamp_to(&self, size: ImageSize) -> BBox {
        let w = size.width as f64;
        let h = size.height as f64;
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn scale(&self, factor: f64) -> BBox {
        BBox::new(
            self.x1 * factor,
            self.y1 * factor,
            self.x2 * factor,
            self.y2 * factor,
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Self {
        ScoredBox {
            bbox,
            score,
            class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(ImageSize { width, height })
    }

    pub fn long_side(&self) -> usize {
        self.width.max(self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Original image frame to view frame.
    Forward,
    /// View frame back to the original image frame.
    Inverse,
}

/// Uniform rescale followed by an optional horizontal mirror.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    scale: f64,
    hflip: bool,
    source: ImageSize,
}

impl ViewTransform {
    pub fn new(scale: f64, hflip: bool, source: ImageSize) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!(
                "view scale must be positive, got {scale}"
            )));
        }
        Ok(ViewTransform {
            scale,
            hflip,
            source,
        })
    }

    pub fn identity(source: ImageSize) -> Self {
        ViewTransform {
            scale: 1.0,
            hflip: false,
            source,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn hflip(&self) -> bool {
        self.hflip
    }

    pub fn source(&self) -> ImageSize {
        self.source
    }

    /// Continuous width of the view frame; the mirror axis for flipped views.
    pub fn view_width(&self) -> f64 {
        self.source.width as f64 * self.scale
    }

    /// Pixel size of the rasterized view.
    pub fn view_size(&self) -> ImageSize {
        ImageSize {
            width: ((self.source.width as f64 * self.scale).round() as usize).max(1),
            height: ((self.source.height as f64 * self.scale).round() as usize).max(1),
        }
    }

    pub fn apply(&self, b: &BBox, direction: Direction) -> BBox {
        let wv = self.view_width();
        match direction {
            Direction::Forward => {
                let s = b.scale(self.scale);
                if self.hflip {
                    BBox::new(wv - s.x2, s.y1, wv - s.x1, s.y2)
                } else {
                    s
                }
            }
            Direction::Inverse => {
                let u = if self.hflip {
                    BBox::new(wv - b.x2, b.y1, wv - b.x1, b.y2)
                } else {
                    *b
                };
                u.scale(1.0 / self.scale)
            }
        }
    }
}

pub fn transform_boxes(
    boxes: &[ScoredBox],
    view: &ViewTransform,
    direction: Direction,
) -> Vec<ScoredBox> {
    boxes
        .iter()
        .map(|d| ScoredBox {
            bbox: view.apply(&d.bbox, direction),
            ..*d
        })
        .collect()
}

/// Clamp every box into the image and drop the ones left with zero area.
pub fn clip_boxes(boxes: &[ScoredBox], size: ImageSize) -> Vec<ScoredBox> {
    boxes
        .iter()
        .filter_map(|d| {
            let b = d.bbox.clamp_to(size);
            (b.area() > 0.0).then_some(ScoredBox { bbox: b, ..*d })
        })
        .collect()
}

//! Detection-pipeline toolkit for drone-captured imagery.
//!
//! The crate covers the post-processing and tooling that surrounds a
//! four-head transformer-prediction-head detector:
//!
//! * [`geometry`]: boxes, IoU and view transforms for test-time augmentation.
//! * [`fusion`]: NMS, Soft-NMS, weighted boxes fusion, the 6-view ms-testing
//!   plan and per-category class weights.
//! * [`evaluation`]: COCO-style AP/mAP and confusion matrices.
//! * [`augmentation`]: mosaic, mixup, HSV and affine distortion, tiny-label masking.
//! * [`nnblocks`]: transformer encoder, CBAM, head decoding, gradient checking.
//! * [`rescore`]: patch classifier used to relabel detections.
//! * [`io`]: VisDrone annotations, detection JSONL, PPM/PGM images,
//!   dataset statistics and the parameter archive.
//!
//! Batch entry points take an [`ExecMode`]; with the `parallel` feature
//! (default) they fan out over rayon, otherwise they run sequentially.

pub mod augmentation;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod nnblocks;
pub mod par;
pub mod rescore;

pub use error::{Error, Result};
pub use geometry::{iou, BBox, ImageSize, ScoredBox, ViewTransform};
pub use par::ExecMode;

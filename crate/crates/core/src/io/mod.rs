//! File formats: the parameter archive, VisDrone annotations, detection
//! JSONL, binary PNM images, and annotation statistics.

pub mod archive;
pub mod detections;
pub mod pnm;
pub mod stats;
pub mod visdrone;

pub use archive::Archive;
pub use detections::{read_detections, write_detections, DetectionRecord};
pub use pnm::{load_rgb, read_pnm, save_pnm, write_pgm, write_pnm, write_ppm};
pub use stats::{dataset_stats, AnnotatedImage, DatasetStats};
pub use visdrone::{parse_visdrone, serialize_visdrone, VisDroneRecord};

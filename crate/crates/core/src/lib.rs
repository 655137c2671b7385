//! Detection ensembling toolkit.
//!
//! * [`geometry`]: boxes, IoU and the shared detection data model.
//! * [`formats`]: COCO and VisDrone readers and writers.
//! * [`fusion`]: weighted box fusion plus NMS / soft-NMS baselines.
//! * [`eval`]: COCO-protocol AP and mAP summaries.
//! * [`refmath`]: reference losses, heatmap encoding and box decoding.
//! * [`augment`]: cut-paste augmentation.
//! * [`synth`]: synthetic scenes and detector simulation.
//! * [`cli`]: the `detfuse` command line.

pub mod augment;
pub mod cli;
pub mod eval;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod refmath;
pub mod selftest;
pub mod synth;

pub use eval::{evaluate, EvalConfig, EvalReport};
pub use formats::{Dataset, DetectionFile, ImageInfo};
pub use fusion::{ensemble, nms, soft_nms, wbf_fuse, FusionConfig, RescaleMode};
pub use geometry::{BBox, CategoryTable, GroundTruthBox, ScoredDetection};

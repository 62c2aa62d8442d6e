//! Moving object segmentation for multi-scan LiDAR point clouds.
//!
//! The pipeline: read scans and poses ([`kitti_io`]), fold a window of scans
//! into one ego-compensated cloud with a per-point scan index
//! ([`aggregation`]), order the cloud along a space-filling curve
//! ([`serialization`]), and run a state-space segmentation network
//! ([`network_blocks`]) built on a small autodiff substrate ([`tensor_core`])
//! and a selective scan kernel ([`ssm_kernel`]). Training, losses and metrics
//! live in [`train_eval`]; [`scene_synth`] fabricates labelled scenes so the
//! whole stack runs at desk scale without the real dataset.

// Strided kernels read clearer with explicit indices, and validation uses
// negated comparisons so NaN fails closed.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod error;
pub mod kitti_io;
pub mod network_blocks;
pub mod scene_synth;
pub mod serialization;
pub mod ssm_kernel;
pub mod tensor_core;
pub mod train_eval;

pub use aggregation::{SpatioTemporalCloud, VoxelGrid};
pub use error::{Error, Result};
pub use kitti_io::{Calibration, PoseMatrix, RawScan};
pub use network_blocks::{ModelConfig, Params, SegModel};
pub use serialization::{SerializationPattern, SerializedSequence};
pub use ssm_kernel::{DiscretizedParams, SsmParams};
pub use tensor_core::{DenseArray, Tape, ValueId};
pub use train_eval::{ConfusionCounts, DistanceBinnedReport, TrainConfig};

//! Unsupervised pretraining of query-based object detectors by contrasting
//! object proposals between an EMA teacher and a student.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f32 tensors and a reverse-mode tape.
//! - [`geometry`]: normalized boxes, IoU, GIoU and L1 box losses.
//! - [`proposals`]: graph segmentation, Selective Search, proposal caches.
//! - [`matching`]: exact assignment and the two matching costs.
//! - [`objectives`]: relation/similarity distributions and the contrastive
//!   loss family.
//! - [`detector`]: frozen backbone, query decoder, projector and box head.
//! - [`pipeline`]: augmentations, box transport, synthetic scenes, image I/O.
//! - [`train`]: optimizer, checkpoints, metrics and the training loop.
//! - [`verify`]: self-contained verification suites.

pub mod config;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod objectives;
pub mod pipeline;
pub mod proposals;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::{DataSource, ImageScale, LossKind, RelationMask, RunConfig};
pub use error::{Error, ErrorKind, Result};

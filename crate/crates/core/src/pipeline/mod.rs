//! Views fed to teacher and student, box transport and synthetic data.

pub mod augment;
pub mod image;
pub mod scene;

pub use augment::{
    apply_record, apply_strong, sample_strong, sample_weak_record, strong_augment, transport_boxes, weak_augment,
    AugRecord, GeomOp, Jitter, StrongParams, WeakParams,
};
pub use image::{decode_ppm, encode_ppm, load_image, save_image, ImageTensor};
pub use scene::{render_scene, synth_scene, SceneParams, SceneShape, SceneSpec, ShapeKind};

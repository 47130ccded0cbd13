//! Procedural scenes, multi-view bags, annotated videos and crop augmentation.

mod crop;
mod ppm;
mod scene;
mod video;
mod views;

pub use crop::{apply_crop, random_resized_crop, sample_crop, CropParams};
pub use ppm::{encode_ppm, read_ppm, write_ppm};
pub use scene::{gen_scene, Background, SceneObject, SceneSpec, ShapeKind};
pub use video::{gen_video, Keypoint, Motion, Video};
pub use views::{gen_views, read_bag, write_bag, ObjectTransform, Photometric, ViewBag, ViewMeta, BAG_METADATA};

//! Synthetic things-and-stuff scenes, augmentation, batching and dataset
//! files.

mod augment;
mod io;
mod scene;
mod targets;

pub use augment::{jitter_with, large_scale_jitter};
pub use io::{export_dataset, export_scenes, generate_scenes, import_dataset, manifest_path};
pub use scene::{
    generate_scene, tight_box, Instance, SceneConfig, SceneRecord, ShapeClass, SizeBucket,
    LARGE_AREA, SMALL_AREA, STUFF_NAMES, THING_NAMES, VOID,
};
pub use targets::{downsample_mask, scene_targets, Batch};

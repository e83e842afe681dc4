//! Dataset loading, synthetic corpus generation, checkpoints and heatmaps.

pub mod checkpoint;
pub mod dataset;
pub mod heatmap;
pub mod png;
pub mod synth;

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader};
pub use dataset::{
    image_size, list_images, load_category, load_dataset, load_image, load_mask, load_normals,
    load_test, native_size, CategoryData, DatasetLayout,
};
pub use heatmap::{write_heatmap, HeatmapSidecar};
pub use synth::{generate_synthetic, DefectKind, SynthManifest, SynthSpec, TextureFamily};

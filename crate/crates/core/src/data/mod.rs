//! Annotated crowd scenes: manifest ingestion, ground-truth density
//! generation, resizing and synthetic scene rendering.

mod density;
mod manifest;
mod resize;
mod scene;
mod synth;

pub use density::{generate_density_map, DEFAULT_SIGMA, TRUNCATE_SIGMAS};
pub use manifest::{
    load_annotations, parse_manifest, render_manifest, ManifestEntry, Split,
};
pub use resize::{resize_image, resize_scene};
pub use scene::{AnnotatedScene, DatasetSplit, Point};
pub use synth::synth_scene;

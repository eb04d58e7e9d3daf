//! Synthetic UI screenshots: class catalogs, scene sampling, rendering and
//! the on-disk dataset layout.

pub mod anchors;
pub mod catalog;
pub mod dataset;
pub mod image;
pub mod render;
pub mod scene;

pub use catalog::{ClassCatalog, Glyph};
pub use dataset::{
    generate_dataset, load_dataset, write_dataset, Dataset, Sample, Split, SplitSizes, MANIFEST, TEST_RATIO, VAL_RATIO,
};
pub use image::RgbImage;
pub use render::render_scene;
pub use scene::{sample_scene, Annotation, PixelBox, Scene};

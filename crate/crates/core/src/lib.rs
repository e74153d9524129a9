pub mod align;
pub mod backbone;
pub mod dataset;
pub mod degradation;
pub mod fidelity;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prior;
pub mod report;
pub mod seed;
pub mod train;

pub use dataset::{AugmentationConfig, DatasetManifest, SampleTriplet, Split};
pub use degradation::DegradationType;
pub use image::ImageBuffer;
pub use seed::RandomSeed;

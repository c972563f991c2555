//! Random-crop corpus generation: slides in, filtered fixed-size region
//! images plus a CSV manifest out.

pub mod generate;
pub mod manifest;
pub mod quality;
pub mod resize;
pub mod sampling;
pub mod slide;
pub mod split;

pub use generate::{generate_corpus, GenerateConfig, GenerateStats};
pub use manifest::{CorpusManifest, ManifestRow, Split};
pub use quality::{luminance, quality_check};
pub use resize::{resize_bilinear, resize_bilinear_rect, resize_rgb8};
pub use sampling::{fit_size_distribution, sample_crop, CropSpec, SizeDistribution};
pub use slide::{load_rgb_tensor, save_rgb_tensor, SlideImage};
pub use split::{largest_remainder, stratified_split};

//! Downstream evaluation: latent features, supervised probes and image grids.

pub mod classifier;
pub mod features;
pub mod render;

pub use classifier::{ClassifierConfig, ClassifierReport, InputKind, CHANCE_BOTH_DIGITS, REPORT_HEADER};
pub use features::extract_features;
pub use render::{Grid, RenderMode};

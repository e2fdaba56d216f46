//! Synthetic multi-body video generation.

pub mod dataset;
pub mod generate;
pub mod render;

pub use dataset::{Dataset, DatasetManifest, DatasetWriter, Splits};
pub use generate::{
    generate_sample, initial_conditions_for, sample_initial_conditions, sample_rng,
    GeneratorParams, InitialConditions, Palette, SceneSample,
};
pub use render::{compute_flow, render_frame, Camera, Disc, Lighting};

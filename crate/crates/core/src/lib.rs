//! Geometry-conditioned multi-view video generation, minus the network.
//!
//! The crate covers the parts of the pipeline that are not learned:
//! metric depth recovery for relative depth, camera-space normals, condition
//! assembly, the multi-view latent layout, the diffusion noise schedule,
//! loss weighting and sampler, and the evaluation metrics. A ray-cast
//! tabletop renderer supplies known-answer data for all of them.
//!
//! | module | contents |
//! |---|---|
//! | [`pack`], [`raster`] | on-disk clips: `manifest.json` plus little-endian planar streams |
//! | [`synth`] | scene description, renderer, sensor corruption, perception stand-ins |
//! | [`depth_align`] | least-squares scale/shift with percentile outlier trimming |
//! | [`geometry`] | normals from depth |
//! | [`conditions`] | keyframes and the geometry / appearance / ground-truth triplet |
//! | [`layout`] | side-by-side views, patch encoding, channel blocks |
//! | [`edm`] | noise levels, loss weight, Heun sampler, guidance |
//! | [`metrics`] | depth, normal, matching and similarity scores |
//! | [`cli`] | the `geocond` command line |
//!
//! Runnable examples, one per capability (`cargo run --example <name>`):
//!
//! - `render_scene`: render the default scene and write a pack
//! - `align_depth`: recover metric depth from a corrupted sensor
//! - `surface_normals`: normals from depth against analytic normals
//! - `condition_triplet`: keyframes, backgrounds, object crops, embeddings
//! - `latent_layout`: view concatenation and condition latents
//! - `edm_sampling`: schedule, weighting and sampling with a Gaussian oracle
//! - `evaluate_metrics`: score a degraded prediction
//! - `pipeline`: every CLI stage in sequence
//!
//! ```
//! use geocond::edm::{build_schedule, lambda_weight, EdmConfig};
//!
//! let cfg = EdmConfig::default();
//! let schedule = build_schedule(&cfg)?;
//! assert_eq!(schedule.sigmas().len(), cfg.steps + 1);
//! assert_eq!(lambda_weight(0.5, &cfg)?, 8.0);
//! # Ok::<(), geocond::Error>(())
//! ```

// Validation writes NaN-rejecting checks as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod conditions;
pub mod depth_align;
pub mod edm;
pub mod error;
pub mod geometry;
pub mod layout;
pub mod metrics;
pub mod pack;
pub mod raster;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

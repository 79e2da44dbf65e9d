//! Scene-aware personal protective equipment (PPE) compliance checking.
//!
//! The pipeline runs in four stages for every image:
//!
//! 1. [`scene`]: caption the image and map the caption onto a known workplace scene.
//! 2. [`safety_spec`]: ask a language model which items are required in that scene
//!    and which colour / material / functionality each item must have.
//! 3. [`detection`] + [`compliance`]: find persons, embed their patches next to
//!    `"a person wearing {item}"` prompts and threshold the affinity matrix.
//! 4. [`compliance`]: for every worn item, crop the item and compare it with
//!    `"a {feature} {item}"` prompts by cosine similarity.
//!
//! [`calibration`] picks per-step thresholds from labelled scores,
//! [`evaluation`] scores runs against annotations and [`pipeline`] ties
//! everything together behind a config file and the `ppe-compliance` CLI.

pub mod backends;
pub mod calibration;
pub mod compliance;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod safety_spec;
pub mod scene;

pub use error::{Error, Result};

//! Motion segmentation for event-camera streams.
//!
//! The pipeline turns raw event streams into spatiotemporal 3D graphs,
//! classifies every event as foreground (independently moving object) or
//! background (camera ego-motion) with a graph point-transformer network,
//! and scores predictions with confusion-count, convex-hull IoU, and
//! detection-rate metrics. An offline labeling pipeline aligns events to
//! grayscale frames and object masks to produce ground truth, and a
//! synthetic scene generator provides reproducible labeled fixtures.
//!
//! Data-parallel stages (graph building, mini-batch training, window
//! scoring, frame labeling, simulation) run on rayon when the `parallel`
//! feature (default) is enabled and fall back to sequential loops when it
//! is disabled. The `*_seq` entry points in [`par`] stay available either
//! way so the two paths can be compared directly.

pub mod domel;
pub mod error;
pub mod events;
pub mod graph;
pub mod gtnn;
pub mod metrics;
pub mod par;
pub mod pgm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

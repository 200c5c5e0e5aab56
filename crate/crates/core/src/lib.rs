//! flowbox: a desk-scale conditional flow-matching engine.
//!
//! The crate is split by concern:
//!
//! * [`diffcore`]: dense `f64` tensors, a recording tape for reverse-mode
//!   gradients, finite-difference checks and Adam with global-norm clipping.
//! * [`netlib`]: transformer blocks with symmetric ALiBi bias, UNet-style
//!   skips, cross-attention, LoRA adapters and the MLP field used for
//!   low-dimensional toys.
//! * [`flowmatch`]: optimal-transport conditional paths, masked flow-matching
//!   loss, masking and condition-dropout samplers, guidance, durations and
//!   infilling generation.
//! * [`odesolve`]: fixed-step and adaptive (Dormand–Prince) integrators with
//!   evaluation accounting.
//! * [`bespoke`]: learned time-reparameterization and scaling around a
//!   fixed-step solver, distilled from dense reference trajectories.
//! * [`jointembed`]: two-branch contrastive embedder, retrieval metrics and
//!   reranking.
//! * [`toydata`]: synthetic corpora with closed-form ground truth.
//! * [`harness`]: configuration, checkpoints, metrics, plots and staged runs.

pub mod bespoke;
pub mod diffcore;
mod error;
pub mod flowmatch;
pub mod harness;
pub mod jointembed;
pub mod netlib;
pub mod odesolve;
pub mod rng;
pub mod toydata;

pub use error::{Error, Result};

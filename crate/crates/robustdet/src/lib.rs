//! Desk-scale laboratory for robust object detection.
//!
//! The crate trains a small anchor-based detector on a synthetic shapes
//! dataset and studies how adversarial robustness carried by a pre-trained
//! classification backbone survives (or is forgotten during) detector
//! training. It provides:
//!
//! - detection geometry and mAP evaluation ([`geom`])
//! - a deterministic synthetic-shapes dataset generator ([`data`])
//! - a block-structured CPU backbone with manual backprop ([`nn`], [`model`])
//! - detection, imitation, and two-phase training objectives ([`loss`])
//! - FGSM / PGD / random-start single-step attacks ([`attack`])
//! - training pipelines with freeze/norm policies and step accounting ([`train`])
//! - clean/robust/transfer evaluation and report emission ([`eval`])
//! - box-overlay and perturbation rendering ([`viz`])
//!
//! Everything is seeded and all parallel reductions run in a fixed order, so
//! a `(config, seed)` pair reproduces results bit-exactly on one platform.
//! Data-parallel loops use rayon when the `parallel` feature (default) is
//! enabled; see [`par`] for the sequential fallback and the runtime switch.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod loss;
pub mod model;
pub mod nn;
pub mod par;
pub mod train;
pub mod viz;

pub use error::{Error, Result};

//! Deterministic desk-scale palpation bench.
//!
//! A silicone phantom with embedded tendons, a rigid dome pressed and dragged
//! across it, synthetic tactile images and raw force/torque channels, a learned
//! channel-to-wrench calibration, the five-step palpation protocol with an
//! optional force-tracking loop, force-deviation metrics, and a tendon
//! detection benchmark.
//!
//! Geometry, contact and metrics are generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below fix the common double-precision instantiations.

// Guards of the form `!(x > 0.0)` reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod calibration;
pub mod contact;
pub mod control;
pub mod detection;
pub mod metrics;
pub mod phantom;
pub mod scalar;
pub mod seeds;
pub mod sensors;

pub use scalar::Scalar;

pub type Phantom = phantom::Phantom<f64>;
pub type PhantomSpec = phantom::PhantomSpec<f64>;
pub type Wrench = contact::Wrench<f64>;
pub type ToolPose = contact::ToolPose<f64>;
pub type ContactPatch = contact::ContactPatch<f64>;
pub type ForceTrace = metrics::ForceTrace<f64>;
pub type Mlp = calibration::mlp::Mlp<f64>;

pub type Phantom32 = phantom::Phantom<f32>;
pub type PhantomSpec32 = phantom::PhantomSpec<f32>;
pub type Wrench32 = contact::Wrench<f32>;
pub type ForceTrace32 = metrics::ForceTrace<f32>;
pub type Mlp32 = calibration::mlp::Mlp<f32>;

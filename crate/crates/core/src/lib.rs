//! A dual-system control stack in which a heavyweight frozen backbone is
//! called only every `f`-th control step, and a lightweight learned predictor
//! carries the backbone's representation across the intermediate steps by
//! predicting per-step deltas.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensorkit`]: a small deterministic reverse-mode autodiff kernel with a
//!   fixed op set, an AdamW optimizer, and a binary checkpoint format.
//! * [`env`]: a 2-D point-mass reaching environment with a scripted expert
//!   and a tokenized observation encoding.
//! * [`teacher`]: a frozen randomly-initialized transformer backbone plus
//!   trainable action heads (direct regression and flow matching).
//! * [`bridge`]: the feature-space delta predictor (DiT-style blocks with
//!   AdaLN conditioning, zero-initialized output).
//! * [`kvbridge`]: the KV-cache delta predictor with exact rotary-embedding
//!   inversion so deltas are learned in the unrotated key space.
//! * [`pipeline`]: dataset collection (synchronous and on-policy), two-round
//!   bridge training, and LoRA adaptation of the action head.
//! * [`scheduler`]: the closed-loop runtime that alternates backbone steps
//!   and bridge steps under a schedule policy.
//! * [`metrics`]: latency accounting, retention, and representation-fidelity
//!   diagnostics computed from persisted episode logs.
//!
//! All model math is generic over the scalar type through [`Scalar`];
//! simulation state and report arithmetic are plain `f64`.

pub mod bridge;
pub mod env;
pub mod kvbridge;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scheduler;
pub mod teacher;
pub mod tensorkit;

pub use scalar::Scalar;

/// Default scalar for experiment runs. Tests and gradient checks rely on
/// `f64`; production paths may instantiate the stack at `f32` instead.
pub type Real = f64;

/// Concrete tensor aliases for the two supported precisions.
pub type Tensor64 = tensorkit::Tensor<f64>;
pub type Tensor32 = tensorkit::Tensor<f32>;

//! Streaming vision transformer with a per-layer key/value memory.
//!
//! Each frame passes through a standard spatial transformer stack; in every
//! layer the frame's attention keys and values are also pushed into a
//! bounded FIFO memory, and a temporal cross-attention reads that memory
//! through two axis-aligned planes (along rows and along columns) whose
//! outputs are folded back through small learnable per-channel gates. The
//! result is a video model that consumes one frame at a time with bounded
//! state but matches a dense clip model that sees the whole sequence at
//! once.
//!
//! The crate also carries the machinery to prove that claim about itself:
//! a dense reference model ([`oracle`]), a MAC accountant with closed-form
//! and instrumented counts ([`flops`]), an analytic-vs-numeric gradient
//! checker for one streaming layer ([`gradcheck`]), and binary sequence /
//! feature-dump formats plus a sequence generator ([`io`]). The
//! `examples/` directory demonstrates each capability; the `streaming-vit`
//! binary exposes the same flows as subcommands (`gen`, `encode`,
//! `verify`, `flops`, `gradcheck`, `bench`).

pub mod attention;
pub mod commands;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{MacCounter, Stage, Tensor};

//! Continuous-time attention with sparse neuronal-circuit gating.
//!
//! Attention logits are not static scores: each query-key pair drives a
//! gated first-order ODE `da/dt = -omega_tau(u) a + phi(u)` whose gates come
//! from a sparse four-group neuronal cell, and the logits are read off that
//! trajectory in one of three modes (explicit Euler, closed form, or the
//! steady state `phi / omega_tau`). A top-k curation step keeps only the
//! strongest query-key pairs, which is what makes the pair tensors
//! affordable.
//!
//! The crate is organized so every moving part can be verified against an
//! independent reference:
//!
//! - [`tensor`] / [`tape`]: dense f64 arrays and a reverse-mode autodiff
//!   tape sufficient for the layer and its training loop.
//! - [`wiring`] / [`cell`]: sparse sensory/inter/command/motor wiring and
//!   the masked cell that projects inputs (sensory gate) and computes the
//!   two gate heads (backbone).
//! - [`attention`]: pair curation, gate heads, pseudo-time, the three logit
//!   modes, and the multi-head layer.
//! - [`oracle`]: scalar RK4 reference dynamics, stability-bound checks, and
//!   closed-form sensitivities; never used by the layer itself.
//! - [`train`]: synthetic event-encoded sequence tasks and BPTT training.
//! - [`bench`]: runtime/peak-allocation scaling harness with baselines.
//! - [`verify`]: randomized property campaigns behind the `verify` command.
//!
//! See the `examples/` directory for one runnable walkthrough per area, and
//! the `nac` binary for the command-line interface.

pub mod attention;
pub mod bench;
pub mod cell;
pub mod checkpoint;
pub mod error;
pub mod oracle;
pub mod parallel;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wiring;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Value};
pub use tensor::Tensor;

//! A self-contained deep-RL optimization laboratory.
//!
//! Trains DQN and C51 agents on a MinAtar-style Breakout environment across
//! four data regimes (offline-greedy, offline-ε-greedy, final-buffer, online)
//! while tracking the leading Hessian eigenvalue λ₁ of the training loss, so
//! the edge-of-stability behaviour of the optimizer can be measured against
//! the quadratic divergence threshold (2+2β)/η.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode AD over small dense tensor programs, with
//!   exact Hessian-vector products by double backward.
//! - [`nn`]: the Q-network architectures and their flat parameter layout.
//! - [`env`]: the deterministic Breakout grid environment.
//! - [`rl`]: replay storage, behaviour policies, losses and optimizers.
//! - [`spectral`]: matrix-free Lanczos estimation of λ₁ and the divergence
//!   threshold.
//! - [`harness`]: pretraining, buffer generation and the training loops.
//! - [`io`]: buffer/checkpoint files, metrics CSV and SVG plots.

// Tensor programs allocate and drop many multi-megabyte buffers per step;
// the default allocator round-trips those through mmap on every call.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod autodiff;
pub mod env;
pub mod harness;
pub mod io;
pub mod nn;
pub mod rl;
pub mod spectral;

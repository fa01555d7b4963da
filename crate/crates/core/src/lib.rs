//! Trust-region laboratory for finite-horizon token-generation policy optimization.
//!
//! The crate is organised bottom-up:
//!
//! * [`dist`] and [`rng`]: categorical distributions over a finite vocabulary and
//!   reproducible random streams.
//! * [`policy`]: tabular softmax policies keyed by the full generation state, with
//!   exact score-function gradients and SGD/Adam updates.
//! * [`env`]: finite-horizon, undiscounted episodic token environments with exact
//!   enumeration.
//! * [`mismatch`]: deterministic training/inference mismatch injectors.
//! * [`divergence`]: exact, binary, top-K and Monte-Carlo TV/KL divergences.
//! * [`algorithms`]: group advantages, the token-mask zoo and the unified masked
//!   policy-gradient estimator.
//! * [`bounds`]: brute-force checks of the performance-difference identity and the
//!   quadratic/linear improvement bounds.
//! * [`trainer`]: the iterative group-rollout training loop and its metrics.
//!
//! Data-parallel loops (rollouts, enumeration, property sweeps) go through [`par`],
//! which uses rayon when the `parallel` feature is on and runs sequentially
//! otherwise. Every reduction folds in index order, so results are bit-identical
//! either way.

// Negated float comparisons are deliberate: NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod bounds;
pub mod dist;
pub mod divergence;
pub mod env;
pub mod error;
pub mod mismatch;
pub mod par;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use dist::{Distribution, Token, Vocab};
pub use error::{Error, Result};
pub use par::Exec;
pub use policy::{SparseGrad, StateKey, TabularPolicy};
pub use rng::RngStream;

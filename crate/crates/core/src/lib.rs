//! Exact tabular behavioral foundation models (BFMs) and latent-space
//! adaptation.
//!
//! The crate pre-trains a latent-conditioned policy family with exact
//! successor features on finite MDPs, infers a latent for a test-time reward
//! by linear regression onto the state features, and then improves that
//! latent online with two algorithms:
//!
//! * [`rela`]: an off-policy actor-critic that keeps the pre-trained value
//!   `ψ(s, a, z)ᵀ z_r` frozen and learns only a residual critic.
//! * [`lola`]: an actor-only search over a Gaussian on the latent sphere using
//!   fixed-horizon rollouts, a bootstrapped terminal value and a
//!   leave-one-out REINFORCE baseline.
//!
//! Rewards always follow the next-state convention: the reward collected on
//! the transition `(s, a) → s'` is `r(s')`.

pub mod bfm;
pub mod envs;
pub mod error;
pub mod features;
pub mod lola;
pub mod mdp;
pub mod model_io;
pub mod rela;
pub mod report;
pub mod rng;
pub mod sphere;
pub mod zeroshot;

pub use error::{Error, Result};

//! Latent tree variational autoencoder.
//!
//! A tree of discrete latent variables sits on top of a continuous code `z`.
//! Leaves of the tree are *pouches*: groups of code dimensions that share a
//! diagonal conditional Gaussian given their parent latent. The crate
//! provides
//!
//! * the model itself ([`tree`]) with validation, parameter counting and a
//!   JSON model file,
//! * exact clique-tree inference, posteriors and `∂ log p(z) / ∂z`
//!   ([`inference`]),
//! * batch and stepwise EM ([`em`]),
//! * BIC hill-climbing over tree structures ([`search`]),
//! * a small from-scratch MLP encoder/decoder with Adam ([`neural`]),
//! * the alternating training loop ([`training`]),
//! * clustering and density metrics ([`evaluation`]),
//! * synthetic benchmark generation and model sampling ([`datagen`]),
//! * dataset and image IO helpers ([`io`]).

pub mod datagen;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod io;
pub mod neural;
pub mod rng;
pub mod search;
pub mod training;
pub mod tree;

pub use error::{Error, Result};
pub use inference::{CliqueTree, Posterior};
pub use model::LtvaeModel;
pub use tree::{LatentNode, LatentStructure, NodeId, PouchNode, TreeParameters};

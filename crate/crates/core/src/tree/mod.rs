//! Latent tree model: structure `S`, parameters `Θ`, validation and the
//! JSON model file.

mod file;
mod params;
mod structure;

use std::fmt;

pub use file::{from_json, to_json, ModelFile, NetworkRecord, LayerRecord, MODEL_FILE_VERSION};
pub use params::{init_random, DiagGaussian, TreeParameters, VARIANCE_FLOOR};
pub(crate) use params::column_variances;
pub use structure::{LatentNode, LatentStructure, NodeId, PouchNode};

/// First invariant a model fails, with the node it concerns.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub message: String,
}

impl Violation {
    fn at(node: NodeId, message: impl Into<String>) -> Self {
        Violation {
            node: Some(node),
            message: message.into(),
        }
    }

    fn global(message: impl Into<String>) -> Self {
        Violation {
            node: None,
            message: message.into(),
        }
    }

    pub(crate) fn duplicate_id(id: NodeId) -> Self {
        Self::at(id, format!("duplicate node id {id}"))
    }
    pub(crate) fn no_root() -> Self {
        Self::global("no root latent")
    }
    pub(crate) fn multiple_roots(id: NodeId) -> Self {
        Self::at(id, format!("multiple roots (latent {id} also has no parent)"))
    }
    pub(crate) fn zero_cardinality(id: NodeId) -> Self {
        Self::at(id, format!("latent {id} has cardinality 0"))
    }
    pub(crate) fn unknown_parent(id: NodeId, parent: NodeId) -> Self {
        Self::at(id, format!("latent {id} has unknown parent {parent}"))
    }
    pub(crate) fn cycle(id: NodeId) -> Self {
        Self::at(id, format!("latent {id} is on a cycle"))
    }
    pub(crate) fn empty_pouch(id: NodeId) -> Self {
        Self::at(id, format!("pouch {id} has no variables"))
    }
    pub(crate) fn pouch_parent(id: NodeId, parent: NodeId) -> Self {
        Self::at(id, format!("pouch {id} parent {parent} is not a latent"))
    }
    pub(crate) fn variable_overlap(id: NodeId, var: usize) -> Self {
        Self::at(id, format!("variable {var} appears in more than one pouch (pouch {id})"))
    }
    pub(crate) fn variable_gap(var: usize) -> Self {
        Self::global(format!("variable {var} is not covered by any pouch"))
    }
    pub(crate) fn orphan(id: NodeId) -> Self {
        Self::at(id, format!("latent {id} has no neighbor"))
    }
    pub(crate) fn shape(id: NodeId, what: impl fmt::Display) -> Self {
        Self::at(id, format!("shape mismatch at node {id}: {what}"))
    }
    pub(crate) fn root_shape(what: impl fmt::Display) -> Self {
        Self::global(format!("root prior: {what}"))
    }
    pub(crate) fn not_normalized(id: Option<NodeId>, what: impl fmt::Display) -> Self {
        Violation {
            node: id,
            message: what.to_string(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Violation {}

/// Checks structure invariants, then parameter shapes, normalization and the
/// variance floor.
pub fn validate(structure: &LatentStructure, params: &TreeParameters) -> Result<(), Violation> {
    structure.validate()?;
    params.validate(structure)
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{validate, DiagGaussian, LatentNode, LatentStructure, NodeId, PouchNode, TreeParameters};
use crate::error::{Error, Result};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentRecord {
    pub id: NodeId,
    pub card: usize,
    pub parent: Option<NodeId>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PouchRecord {
    pub id: NodeId,
    pub vars: Vec<usize>,
    pub parent: NodeId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianRecord {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One dense layer; `shape` is `[out, in]` and `weights` has `out` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub shape: [usize; 2],
    pub activation: String,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub layers: Vec<LayerRecord>,
}

/// On-disk model: the latent tree plus, for trained models, the encoder and
/// decoder networks and the decoder head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(default = "current_version")]
    pub version: u32,
    pub latent_nodes: Vec<LatentRecord>,
    pub pouch_nodes: Vec<PouchRecord>,
    pub root_prior: Vec<f64>,
    pub cpts: BTreeMap<NodeId, Vec<Vec<f64>>>,
    pub gaussians: BTreeMap<NodeId, Vec<GaussianRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<NetworkRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<NetworkRecord>,
}

impl ModelFile {
    pub fn from_tree(structure: &LatentStructure, params: &TreeParameters) -> Self {
        ModelFile {
            version: MODEL_FILE_VERSION,
            latent_nodes: structure
                .latents
                .iter()
                .map(|l| LatentRecord {
                    id: l.id,
                    card: l.card,
                    parent: l.parent,
                })
                .collect(),
            pouch_nodes: structure
                .pouches
                .iter()
                .map(|p| PouchRecord {
                    id: p.id,
                    vars: p.vars.clone(),
                    parent: p.parent,
                })
                .collect(),
            root_prior: params.root_prior.clone(),
            cpts: params.cpts.clone(),
            gaussians: params
                .gaussians
                .iter()
                .map(|(id, comps)| {
                    let recs = comps
                        .iter()
                        .map(|g| GaussianRecord {
                            mean: g.mean.clone(),
                            var: g.var.clone(),
                        })
                        .collect();
                    (*id, recs)
                })
                .collect(),
            head: None,
            encoder: None,
            decoder: None,
        }
    }

    /// Converts to the in-memory model and validates it.
    pub fn tree(&self) -> Result<(LatentStructure, TreeParameters)> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::ModelParse {
                line: 0,
                column: 0,
                message: format!("unsupported model file version {}", self.version),
            });
        }
        let structure = LatentStructure {
            latents: self
                .latent_nodes
                .iter()
                .map(|l| LatentNode {
                    id: l.id,
                    card: l.card,
                    parent: l.parent,
                })
                .collect(),
            pouches: self
                .pouch_nodes
                .iter()
                .map(|p| PouchNode {
                    id: p.id,
                    vars: p.vars.clone(),
                    parent: p.parent,
                })
                .collect(),
        };
        let params = TreeParameters {
            root_prior: self.root_prior.clone(),
            cpts: self.cpts.clone(),
            gaussians: self
                .gaussians
                .iter()
                .map(|(id, recs)| {
                    let comps = recs
                        .iter()
                        .map(|g| DiagGaussian {
                            mean: g.mean.clone(),
                            var: g.var.clone(),
                        })
                        .collect();
                    (*id, comps)
                })
                .collect(),
        };
        validate(&structure, &params)?;
        Ok((structure, params))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ModelParse {
            line: e.line(),
            column: e.column(),
            message: strip_location(&e.to_string()),
        })
    }
}

fn current_version() -> u32 {
    MODEL_FILE_VERSION
}

fn strip_location(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Serializes a latent tree to model-file JSON.
pub fn to_json(structure: &LatentStructure, params: &TreeParameters) -> String {
    ModelFile::from_tree(structure, params).to_json()
}

/// Parses model-file JSON back into a validated latent tree.
pub fn from_json(text: &str) -> Result<(LatentStructure, TreeParameters)> {
    ModelFile::from_json(text)?.tree()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "version": 1,
        "latent_nodes": [{"id": 0, "card": 2, "parent": null}],
        "pouch_nodes": [{"id": 1, "vars": [0, 1], "parent": 0}],
        "root_prior": [0.25, 0.75],
        "cpts": {},
        "gaussians": {"1": [
            {"mean": [0.0, 1.0], "var": [1.0, 2.0]},
            {"mean": [-1.0, 3.5], "var": [0.5, 0.5]}
        ]}
    }"#;

    #[test]
    fn minimal_file_parses() {
        let (s, p) = from_json(MINIMAL).unwrap();
        assert_eq!(s, LatentStructure::single_latent(2, vec![vec![0, 1]]));
        assert_eq!(p.root_prior, vec![0.25, 0.75]);
        assert_eq!(p.gaussians[&NodeId(1)][1].mean, vec![-1.0, 3.5]);
    }

    #[test]
    fn empty_object_reports_missing_latents() {
        let err = from_json("{}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing") && msg.contains("latent_nodes"), "{msg}");
        assert!(matches!(err, Error::ModelParse { line: 1, .. }));
    }

    #[test]
    fn malformed_json_has_location() {
        let err = from_json("{\n  \"version\": 1,\n  oops\n}").unwrap_err();
        match err {
            Error::ModelParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn invalid_model_is_rejected() {
        let bad = MINIMAL.replace("[0.25, 0.75]", "[0.25, 0.65]");
        assert!(matches!(from_json(&bad), Err(Error::InvalidModel(_))));
    }
}

//! A trained model: latent tree prior plus encoder and decoder.

use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::{Head, MlpNetwork, Vae};
use crate::tree::{LatentStructure, ModelFile, TreeParameters};

#[derive(Clone, Debug, PartialEq)]
pub struct LtvaeModel {
    pub structure: LatentStructure,
    pub params: TreeParameters,
    pub vae: Vae,
}

impl LtvaeModel {
    pub fn new(structure: LatentStructure, params: TreeParameters, vae: Vae) -> Result<Self> {
        crate::tree::validate(&structure, &params)?;
        if structure.n_vars() != vae.z_dim() {
            return Err(Error::DimensionMismatch {
                expected: vae.z_dim(),
                got: structure.n_vars(),
            });
        }
        Ok(LtvaeModel { structure, params, vae })
    }

    pub fn to_file(&self) -> ModelFile {
        let mut f = ModelFile::from_tree(&self.structure, &self.params);
        f.head = Some(self.vae.head.name().to_string());
        f.encoder = Some(self.vae.encoder.to_record());
        f.decoder = Some(self.vae.decoder.to_record());
        f
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let (structure, params) = file.tree()?;
        let missing = |what: &str| Error::Format(format!("model file has no {what}"));
        let head: Head = file.head.as_deref().ok_or_else(|| missing("head"))?.parse()?;
        let encoder = MlpNetwork::from_record(file.encoder.as_ref().ok_or_else(|| missing("encoder"))?)?;
        let decoder = MlpNetwork::from_record(file.decoder.as_ref().ok_or_else(|| missing("decoder"))?)?;
        if encoder.n_out() != 2 * decoder.n_in() || encoder.n_in() != decoder.n_out() {
            return Err(Error::Format("encoder and decoder shapes do not match".into()));
        }
        LtvaeModel::new(structure, params, Vae { encoder, decoder, head })
    }

    pub fn to_json(&self) -> String {
        self.to_file().to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        LtvaeModel::from_file(&ModelFile::from_json(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        LtvaeModel::from_json(&std::fs::read_to_string(path)?)
    }
}

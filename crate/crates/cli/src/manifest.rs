//! Run manifest: what was run, on which inputs, producing which outputs.

use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult, Common};

pub struct Manifest {
    command: &'static str,
    seed: u64,
    threads: usize,
    out: String,
    pub config: Value,
    inputs: Vec<Value>,
    outputs: Vec<Value>,
    timings: Map<String, Value>,
    pub extra: Map<String, Value>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn entry(path: &Path) -> CliResult<Value> {
    Ok(json!({ "path": path.display().to_string(), "sha256": sha256_file(path)? }))
}

impl Manifest {
    pub fn new(command: &'static str, common: &Common) -> Self {
        Manifest {
            command,
            seed: common.seed,
            threads: common.threads,
            out: common.out.display().to_string(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Map::new(),
            extra: Map::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(entry(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.push(entry(path)?);
        Ok(())
    }

    pub fn timing(&mut self, phase: &str, seconds: f64) {
        self.timings.insert(phase.to_string(), json!(seconds));
    }

    pub fn write(self, dir: &Path) -> CliResult<()> {
        let mut v = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "threads": self.threads,
            "out": self.out,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_seconds": self.timings,
        });
        let obj = v.as_object_mut().expect("object");
        for (k, val) in self.extra {
            obj.insert(k, val);
        }
        let text = serde_json::to_string_pretty(&v).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

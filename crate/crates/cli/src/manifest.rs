use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use paia_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL: &str = "paia";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to rerun one command: seeds, resolved paths, the
/// benchmark layout and the effective configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// `global` plus one entry per stage that draws randomness.
    pub seeds: BTreeMap<String, u64>,
    /// Artifacts read by the command; all must exist before it runs.
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub benchmark: Option<BenchmarkEcho>,
    /// Effective configuration after precedence resolution.
    pub config: serde_json::Value,
    /// Where each configuration value came from: `flag`, `config` or `default`.
    pub sources: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEcho {
    pub concepts: usize,
    pub per_concept: usize,
    pub attacks: Vec<String>,
    pub concept_counts: Vec<usize>,
}

impl ExperimentManifest {
    pub fn new(command: &str, global_seed: u64) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("global".to_string(), global_seed);
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            seeds,
            ..Self::default()
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.inputs.insert(name.into(), path.to_path_buf());
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) -> &mut Self {
        self.outputs.insert(name.into(), path.to_path_buf());
        self
    }

    pub fn seed(&mut self, stage: &str, seed: u64) -> &mut Self {
        self.seeds.insert(stage.into(), seed);
        self
    }

    /// Fails with a missing-artifact error naming the first absent input.
    pub fn resolve(&self) -> Result<(), Error> {
        for (name, path) in &self.inputs {
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    path: path.clone(),
                    hint: format!("input `{name}` not found; {}", producer_hint(name)),
                });
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn producer_hint(input: &str) -> &'static str {
    match input {
        "corpus" | "target_images" | "irrelevant_images" => "run `paia gen-data` first",
        "base" => "run `paia train-base` first",
        "model" => "run `paia finetune` first",
        "bench" => "run `paia benchmark` first",
        _ => "check the path",
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl Machine {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Envelope for every structured report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report<T> {
    pub tool: String,
    pub version: String,
    pub manifest_hash: String,
    pub manifest: ExperimentManifest,
    pub machine: Machine,
    pub result: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(manifest: &ExperimentManifest, result: T) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            manifest_hash: manifest.hash(),
            manifest: manifest.clone(),
            machine: Machine::current(),
            result,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

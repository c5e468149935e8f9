//! Config file and flag/file/default precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use paia_core::training::TrainConfig;
use paia_core::Error;
use serde::{Deserialize, Serialize};

pub const DATA_ROOT_ENV: &str = "PAIA_DATA_ROOT";
pub const DEFAULT_DATA_ROOT: &str = "paia-data";

/// Audit settings as they may appear in the `[audit]` table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    pub strategy: Option<String>,
    pub t_grid: Option<Vec<usize>>,
    pub gamma: Option<usize>,
    pub eps_draws: Option<usize>,
    pub irrelevant_budget: Option<usize>,
    pub normalize: Option<bool>,
    pub seed: Option<u64>,
}

/// Structured text config:
///
/// ```toml
/// data_root = "runs"
/// [train]      # base training, any TrainConfig field
/// [finetune]   # LoRA fine-tuning
/// [audit]
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub data_root: Option<PathBuf>,
    pub train: Option<TrainConfig>,
    pub finetune: Option<TrainConfig>,
    pub audit: AuditSection,
    /// Keys present in `[train]` / `[finetune]`.
    pub train_keys: Vec<String>,
    pub finetune_keys: Vec<String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let value: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut out = ConfigFile::default();
        for (key, v) in value {
            match key.as_str() {
                "data_root" => {
                    let s = v.as_str().ok_or_else(|| Error::Config("data_root must be a string".into()))?;
                    out.data_root = Some(PathBuf::from(s));
                }
                "train" | "finetune" => {
                    let table = v
                        .as_table()
                        .ok_or_else(|| Error::Config(format!("[{key}] must be a table")))?;
                    let cfg = TrainConfig::from_toml(&toml::to_string(table).expect("table serializes"))?;
                    let keys = table.keys().cloned().collect();
                    if key == "train" {
                        out.train = Some(cfg);
                        out.train_keys = keys;
                    } else {
                        out.finetune = Some(cfg);
                        out.finetune_keys = keys;
                    }
                }
                "audit" => {
                    out.audit = v
                        .try_into()
                        .map_err(|e| Error::Config(format!("[audit]: {e}")))?;
                }
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(out)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingArtifact {
                        path: p.to_path_buf(),
                        hint: "config file not found".into(),
                    },
                    _ => Error::Io {
                        path: p.to_path_buf(),
                        source: e,
                    },
                })?;
                Self::parse(&text)
            }
        }
    }
}

/// Records where each resolved value came from.
#[derive(Clone, Debug, Default)]
pub struct Sources(pub BTreeMap<String, String>);

impl Sources {
    /// Flag beats config file beats default.
    pub fn pick<T>(&mut self, name: &str, flag: Option<T>, file: Option<T>, default: T) -> T {
        let (v, src) = match (flag, file) {
            (Some(v), _) => (v, "flag"),
            (None, Some(v)) => (v, "config"),
            (None, None) => (default, "default"),
        };
        self.0.insert(name.into(), src.into());
        v
    }

    pub fn set(&mut self, name: &str, src: &str) {
        self.0.insert(name.into(), src.into());
    }
}

/// `--data-root`, then the config file, then the environment, then `./paia-data`.
pub fn data_root(flag: Option<PathBuf>, file: &ConfigFile) -> PathBuf {
    flag.or_else(|| file.data_root.clone())
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT))
}

/// Overlays the flags that were given on `base`, tracking sources per field.
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub optimizer: Option<paia_core::training::Optimizer>,
    pub uncond_prob: Option<f64>,
}

pub fn resolve_train(
    prefix: &str,
    defaults: TrainConfig,
    file: Option<&TrainConfig>,
    file_keys: &[String],
    flags: &TrainOverrides,
    sources: &mut Sources,
) -> TrainConfig {
    let mut cfg = match file {
        Some(f) => f.clone(),
        None => defaults.clone(),
    };
    // keys absent from the file keep the command's own defaults
    if file.is_some() {
        let d = &defaults;
        let has = |k: &str| file_keys.iter().any(|x| x == k);
        if !has("epochs") {
            cfg.epochs = d.epochs;
        }
        if !has("lr") {
            cfg.lr = d.lr;
        }
        if !has("batch") {
            cfg.batch = d.batch;
        }
        if !has("seed") {
            cfg.seed = d.seed;
        }
        if !has("optimizer") {
            cfg.optimizer = d.optimizer;
        }
        if !has("uncond_prob") {
            cfg.uncond_prob = d.uncond_prob;
        }
    }
    for k in ["epochs", "lr", "batch", "seed", "optimizer", "uncond_prob"] {
        let from_file = file_keys.iter().any(|x| x == k);
        sources.set(&format!("{prefix}.{k}"), if from_file { "config" } else { "default" });
    }
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = flags.$field {
                cfg.$field = v;
                sources.set(&format!("{prefix}.{}", stringify!($field)), "flag");
            }
        };
    }
    flag!(epochs);
    flag!(lr);
    flag!(batch);
    flag!(seed);
    flag!(optimizer);
    flag!(uncond_prob);
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c = ConfigFile::parse(
            "data_root = \"runs\"\n[finetune]\nepochs = 7\n[audit]\ngamma = 40\nstrategy = \"null\"\n",
        )
        .unwrap();
        assert_eq!(c.data_root.as_deref(), Some(Path::new("runs")));
        assert_eq!(c.finetune.as_ref().unwrap().epochs, 7);
        assert_eq!(c.audit.gamma, Some(40));
        assert!(ConfigFile::parse("colour = 1").is_err());
        assert!(ConfigFile::parse("[audit]\ngama = 4").is_err());
    }

    #[test]
    fn precedence_flag_then_file_then_default() {
        let mut s = Sources::default();
        assert_eq!(s.pick("a", Some(1), Some(2), 3), 1);
        assert_eq!(s.pick("b", None, Some(2), 3), 2);
        assert_eq!(s.pick("c", None, None, 3), 3);
        assert_eq!(s.0["a"], "flag");
        assert_eq!(s.0["b"], "config");
        assert_eq!(s.0["c"], "default");
    }

    #[test]
    fn train_overlay() {
        let file = ConfigFile::parse("[train]\nlr = 0.5\n").unwrap();
        let defaults = TrainConfig {
            epochs: 150,
            ..TrainConfig::default()
        };
        let flags = TrainOverrides {
            epochs: Some(3),
            lr: None,
            batch: None,
            seed: None,
            optimizer: None,
            uncond_prob: None,
        };
        let mut s = Sources::default();
        let cfg = resolve_train("train", defaults, file.train.as_ref(), &file.train_keys, &flags, &mut s);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(s.0["train.epochs"], "flag");
        assert_eq!(s.0["train.lr"], "config");
        assert_eq!(s.0["train.batch"], "default");
    }
}

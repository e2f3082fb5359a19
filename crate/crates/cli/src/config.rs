use std::path::Path;

use serde::{Deserialize, Serialize};
use talkmem::eval_harness::{AblationPlan, AdaptConfig, ExperimentConfig};
use talkmem::{Error, Result};

/// Everything a command may read; each section defaults independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub experiment: ExperimentConfig,
    pub adapt: AdaptConfig,
    pub ablation: AblationPlan,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to toml")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Apply `a.b.c=value` overrides. The key must already exist; the value
    /// is parsed as TOML and falls back to a bare string.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut root = toml::Value::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::argument(format!("override `{s}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::argument(format!("`{key}` does not name a config field")))?;
                if i + 1 == parts.len() {
                    match table.get(*part) {
                        Some(_) => {
                            table.insert(part.to_string(), value.clone());
                        }
                        None => return Err(Error::argument(format!("unknown config field `{key}`"))),
                    }
                    break;
                }
                node = table
                    .get_mut(*part)
                    .ok_or_else(|| Error::argument(format!("unknown config field `{key}`")))?;
            }
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_is_lossless() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn defaults_follow_the_reference_values() {
        let cfg = RunConfig::default();
        let w = cfg.experiment.a2e_train.weights;
        assert_eq!((w.cof, w.vtx, w.reg), (1.0, 1.0, 0.1));
        let r = cfg.experiment.renderer_train.weights;
        assert_eq!((r.rec, r.adv), (20.0, 1.0));
        assert_eq!(cfg.experiment.a2e.m, 1000);
        assert_eq!(cfg.experiment.bank_n, 300);
        assert_eq!((cfg.experiment.a2e_train.lr, cfg.experiment.renderer_train.lr), (1e-4, 1e-4));
        assert_eq!((cfg.adapt.a2e.lr, cfg.adapt.a2e.epochs), (5e-6, 200));
        assert_eq!((cfg.adapt.renderer.lr, cfg.adapt.renderer.epochs), (1e-4, 50));
        assert_eq!(cfg.adapt.budget_frames, 375);
    }

    #[test]
    fn desk_preset_file_matches_code() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.experiment, ExperimentConfig::desk());
        assert_eq!(cfg.adapt, AdaptConfig::desk());
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&["experiment.a2e_train.epochs=3".into(), "experiment.a2e.memory=none".into()])
            .unwrap();
        assert_eq!(cfg.experiment.a2e_train.epochs, 3);
        assert_eq!(cfg.experiment.a2e.memory, talkmem::audio2expression::A2EMemory::None);
        assert!(RunConfig::default().with_overrides(&["experiment.nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed".into()]).is_err());
    }
}

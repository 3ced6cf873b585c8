//! Versioned TOML configuration files. Unknown keys are rejected.

use std::path::Path;

use pheno_core::arena::{SplitPlan, UniverseConfig};
use pheno_core::train::{AdversarialWeights, Task, TrainConfig};
use pheno_core::zoo::{Exclusion, GridAxes, Supervision};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub version: u32,
    #[serde(default)]
    pub universe: UniverseConfig,
    #[serde(default)]
    pub plan: SplitPlan,
}

/// Grid axes as written by users. OOD counts may be given directly or as
/// fractions of the dataset's OOD pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub supervision: Vec<Supervision>,
    pub tasks: Vec<Task>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub ood_counts: Option<Vec<usize>>,
    #[serde(default)]
    pub ood_fractions: Option<Vec<f64>>,
    pub replicate_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub adversarial: AdversarialWeights,
    #[serde(default)]
    pub exclude: Vec<Exclusion>,
}

impl GridSection {
    pub fn resolve(&self, pool: usize) -> Result<GridAxes, CliError> {
        let ood_counts = match (&self.ood_counts, &self.ood_fractions) {
            (Some(c), None) => c.clone(),
            (None, Some(f)) => {
                if let Some(bad) = f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(CliError::Config(format!("ood fraction {bad} outside [0, 1]")));
                }
                let mut c: Vec<usize> = f.iter().map(|v| (v * pool as f64).round() as usize).collect();
                c.dedup();
                c
            }
            _ => {
                return Err(CliError::Config(
                    "grid needs exactly one of ood_counts or ood_fractions".into(),
                ))
            }
        };
        if let Some(c) = ood_counts.iter().find(|&&c| c > pool) {
            return Err(CliError::Config(format!(
                "ood count {c} exceeds the dataset's pool of {pool}"
            )));
        }
        Ok(GridAxes {
            supervision: self.supervision.clone(),
            tasks: self.tasks.clone(),
            depths: self.depths.clone(),
            widths: self.widths.clone(),
            ood_counts,
            replicate_fractions: self.replicate_fractions.clone(),
            seeds: self.seeds.clone(),
            adversarial: self.adversarial,
            exclude: self.exclude.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooFile {
    pub version: u32,
    pub grid: GridSection,
    #[serde(default)]
    pub train: TrainConfig,
}

pub fn load<T: DeserializeOwned>(path: &Path, version_of: impl Fn(&T) -> u32) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parsed: T = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let v = version_of(&parsed);
    if v != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "{}: config version {v} is not supported (expected {CONFIG_VERSION})",
            path.display()
        )));
    }
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse<T: DeserializeOwned>(s: &str) -> Result<T, toml::de::Error> {
        toml::from_str(s)
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(parse::<SynthFile>("version = 1\n[universe]\nn_targetz = 3\n").is_err());
        let grid = "version = 1\n[grid]\nsupervision=[\"ibp\"]\ntasks=[\"moa\"]\ndepths=[1]\nwidths=[8]\n\
                    ood_counts=[0]\nreplicate_fractions=[1.0]\nseeds=[0]\ndepth=[2]\n";
        assert!(parse::<ZooFile>(grid).is_err());
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let f: SynthFile = parse("version = 1\n").unwrap();
        assert_eq!(f.universe, UniverseConfig::default());
        assert_eq!(f.plan, SplitPlan::default());
    }

    #[test]
    fn fractions_resolve_against_pool() {
        let g: ZooFile = parse(
            "version = 1\n[grid]\nsupervision=[\"ibp\"]\ntasks=[\"moa\"]\ndepths=[1]\nwidths=[8]\n\
             ood_fractions=[0.0, 0.5, 1.0]\nreplicate_fractions=[1.0]\nseeds=[0]\n",
        )
        .unwrap();
        assert_eq!(g.grid.resolve(30).unwrap().ood_counts, vec![0, 15, 30]);
        let mut both = g.grid.clone();
        both.ood_counts = Some(vec![1]);
        assert!(matches!(both.resolve(30), Err(CliError::Config(_))));
        let mut too_many = g.grid;
        too_many.ood_fractions = None;
        too_many.ood_counts = Some(vec![31]);
        assert!(matches!(too_many.resolve(30), Err(CliError::Config(_))));
    }

    #[test]
    fn wrong_version_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.toml");
        std::fs::write(&p, "version = 2\n").unwrap();
        let e = load::<SynthFile>(&p, |f| f.version).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("version 2"));
    }
}

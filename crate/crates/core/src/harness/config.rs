use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::DEFAULT_IRM_LAMBDA;
use crate::drig::{DrigVariant, Weighting};
use crate::error::{CirrlError, Result};
use crate::repr_train::ReprTrainConfig;
use crate::scm_gen::{GenConfig, NoiseFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training CSV to load instead of generating.
    pub train_csv: Option<PathBuf>,
    /// Test CSVs evaluated as OOD sets when loading from disk.
    pub test_csvs: Vec<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_csv: None,
            test_csvs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrigSection {
    pub gammas: Vec<f64>,
    pub variant: DrigVariant,
    pub weighting: Weighting,
}

impl Default for DrigSection {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 1.0, 5.0, 10.0, 20.0, 50.0],
            variant: DrigVariant::FirstOrder,
            weighting: Weighting::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub erm: bool,
    pub erm_dropout: f64,
    pub irm_lambdas: Vec<f64>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            erm: true,
            erm_dropout: crate::baselines::ERM_DROPOUT,
            irm_lambdas: vec![DEFAULT_IRM_LAMBDA],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub etas: Vec<f64>,
    pub families: Vec<NoiseFamily>,
    pub n_test: usize,
    pub oracle: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 2.0, 5.0, 10.0, 20.0],
            families: vec![NoiseFamily::Gaussian, NoiseFamily::Chi2],
            n_test: 2000,
            oracle: true,
        }
    }
}

/// Everything one sweep needs. Each training seed replaces the seeds of the
/// generation, representation and baseline configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub generation: GenConfig,
    pub representation: ReprTrainConfig,
    pub drig: DrigSection,
    pub baselines: BaselineSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            data: DataSection::default(),
            generation: GenConfig::default(),
            representation: ReprTrainConfig::default(),
            drig: DrigSection::default(),
            baselines: BaselineSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CirrlError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CirrlError::InvalidConfig(m));
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.drig.gammas.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return bad(format!("gamma grid must be finite and >= 0, got {:?}", self.drig.gammas));
        }
        if self.evaluation.etas.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return bad(format!("eta grid must be finite and >= 0, got {:?}", self.evaluation.etas));
        }
        if self.baselines.irm_lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("IRM lambdas must be >= 0".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(',') {
            return bad("run_id must be nonempty and comma-free".into());
        }
        self.representation.validate()?;
        if self.data.train_csv.is_none() {
            self.generation.validate()?;
        }
        Ok(())
    }

    /// Generation config for one seed.
    pub fn generation_for(&self, seed: u64) -> GenConfig {
        GenConfig {
            seed,
            ..self.generation.clone()
        }
    }

    /// Representation config for one seed.
    pub fn representation_for(&self, seed: u64) -> ReprTrainConfig {
        ReprTrainConfig {
            seed,
            ..self.representation.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("seeds = [1, 2]\n[drig]\ngammas = [0.0, 3.0]\n").unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.drig.gammas, vec![0.0, 3.0]);
        assert_eq!(cfg.generation, GenConfig::default());
    }

    #[test]
    fn invalid_documents_are_rejected() {
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("[drig]\ngammas = [-1.0]").is_err());
        assert!(ExperimentConfig::from_toml("[evaluation]\netas = [-2.0]").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[evaluation]\nfamilies = [\"cauchy\"]").is_err());
    }
}

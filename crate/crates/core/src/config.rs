//! Experiment configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::losses::ClassWeights;
use crate::networks::NetworkConfig;
use crate::phantom::{CountModel, PhantomSpec};
use crate::pipeline::InferenceConfig;
use crate::rng;
use crate::training::{Ablation, TrainConfig, TrainSettings};
use crate::volume::ClassRoster;

/// Expected counts per voxel per unit SUV at the full count level.
pub const DEFAULT_COUNTS_PER_SUV: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// `[x, y, z]` voxels.
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    /// Organ classes drawn from the default roster, in order.
    pub organs: usize,
    pub counts_per_suv: f64,
    /// Count level of the reference image.
    pub hc_fraction: f64,
    /// Low-count levels written per case.
    pub fractions: Vec<f64>,
    pub n_cases: usize,
    /// Cases at the end of the list held out for testing.
    pub test_cases: usize,
    pub smoothing_fwhm_mm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [32; 3],
            voxel_mm: [4.0; 3],
            organs: 7,
            counts_per_suv: DEFAULT_COUNTS_PER_SUV,
            hc_fraction: 1.0,
            fractions: vec![0.05, 0.1, 0.2],
            n_cases: 6,
            test_cases: 2,
            smoothing_fwhm_mm: 0.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        CountModel::new(self.counts_per_suv, self.hc_fraction)?;
        if self.fractions.is_empty() {
            return Err(Error::Config("phantom.fractions must not be empty".into()));
        }
        for &f in &self.fractions {
            CountModel::new(self.counts_per_suv, f)?;
        }
        if !(self.smoothing_fwhm_mm >= 0.0 && self.smoothing_fwhm_mm.is_finite()) {
            return Err(Error::Config("phantom.smoothing_fwhm_mm must be >= 0".into()));
        }
        self.spec(0)?.validate()
    }

    /// Phantom layout of case `index` under master seed `seed`.
    pub fn spec(&self, seed: u64) -> Result<PhantomSpec> {
        let mut spec = PhantomSpec::standard(self.dims, self.voxel_mm, self.organs, seed)?;
        spec.smoothing_fwhm_mm = self.smoothing_fwhm_mm;
        Ok(spec)
    }

    pub fn case_spec(&self, master_seed: u64, index: usize) -> Result<PhantomSpec> {
        self.spec(rng::derive_seed(master_seed, "phantom", &[index as u64]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    /// Whole-volume patch grid used at inference.
    pub patching: InferenceConfig,
    pub diffusion: DiffusionConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    /// Per-class loss weights `w_0..w_S`; defaults apply when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomConfig::default(),
            patching: InferenceConfig::default(),
            diffusion: DiffusionConfig::default(),
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
            weights: None,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.network.classes != self.phantom.organs + 1 {
            return Err(Error::Config(format!(
                "network.classes is {} but {} organs give S = {}",
                self.network.classes,
                self.phantom.organs,
                self.phantom.organs + 1
            )));
        }
        self.settings()?.validate()?;
        let p = self.patching.patch;
        self.network.check_patch([p[2], p[1], p[0]])?;
        self.patching.grid(self.phantom.dims)?;
        Ok(())
    }

    pub fn class_weights(&self) -> Result<ClassWeights> {
        match &self.weights {
            Some(w) => ClassWeights::new(w.clone()),
            None => ClassWeights::defaults(self.network.classes),
        }
    }

    pub fn roster(&self) -> Result<ClassRoster> {
        ClassRoster::with_organs(self.phantom.organs)
    }

    pub fn settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            network: self.network.clone(),
            diffusion: self.diffusion.clone(),
            train: self.training.clone(),
            weights: self.class_weights()?,
            ablation: self.ablation,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg.diffusion.steps, 250);
        assert_eq!(cfg.phantom.fractions, vec![0.05, 0.1, 0.2]);
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [r#"{"bogus": 1}"#, r#"{"network": {"depth": 3}}"#, r#"{"diffusion": {"T": 10, "x": 0}}"#] {
            assert!(matches!(ExperimentConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn inconsistent_classes_rejected() {
        let doc = r#"{"phantom": {"organs": 2}, "network": {"classes": 8}}"#;
        assert!(matches!(ExperimentConfig::from_json(doc), Err(Error::Config(_))));
        let doc = r#"{"phantom": {"organs": 2}, "network": {"classes": 3}, "weights": [0.1, 4.0]}"#;
        assert!(matches!(ExperimentConfig::from_json(doc), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        cfg.weights = Some(vec![0.1, 4.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

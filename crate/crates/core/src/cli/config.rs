use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{perturb_stage_inputs, AnalysisParams};
use crate::cil::{make_split, Algorithm, Dataset, Hyper, IncrementalSplit, Schedule, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, HeadSpec};
use crate::numeric::RngStream;

/// How the classes are cut into stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub base: usize,
    pub steps: usize,
    pub per_step: usize,
    /// Seeds the class order.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            base: 5,
            steps: 5,
            per_step: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: Algorithm,
    /// Partial-DER branch point; ignored by the other learners.
    pub branch_stage: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub exemplars_per_class: usize,
    pub head: HeadSpec,
    pub arch: ArchSpec,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        let h = Hyper::default();
        AlgorithmConfig {
            name: Algorithm::Naive,
            branch_stage: h.branch_stage,
            lambda: h.distill_lambda,
            temperature: h.temperature,
            exemplars_per_class: h.exemplars_per_class,
            head: h.head,
            arch: h.arch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Root seed of training; every stage derives its draws from it.
    pub seed: u64,
    pub base: Schedule,
    pub incremental: Schedule,
    pub exploit: Schedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let h = Hyper::default();
        ScheduleConfig {
            seed: 0,
            base: h.base,
            incremental: h.incremental,
            exploit: h.exploit,
        }
    }
}

/// One experiment, as read from a TOML file. Missing keys take defaults and
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: SyntheticSpec,
    pub split: SplitConfig,
    pub algorithm: AlgorithmConfig,
    pub schedule: ScheduleConfig,
    pub analysis: AnalysisParams,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ExperimentConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                ExperimentConfig::from_toml(&text)
            }
        }
    }

    /// The fully resolved config, every default spelled out.
    ///
    /// Panics on seeds above `i64::MAX`, which TOML cannot hold and
    /// [`ExperimentConfig::validate`] rejects.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hex SHA-256 of [`ExperimentConfig::to_toml`].
    pub fn hash(&self) -> String {
        super::sha256_hex(self.to_toml().as_bytes())
    }

    /// Replaces the data, split and training seeds with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.split.seed = seed;
        self.schedule.seed = seed;
        self
    }

    pub fn hyper(&self) -> Hyper {
        let a = &self.algorithm;
        Hyper {
            arch: a.arch.clone(),
            head: a.head.clone(),
            base: self.schedule.base.clone(),
            incremental: self.schedule.incremental.clone(),
            exploit: self.schedule.exploit.clone(),
            distill_lambda: a.lambda,
            temperature: a.temperature,
            exemplars_per_class: a.exemplars_per_class,
            branch_stage: a.branch_stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.analysis;
        for seed in [
            self.dataset.seed,
            self.split.seed,
            self.schedule.seed,
            a.retrain_seed,
            a.cka_seed,
            a.tsne_seed,
            a.shift_seed,
        ] {
            if seed > i64::MAX as u64 {
                return Err(Error::Config(format!("seed {seed} exceeds {}", i64::MAX)));
            }
        }
        let d = &self.dataset;
        if d.classes == 0 || d.dim == 0 || d.train_per_class == 0 || d.val_per_class == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if !(d.radius >= 0.0) || !(d.noise >= 0.0) {
            return Err(Error::Config("radius and noise must be non-negative".into()));
        }
        if self.algorithm.arch.input_dim != d.dim {
            return Err(Error::Config(format!(
                "algorithm.arch.input_dim = {} but dataset.dim = {}",
                self.algorithm.arch.input_dim, d.dim
            )));
        }
        let s = &self.split;
        if s.base + s.steps * s.per_step != d.classes {
            return Err(Error::Config(format!(
                "split base {} + {}×{} does not cover {} classes",
                s.base, s.steps, s.per_step, d.classes
            )));
        }
        let p = &self.analysis.perturbation;
        if !p.is_empty() && p.len() != s.steps {
            return Err(Error::Config(format!(
                "perturbation schedule has {} entries for {} incremental stages",
                p.len(),
                s.steps
            )));
        }
        self.analysis.retrain.validate("retrain schedule")?;
        self.hyper().validate()
    }

    /// The clean dataset and the split it is cut by.
    pub fn build_clean(&self) -> Result<(Dataset, IncrementalSplit)> {
        self.validate()?;
        let data = Dataset::synthetic(&self.dataset)?;
        let split = self.build_split()?;
        Ok((data, split))
    }

    pub fn build_split(&self) -> Result<IncrementalSplit> {
        let s = &self.split;
        make_split(
            self.dataset.classes,
            s.base,
            s.steps,
            s.per_step,
            &mut RngStream::new(s.seed).derive("class-order"),
        )
    }

    /// `clean` with the configured perturbation applied, or a copy of it
    /// when none is configured.
    pub fn apply_perturbation(&self, clean: &Dataset, split: &IncrementalSplit) -> Result<Dataset> {
        if self.analysis.perturbation.is_empty() {
            return Ok(clean.clone());
        }
        perturb_stage_inputs(
            clean,
            split,
            &self.analysis.perturbation,
            &RngStream::new(self.dataset.seed).derive("perturbation"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{Perturbation, PerturbationKind};

    #[test]
    fn empty_file_resolves_to_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.hyper(), Hyper::default());
    }

    #[test]
    fn resolved_toml_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.algorithm.name = Algorithm::Pder;
        cfg.analysis.perturbation = Perturbation::default_schedule();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.analysis.tsne_seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_seed(3).hash());
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "[dataset]\nclasses = 11\n",
            "[dataset]\ncolour = 1\n",
            "[algorithm]\nname = \"icarl\"\n",
            "[algorithm]\nbranch_stage = 4\n",
            "[dataset]\ndim = 16\n",
            "[schedule.base]\nbatch_size = 0\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))),
                "{text:?} accepted"
            );
        }
        let mut cfg = ExperimentConfig::default();
        cfg.analysis.perturbation = vec![Perturbation::new(PerturbationKind::Noise, 1.0)];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let huge = ExperimentConfig::default().with_seed(u64::MAX);
        assert!(matches!(huge.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[algorithm]\nname = \"der\"\n[schedule.incremental]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.algorithm.name, Algorithm::Der);
        assert_eq!(cfg.schedule.incremental.epochs, 3);
        assert_eq!(cfg.schedule.incremental.lr, 0.1);
        assert_eq!(cfg.schedule.base.epochs, 60);
    }
}

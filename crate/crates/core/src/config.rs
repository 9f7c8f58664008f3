//! Run configuration: sectioned TOML (or JSON) with unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, SyntheticUniverse};
use crate::error::{Error, Result};
use crate::grpo::{TrainerConfig, PAPER_LEARNING_RATE, TABULAR_LEARNING_RATE};
use crate::reward::RewardConfig;
use crate::verifier::{DateVerifier, RuleEngine, StubVerifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    PaperFaithful,
    #[default]
    TabularFast,
}

impl Profile {
    pub fn learning_rate(self) -> f64 {
        match self {
            Profile::PaperFaithful => PAPER_LEARNING_RATE,
            Profile::TabularFast => TABULAR_LEARNING_RATE,
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-faithful" => Ok(Profile::PaperFaithful),
            "tabular-fast" => Ok(Profile::TabularFast),
            other => Err(Error::Config(format!("unknown profile `{other}` (paper-faithful | tabular-fast)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::PaperFaithful => "paper-faithful",
            Profile::TabularFast => "tabular-fast",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VerifierBackend {
    /// True availability dates from the synthetic universe.
    #[default]
    Oracle,
    Rules,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierConfig {
    pub backend: VerifierBackend,
    /// TOML rule table for the rules backend; built-in rules when absent.
    pub rule_file: Option<PathBuf>,
    /// NDJSON verdicts for the stub backend.
    pub stub_file: Option<PathBuf>,
}

/// Sizes and seeds for the theory suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub alignment_trials: usize,
    pub gradient_trials: usize,
    pub descent_envs: usize,
    pub descent_max_steps: usize,
    pub convergence_max_steps: usize,
    pub mixed_alpha: f64,
    pub mixed_learning_rate: f64,
    pub noise_floor_steps: usize,
    pub noise_floor_seeds: usize,
    pub curriculum_steps: usize,
    pub scale_trials: usize,
    pub penalty_leak_mass: f64,
    pub penalty_group_sizes: Vec<usize>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            alignment_trials: 100,
            gradient_trials: 50,
            descent_envs: 20,
            descent_max_steps: 2000,
            convergence_max_steps: 500,
            mixed_alpha: 0.5,
            mixed_learning_rate: 0.05,
            noise_floor_steps: 300,
            noise_floor_seeds: 4,
            curriculum_steps: 300,
            scale_trials: 1000,
            penalty_leak_mass: 0.2,
            penalty_group_sizes: vec![2, 4, 8, 12],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub profile: Profile,
    /// Pre-generated universe; generated from `[env]` when absent.
    pub universe_file: Option<PathBuf>,
    pub trainer: TrainerConfig,
    pub reward: RewardConfig,
    pub env: EnvSpec,
    pub verifier: VerifierConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            profile: Profile::default(),
            universe_file: None,
            trainer: TrainerConfig::default(),
            reward: RewardConfig::default(),
            env: EnvSpec::default(),
            verifier: VerifierConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("{e}")))
    }

    /// Load by extension: `.json` as JSON, anything else as TOML. Relative
    /// file references resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.universe_file, &mut cfg.verifier.rule_file, &mut cfg.verifier.stub_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Fill profile-dependent defaults and validate every section.
    pub fn resolve(mut self) -> Result<Self> {
        if self.trainer.learning_rate.is_none() {
            self.trainer.learning_rate = Some(self.profile.learning_rate());
        }
        self.trainer.validate()?;
        self.reward.validate()?;
        self.env.validate()?;
        for p in [&self.universe_file, &self.verifier.rule_file, &self.verifier.stub_file].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        if self.verifier.backend == VerifierBackend::Stub && self.verifier.stub_file.is_none() {
            return Err(Error::Config("verifier backend `stub` needs stub_file".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn universe(&self) -> Result<SyntheticUniverse> {
        match &self.universe_file {
            Some(p) => SyntheticUniverse::from_file(p),
            None => crate::env::generate_env(&self.env),
        }
    }

    pub fn verifier(&self, universe: &SyntheticUniverse) -> Result<Box<dyn DateVerifier>> {
        Ok(match self.verifier.backend {
            VerifierBackend::Oracle => Box::new(universe.oracle()),
            VerifierBackend::Rules => match &self.verifier.rule_file {
                Some(p) => Box::new(RuleEngine::from_file(p)?),
                None => Box::new(RuleEngine::with_defaults()),
            },
            VerifierBackend::Stub => {
                let p = self.verifier.stub_file.as_ref().ok_or_else(|| Error::Config("stub_file missing".into()))?;
                Box::new(StubVerifier::from_file(p)?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap().resolve().unwrap();
        assert_eq!(cfg.trainer.learning_rate, Some(TABULAR_LEARNING_RATE));
        assert_eq!(cfg.trainer.group_size, 12);
    }

    #[test]
    fn profile_sets_learning_rate_unless_given() {
        let cfg = RunConfig::from_toml_str("profile = \"paper-faithful\"").unwrap().resolve().unwrap();
        assert_eq!(cfg.trainer.learning_rate, Some(PAPER_LEARNING_RATE));
        let cfg = RunConfig::from_toml_str("profile = \"paper-faithful\"\n[trainer]\nlearning_rate = 0.3")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.trainer.learning_rate, Some(0.3));
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::from_toml_str("[trainer]\ngroup_sise = 4\n").unwrap_err().to_string();
        assert!(err.contains("group_sise"), "{err}");
        assert!(err.contains("line 2"), "{err}");
        assert!(RunConfig::from_json_str(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_fail_resolution() {
        assert!(RunConfig::from_toml_str("[trainer]\ngroup_size = 1").unwrap().resolve().is_err());
        assert!(RunConfig::from_toml_str("[env]\nuniverse_size = 1").unwrap().resolve().is_err());
        assert!(RunConfig::from_toml_str("[verifier]\nrule_file = \"/no/such/file\"").unwrap().resolve().is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::default().resolve().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json_str(&json).unwrap(), cfg);
    }
}

//! Experiment configuration: a TOML file with `[model]`, `[train]`, `[sewc]`,
//! `[routing]`, and `[data]` sections. Every field has a documented default;
//! unknown keys are errors; `parse(render(config)) == config`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::map::FamilyFlags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Per-domain prompts, selective consolidation, prototype routing.
    Svlp,
    /// Sequential fine-tuning with one shared prompt set and no consolidation.
    Ft,
    /// Joint training on the pooled data of all domains (the reference).
    Jt,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Svlp => write!(f, "svlp"),
            TrainMode::Ft => write!(f, "ft"),
            TrainMode::Jt => write!(f, "jt"),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svlp" => Ok(TrainMode::Svlp),
            "ft" => Ok(TrainMode::Ft),
            "jt" => Ok(TrainMode::Jt),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected svlp, ft, or jt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunDtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    /// Visual prompt token count per domain.
    pub visual_prompt_len: usize,
    /// Context vector count per text prompt family.
    pub ctx_len: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Optimization steps per domain (joint training runs this many per
    /// pooled domain, keeping total compute comparable).
    pub iterations: usize,
    pub seed: u64,
    pub dtype: RunDtype,
    /// Initialize a new domain's prompts from the previous domain's frozen
    /// values instead of a fresh draw.
    pub warm_start_prompts: bool,
    pub no_da: bool,
    pub no_ds: bool,
    pub no_mix: bool,
    pub no_fixed: bool,
    pub no_visual: bool,
    pub no_sewc: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: TrainMode::Svlp,
            visual_prompt_len: 16,
            ctx_len: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 8,
            iterations: 400,
            seed: 7,
            dtype: RunDtype::F32,
            warm_start_prompts: true,
            no_da: false,
            no_ds: false,
            no_mix: false,
            no_fixed: false,
            no_visual: false,
            no_sewc: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SewcSection {
    /// Selection fraction: the per-domain top-p share of backbone
    /// coordinates entering the important set. 0 disables selection.
    pub p: f64,
    /// Per-sample gradient count cap for Fisher estimation.
    pub fisher_samples: usize,
    /// Penalty multiplier; 1.0 is the method, other values are ablations.
    pub lambda: f64,
    /// Study variant: anchor each coordinate only to the domains that
    /// selected it, instead of to every past optimum.
    pub sum_selected_only: bool,
}

impl Default for SewcSection {
    fn default() -> Self {
        SewcSection {
            p: 0.5,
            fisher_samples: 256,
            lambda: 1.0,
            sum_selected_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingSection {
    /// Prototypes per domain.
    pub k: usize,
}

impl Default for RoutingSection {
    fn default() -> Self {
        RoutingSection { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Default dataset directory; the `--data` flag overrides it.
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: EncoderConfig,
    pub train: TrainSection,
    pub sewc: SewcSection,
    pub routing: RoutingSection,
    pub data: DataSection,
}

impl ExperimentConfig {
    /// Defaults tuned for seconds-scale CPU runs: lr 1e-3, 400 iterations.
    pub fn toy() -> Self {
        ExperimentConfig::default()
    }

    /// Hyperparameters mirrored from the full-scale setting: lr 1e-5,
    /// weight decay 1e-5, 100 iterations per domain.
    pub fn paper() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.train.learning_rate = 1e-5;
        cfg.train.weight_decay = 1e-5;
        cfg.train.iterations = 100;
        cfg
    }

    pub fn family_flags(&self) -> FamilyFlags {
        FamilyFlags {
            no_da: self.train.no_da,
            no_ds: self.train.no_ds,
            no_mix: self.train.no_mix,
            no_fixed: self.train.no_fixed,
            no_visual: self.train.no_visual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate(self.train.visual_prompt_len, self.train.ctx_len)?;
        if !(0.0..=1.0).contains(&self.sewc.p) {
            return Err(Error::SelectionFraction(self.sewc.p));
        }
        if self.train.batch_size == 0 || self.train.iterations == 0 {
            return Err(Error::Config(
                "batch_size and iterations must be positive".to_string(),
            ));
        }
        if self.routing.k == 0 {
            return Err(Error::Config("routing.k must be positive".to_string()));
        }
        if self.sewc.fisher_samples == 0 {
            return Err(Error::Config(
                "sewc.fisher_samples must be positive".to_string(),
            ));
        }
        if self.family_flags().active_families().is_empty() {
            return Err(Error::Config(
                "all four prompt families are ablated away".to_string(),
            ));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip_is_identity() {
        for cfg in [ExperimentConfig::toy(), ExperimentConfig::paper()] {
            let text = cfg.render();
            let back = ExperimentConfig::parse(&text).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[train]\nmode = \"svlp\"\nbogus_knob = 3\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }

    #[test]
    fn paper_defaults_carry_the_mirrored_constants() {
        let cfg = ExperimentConfig::paper();
        assert_eq!(cfg.train.visual_prompt_len, 16);
        assert_eq!(cfg.train.ctx_len, 16);
        assert_eq!(cfg.sewc.p, 0.5);
        assert_eq!(cfg.routing.k, 5);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.learning_rate, 1e-5);
        assert_eq!(cfg.train.weight_decay, 1e-5);
        assert_eq!(cfg.train.iterations, 100);
    }

    #[test]
    fn invalid_fraction_and_empty_family_set_fail_validation() {
        let mut cfg = ExperimentConfig::toy();
        cfg.sewc.p = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::toy();
        cfg.train.no_da = true;
        cfg.train.no_ds = true;
        cfg.train.no_mix = true;
        cfg.train.no_fixed = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = ExperimentConfig::parse("[train]\nseed = 99\n").unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.model, EncoderConfig::default());
    }
}

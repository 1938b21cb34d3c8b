//! TOML experiment configuration with full-scale defaults and a reduced
//! `--quick` profile for smoke runs.

use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Perfect-model setting: nature and forecast model are the same
    /// single-scale system.
    Pms,
    /// Imperfect-model setting: two-scale nature, surrogate forecast model.
    Ims,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of slow state variables.
    pub s: usize,
    /// Single-scale / surrogate forcing.
    pub f_single: f64,
    /// Two-scale forcing.
    pub f_two_scale: f64,
    /// Fast variables per slow variable.
    pub j_per_x: usize,
    pub h: f64,
    pub c: f64,
    pub b: f64,
    /// Forecast-model time step.
    pub dt: f64,
    /// Two-scale nature integration step (must divide `dt`).
    pub dt_nature: f64,
    /// Surrogate closure defaults; refit from the nature run when
    /// `fit_surrogate` is set.
    pub surrogate_alpha: f64,
    pub surrogate_beta: f64,
    pub fit_surrogate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            s: 8,
            f_single: 8.0,
            f_two_scale: 20.0,
            j_per_x: 32,
            h: 1.0,
            c: 10.0,
            b: 10.0,
            dt: 0.0125,
            dt_nature: 0.0025,
            surrogate_alpha: 19.16,
            surrogate_beta: -0.81,
            fit_surrogate: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssimConfig {
    pub n_members: usize,
    pub inflation: f64,
    /// Model steps between observations.
    pub obs_every: usize,
    pub sigma_r: f64,
    pub localization_radius: Option<f64>,
    /// Total assimilation cycles including spinup.
    pub cycles: usize,
    /// Leading cycles discarded before any dataset is built.
    pub spinup_cycles: usize,
}

impl Default for AssimConfig {
    fn default() -> Self {
        Self {
            n_members: 50,
            inflation: 1.05,
            obs_every: 4,
            sigma_r: 1.0,
            localization_radius: None,
            cycles: 13_650,
            spinup_cycles: 650,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Lead of the verified forecast, in model steps (multiple of obs_every).
    pub output_lead: usize,
    /// Leads whose deterministic states feed the networks, in model steps.
    pub input_leads: Vec<usize>,
    /// Propagate the analysis ensemble alongside the deterministic run.
    pub with_ensemble: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { output_lead: 4, input_leads: vec![0, 4], with_ensemble: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 7000, validation: 3000, test: 3000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Train against the analysis mean at the valid time.
    Analysis,
    /// Train against the nature state at the valid time.
    Truth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub eval_every_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub repeats: usize,
    pub hidden: Vec<usize>,
    pub target: TargetMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 50,
            eval_every_epochs: 20,
            patience: 3,
            max_epochs: 5000,
            lr_grid: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            wd_grid: vec![0.0, 5e-1, 1e-1, 1e-2],
            repeats: 5,
            hidden: vec![50, 50],
            target: TargetMode::Analysis,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeadtimeConfig {
    /// Output leads (model steps) covered by the lead-time study.
    pub output_leads: Vec<usize>,
}

impl Default for LeadtimeConfig {
    fn default() -> Self {
        Self { output_leads: vec![4, 40, 80, 160, 280] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub master_seed: u64,
    pub model: ModelConfig,
    pub assim: AssimConfig,
    pub forecast: ForecastConfig,
    pub split: SplitConfig,
    pub train: TrainSection,
    pub leadtime: LeadtimeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Pms,
            master_seed: 0,
            model: ModelConfig::default(),
            assim: AssimConfig::default(),
            forecast: ForecastConfig::default(),
            split: SplitConfig::default(),
            train: TrainSection::default(),
            leadtime: LeadtimeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.model.s >= 4, "need at least 4 state variables");
        anyhow::ensure!(self.assim.obs_every >= 1, "obs_every must be positive");
        anyhow::ensure!(
            self.forecast.output_lead % self.assim.obs_every == 0,
            "output lead must be a whole number of observation intervals"
        );
        anyhow::ensure!(
            self.assim.spinup_cycles < self.assim.cycles,
            "spinup must leave cycles for the experiment"
        );
        let ratio = self.model.dt / self.model.dt_nature;
        anyhow::ensure!(
            (ratio - ratio.round()).abs() < 1e-9 && ratio >= 1.0,
            "dt_nature must divide dt"
        );
        anyhow::ensure!(self.assim.n_members >= 2, "need at least 2 ensemble members");
        Ok(())
    }

    /// Reduced profile for CI: fewer cycles (2,000), a 2×1 hyperparameter
    /// grid, and 2 repeats. Remaining settings match the full profile, so a
    /// quick pipeline exercises the same code paths in a few minutes.
    pub fn quick(mut self) -> Self {
        self.assim.cycles = 2000;
        self.assim.spinup_cycles = 200;
        self.split = SplitConfig { train: 1200, validation: 300, test: 300 };
        self.train.lr_grid = vec![1e-2, 1e-3];
        self.train.wd_grid = vec![0.0];
        self.train.repeats = 2;
        self.train.max_epochs = 500;
        self.leadtime.output_leads = vec![4, 40, 80];
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<ExperimentConfig>("unknown_key = 3").unwrap_err();
        assert!(err.to_string().contains("unknown"));
    }

    #[test]
    fn misaligned_output_lead_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.forecast.output_lead = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn quick_profile_still_valid() {
        ExperimentConfig::default().quick().validate().unwrap();
    }
}

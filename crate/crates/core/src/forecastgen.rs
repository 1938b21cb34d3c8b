//! Deterministic and ensemble forecast dataset generation.
//!
//! One [`ForecastSample`] is produced per analysis cycle: the deterministic
//! forecast states at the configured input lead times (the network input),
//! the ensemble mean/variance at the output lead (baseline and NN-mse targets),
//! the analysis mean valid at the verification time (training target) and the
//! nature state at the same time (ground truth).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;
use thiserror::Error;

use crate::assim::{AnalysisRecord, EnsembleState, ForecastModel};
use crate::dyncore::{rk4_step, DynError, StateVector, Trajectory};

/// Forecasts are integrated up to 3.5 time units (280 steps at dt 0.0125).
pub const MAX_LEAD_STEPS: usize = 280;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("lead {0} exceeds the {MAX_LEAD_STEPS}-step forecast horizon")]
    LeadBeyondHorizon(usize),
    #[error("input leads must be strictly increasing")]
    LeadsNotIncreasing,
    #[error("output lead {output} steps is not a whole number of {obs_every}-step cycles")]
    LeadNotCycleAligned { output: usize, obs_every: usize },
    #[error("not enough trailing analyses: need {need}, have {have}")]
    InsufficientAnalyses { need: usize, have: usize },
    #[error(transparent)]
    Dyn(#[from] DynError),
}

/// Which leads the network consumes and which one it predicts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LeadTimeSpec {
    /// Verification lead, in model steps.
    pub output_lead: usize,
    /// Input leads, in model steps, strictly increasing.
    pub input_leads: Vec<usize>,
}

impl LeadTimeSpec {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if !self.input_leads.windows(2).all(|w| w[0] < w[1]) {
            return Err(ForecastError::LeadsNotIncreasing);
        }
        for &l in self.input_leads.iter().chain([&self.output_lead]) {
            if l > MAX_LEAD_STEPS {
                return Err(ForecastError::LeadBeyondHorizon(l));
            }
        }
        Ok(())
    }

    /// Every lead that must be captured during integration.
    pub fn capture_leads(&self) -> Vec<usize> {
        let mut leads = self.input_leads.clone();
        if !leads.contains(&self.output_lead) {
            leads.push(self.output_lead);
        }
        leads.sort_unstable();
        leads
    }
}

/// One training/verification record.
#[derive(Debug, Clone)]
pub struct ForecastSample {
    /// Initialization time, in assimilation cycles.
    pub init_time_index: usize,
    /// Deterministic forecast states keyed by lead (model steps).
    pub det_states: BTreeMap<usize, StateVector>,
    /// Ensemble mean at the output lead, when the ensemble was integrated.
    pub ens_mean: Option<StateVector>,
    /// Per-variable ensemble sample variance at the output lead.
    pub ens_var: Option<Vec<f64>>,
    /// Analysis mean valid at the verification time.
    pub analysis_target: StateVector,
    /// Nature state at the verification time.
    pub truth: StateVector,
}

impl ForecastSample {
    /// Valid time of the prediction, in model steps.
    pub fn valid_time_steps(&self, obs_every: usize, output_lead: usize) -> usize {
        self.init_time_index * obs_every + output_lead
    }
}

/// Chronological, disjoint index ranges into the sample sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl DatasetSplit {
    /// Split the first `n` samples chronologically into the requested sizes,
    /// truncating the tail of the test range if samples run out.
    pub fn chronological(n: usize, train: usize, validation: usize, test: usize) -> Self {
        let t_end = train.min(n);
        let v_end = (t_end + validation).min(n);
        let s_end = (v_end + test).min(n);
        DatasetSplit { train: 0..t_end, validation: t_end..v_end, test: v_end..s_end }
    }
}

/// Single integration from the analysis mean, states captured at every
/// requested lead (including lead 0, which is the initial state itself).
pub fn run_deterministic_forecast<F>(
    analysis_mean: &StateVector,
    model: &ForecastModel<F>,
    leads: &[usize],
) -> Result<BTreeMap<usize, StateVector>, ForecastError>
where
    F: Fn(&StateVector) -> Result<StateVector, DynError> + Sync,
{
    let max_lead = leads.iter().copied().max().unwrap_or(0);
    if max_lead > MAX_LEAD_STEPS {
        return Err(ForecastError::LeadBeyondHorizon(max_lead));
    }
    let mut captured = BTreeMap::new();
    let mut x = analysis_mean.clone();
    if leads.contains(&0) {
        captured.insert(0, x.clone());
    }
    for step in 1..=max_lead {
        x = rk4_step(&x, model.dt, &model.tendency)?;
        if leads.contains(&step) {
            captured.insert(step, x.clone());
        }
    }
    Ok(captured)
}

/// Integrate every member and reduce to per-lead mean and N-1 sample variance.
pub fn run_ensemble_forecast<F>(
    analysis: &EnsembleState,
    model: &ForecastModel<F>,
    leads: &[usize],
) -> Result<(BTreeMap<usize, StateVector>, BTreeMap<usize, Vec<f64>>), ForecastError>
where
    F: Fn(&StateVector) -> Result<StateVector, DynError> + Sync,
{
    let member_states: Result<Vec<_>, ForecastError> = analysis
        .members
        .par_iter()
        .map(|m| run_deterministic_forecast(m, model, leads))
        .collect();
    let member_states = member_states?;

    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for &lead in leads {
        let at_lead: Vec<&StateVector> = member_states.iter().map(|m| &m[&lead]).collect();
        let ens = EnsembleState::new(at_lead.into_iter().cloned().collect());
        means.insert(lead, ens.mean());
        vars.insert(lead, ens.variance());
    }
    Ok((means, vars))
}

/// Build the full sample set for one scenario and lead spec.
///
/// `analyses` must be contiguous records in cycle order; `nature` must hold
/// the truth every `obs_every` model steps so that `nature.states[t]` is the
/// truth at cycle index `t`, aligned with `AnalysisRecord::time_index`.
pub fn build_dataset<F>(
    analyses: &[AnalysisRecord],
    nature: &Trajectory<StateVector>,
    model: &ForecastModel<F>,
    leads: &LeadTimeSpec,
    obs_every: usize,
    with_ensemble: bool,
) -> Result<Vec<ForecastSample>, ForecastError>
where
    F: Fn(&StateVector) -> Result<StateVector, DynError> + Sync,
{
    leads.validate()?;
    if leads.output_lead % obs_every != 0 {
        return Err(ForecastError::LeadNotCycleAligned {
            output: leads.output_lead,
            obs_every,
        });
    }
    let lead_cycles = leads.output_lead / obs_every;
    if analyses.len() <= lead_cycles {
        return Err(ForecastError::InsufficientAnalyses {
            need: lead_cycles + 1,
            have: analyses.len(),
        });
    }
    let n_samples = analyses.len() - lead_cycles;
    let capture = leads.capture_leads();

    let samples: Result<Vec<_>, ForecastError> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let init = &analyses[k];
            let det_states = run_deterministic_forecast(&init.mean, model, &capture)?;
            let (ens_mean, ens_var) = if with_ensemble {
                let (means, vars) =
                    run_ensemble_forecast(&init.ensemble, model, &[leads.output_lead])?;
                (Some(means[&leads.output_lead].clone()), Some(vars[&leads.output_lead].clone()))
            } else {
                (None, None)
            };
            let target_rec = &analyses[k + lead_cycles];
            let valid_cycle = init.time_index + lead_cycles;
            debug_assert_eq!(target_rec.time_index, valid_cycle);
            Ok(ForecastSample {
                init_time_index: init.time_index,
                det_states,
                ens_mean,
                ens_var,
                analysis_target: target_rec.mean.clone(),
                truth: nature.states[valid_cycle].clone(),
            })
        })
        .collect();
    samples
}

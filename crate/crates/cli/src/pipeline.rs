//! End-to-end experiment pipeline behind the CLI subcommands.
//!
//! Every command reads its inputs from and writes its artifacts into one
//! output directory, records SHA-256 hashes in a per-command manifest, and is
//! fully reproducible from the master seed.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use l96uq_core::assim::{
    generate_observations, initial_ensemble, run_assimilation_cycle, AnalysisRecord,
    EnsembleState, FilterConfig, ForecastModel, ObsNetwork,
};
use l96uq_core::dyncore::{
    advance, integrate, l96_tendency, l96_two_scale_tendency, surrogate_tendency, DynError,
    SingleScaleParams, StateVector, SurrogateParams, Trajectory, TwoScaleParams, TwoScaleState,
};
use l96uq_core::forecastgen::{build_dataset, DatasetSplit, ForecastSample, LeadTimeSpec};
use l96uq_core::neuralnet::{
    forward, hyperparameter_sweep, LossKind, MlpConfig, MlpParams, Normalization,
    OutputActivation, SupervisedSet, TrainConfig,
};
use l96uq_core::seed::{derive_u64, stream_rng};
use l96uq_core::verify::{evaluate as verify_evaluate, ScoredForecast};

use crate::arrayfile::ArrayFile;
use crate::config::{ExperimentConfig, Scenario, TargetMode};
use crate::manifest::Manifest;

use rand::Rng;

/// Spinup integration time (model time units) before the nature run starts.
const NATURE_SPINUP_UNITS: f64 = 100.0;

pub const NATURE_FILE: &str = "nature.l96a";
pub const SURROGATE_FIT_FILE: &str = "surrogate_fit.toml";
pub const ANALYSIS_MEAN_FILE: &str = "analysis_mean.l96a";
pub const ANALYSIS_SPREAD_FILE: &str = "analysis_spread.l96a";
pub const ANALYSIS_MEMBERS_FILE: &str = "analysis_members.l96a";
pub const ASSIM_META_FILE: &str = "assim_meta.toml";
pub const FORECAST_META_FILE: &str = "forecast_meta.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PIT_FILE: &str = "pit_counts.csv";
pub const LEADTIME_FILE: &str = "leadtime_rmse.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateFit {
    pub alpha: f64,
    pub beta: f64,
    /// Residual standard deviation of the linear closure fit.
    pub residual_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssimMeta {
    /// Cycle index of the first retained analysis.
    pub first_time_index: usize,
    pub n_analyses: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastMeta {
    pub output_lead: usize,
    pub input_leads: Vec<usize>,
    pub obs_every: usize,
    /// `init_time_index` of sample 0; samples are contiguous in cycles.
    pub first_init_index: usize,
    pub n_samples: usize,
    pub with_ensemble: bool,
}

/// Forecast-model tendency for the configured scenario.
///
/// In the imperfect-model setting the surrogate closure coefficients come
/// from the fit stored next to the nature run (falling back to the config
/// defaults when no fit exists).
pub fn forecast_tendency(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> anyhow::Result<Box<dyn Fn(&StateVector) -> Result<StateVector, DynError> + Sync + Send>> {
    match cfg.scenario {
        Scenario::Pms => {
            let p = SingleScaleParams::new(cfg.model.s, cfg.model.f_single);
            Ok(Box::new(move |x: &StateVector| l96_tendency(x, &p)))
        }
        Scenario::Ims => {
            let (alpha, beta) = if cfg.model.fit_surrogate {
                let fit: SurrogateFit = toml::from_str(
                    &std::fs::read_to_string(dir.join(SURROGATE_FIT_FILE))
                        .context("surrogate fit missing; run `nature` first")?,
                )?;
                (fit.alpha, fit.beta)
            } else {
                (cfg.model.surrogate_alpha, cfg.model.surrogate_beta)
            };
            let p = SurrogateParams {
                base: SingleScaleParams::new(cfg.model.s, cfg.model.f_two_scale),
                alpha,
                beta,
            };
            Ok(Box::new(move |x: &StateVector| surrogate_tendency(x, &p)))
        }
    }
}

/// Ordinary least squares y = a x + b over pooled points.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (a * x + b)).powi(2)).sum();
    (a, b, (rss / n).sqrt())
}

/// Generate and store the nature run: one slow-state row per assimilation
/// cycle (plus the initial condition). The imperfect-model nature is the
/// two-scale system; its subgrid coupling is also fitted here.
pub fn cmd_nature(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest::new("nature", cfg.master_seed, cfg.to_toml());
    let s = cfg.model.s;
    let cycles = cfg.assim.cycles;
    let obs_every = cfg.assim.obs_every;

    match cfg.scenario {
        Scenario::Pms => {
            let p = SingleScaleParams::new(s, cfg.model.f_single);
            let f = |x: &StateVector| l96_tendency(x, &p);
            let mut rng = stream_rng(cfg.master_seed, "nature-init", 0);
            let x0: StateVector =
                (0..s).map(|_| cfg.model.f_single + 0.1 * rng.gen::<f64>()).collect();
            let spinup_steps = (NATURE_SPINUP_UNITS / cfg.model.dt).round() as usize;
            let x0 = advance(&x0, cfg.model.dt, spinup_steps, &f)?;
            let traj = integrate(&x0, cfg.model.dt, cycles * obs_every, &f, obs_every)?;
            ArrayFile::from_rows(&traj.states)?.save(&dir.join(NATURE_FILE))?;
        }
        Scenario::Ims => {
            let p = TwoScaleParams::new(
                s,
                cfg.model.j_per_x,
                cfg.model.f_two_scale,
                cfg.model.h,
                cfg.model.c,
                cfg.model.b,
            );
            let f = |x: &TwoScaleState| l96_two_scale_tendency(x, &p);
            let mut rng = stream_rng(cfg.master_seed, "nature-init", 0);
            let x0 = TwoScaleState {
                slow: (0..s).map(|_| cfg.model.f_two_scale + 0.1 * rng.gen::<f64>()).collect(),
                fast: (0..p.fast_len()).map(|_| 0.01 * rng.gen::<f64>()).collect(),
            };
            let dtn = cfg.model.dt_nature;
            let substeps = (cfg.model.dt / dtn).round() as usize;
            let spinup_steps = (NATURE_SPINUP_UNITS / dtn).round() as usize;
            let x0 = advance(&x0, dtn, spinup_steps, &f)?;
            let traj =
                integrate(&x0, dtn, cycles * obs_every * substeps, &f, obs_every * substeps)?;

            let slow_rows: Vec<StateVector> =
                traj.states.iter().map(|st| st.slow.clone()).collect();
            ArrayFile::from_rows(&slow_rows)?.save(&dir.join(NATURE_FILE))?;

            // Fit the linear closure G(x) = alpha x + beta against the true
            // subgrid coupling -(h c / b) sum_j y_j, pooled over time and
            // grid point.
            let coupling_scale = -cfg.model.h * cfg.model.c / cfg.model.b;
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for st in &traj.states {
                for i in 0..s {
                    let block = &st.fast[i * cfg.model.j_per_x..(i + 1) * cfg.model.j_per_x];
                    xs.push(st.slow[i]);
                    ys.push(coupling_scale * block.iter().sum::<f64>());
                }
            }
            let (alpha, beta, residual_std) = linear_fit(&xs, &ys);
            let fit = SurrogateFit { alpha, beta, residual_std };
            std::fs::write(dir.join(SURROGATE_FIT_FILE), toml::to_string_pretty(&fit)?)?;
            manifest.record(dir, SURROGATE_FIT_FILE)?;
        }
    }

    manifest.record(dir, NATURE_FILE)?;
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    manifest.save(dir)?;
    Ok(())
}

fn load_nature(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<Trajectory<StateVector>> {
    let arr = ArrayFile::load(&dir.join(NATURE_FILE)).context("nature run missing")?;
    Ok(Trajectory {
        t0: 0.0,
        dt: cfg.model.dt * cfg.assim.obs_every as f64,
        states: arr.rows(),
    })
}

/// Observe the nature run, cycle the ensemble filter over it, and store the
/// post-spinup analyses.
pub fn cmd_assimilate(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = Manifest::new("assimilate", cfg.master_seed, cfg.to_toml());
    let nature = load_nature(cfg, dir)?;
    let net = ObsNetwork { obs_every_steps: cfg.assim.obs_every, sigma_r: cfg.assim.sigma_r };
    let obs = generate_observations(
        &nature,
        &net,
        cfg.assim.obs_every,
        derive_u64(cfg.master_seed, "obs", 0),
    )?;

    let tendency = forecast_tendency(cfg, dir)?;
    let model = ForecastModel { tendency, dt: cfg.model.dt };
    let initial = initial_ensemble(
        &nature.states[0],
        cfg.assim.n_members,
        derive_u64(cfg.master_seed, "init-ens", 0),
    );
    let filter = FilterConfig {
        inflation: cfg.assim.inflation,
        localization_radius: cfg.assim.localization_radius,
    };
    let analyses = run_assimilation_cycle(&model, &obs, initial, &net, &filter)?;
    let kept = &analyses[cfg.assim.spinup_cycles.min(analyses.len())..];
    anyhow::ensure!(!kept.is_empty(), "spinup discarded every analysis");

    let mean_rows: Vec<StateVector> = kept.iter().map(|a| a.mean.clone()).collect();
    let spread_rows: Vec<StateVector> = kept.iter().map(|a| a.spread.clone()).collect();
    ArrayFile::from_rows(&mean_rows)?.save(&dir.join(ANALYSIS_MEAN_FILE))?;
    ArrayFile::from_rows(&spread_rows)?.save(&dir.join(ANALYSIS_SPREAD_FILE))?;

    let n = kept.len() as u64;
    let members = cfg.assim.n_members as u64;
    let s = cfg.model.s as u64;
    let mut flat = Vec::with_capacity((n * members * s) as usize);
    for rec in kept {
        for m in &rec.ensemble.members {
            flat.extend_from_slice(m);
        }
    }
    ArrayFile::new(vec![n, members, s], flat)?.save(&dir.join(ANALYSIS_MEMBERS_FILE))?;

    let meta = AssimMeta { first_time_index: kept[0].time_index, n_analyses: kept.len() };
    std::fs::write(dir.join(ASSIM_META_FILE), toml::to_string_pretty(&meta)?)?;

    for name in [ANALYSIS_MEAN_FILE, ANALYSIS_SPREAD_FILE, ANALYSIS_MEMBERS_FILE, ASSIM_META_FILE]
    {
        manifest.record(dir, name)?;
    }
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    manifest.save(dir)?;
    Ok(())
}

fn load_analyses(dir: &Path) -> anyhow::Result<(Vec<AnalysisRecord>, AssimMeta)> {
    let meta: AssimMeta =
        toml::from_str(&std::fs::read_to_string(dir.join(ASSIM_META_FILE))
            .context("assimilation output missing; run `assimilate` first")?)?;
    let means = ArrayFile::load(&dir.join(ANALYSIS_MEAN_FILE))?.rows();
    let spreads = ArrayFile::load(&dir.join(ANALYSIS_SPREAD_FILE))?.rows();
    let members = ArrayFile::load(&dir.join(ANALYSIS_MEMBERS_FILE))?;
    anyhow::ensure!(members.dims.len() == 3, "member array must be rank 3");
    let (n, n_mem, s) =
        (members.dims[0] as usize, members.dims[1] as usize, members.dims[2] as usize);
    anyhow::ensure!(n == means.len() && n == meta.n_analyses, "artifact shapes disagree");

    let mut records = Vec::with_capacity(n);
    for k in 0..n {
        let mut mv = Vec::with_capacity(n_mem);
        for m in 0..n_mem {
            let start = (k * n_mem + m) * s;
            mv.push(members.data[start..start + s].to_vec());
        }
        records.push(AnalysisRecord {
            time_index: meta.first_time_index + k,
            ensemble: EnsembleState::new(mv),
            mean: means[k].clone(),
            spread: spreads[k].clone(),
        });
    }
    Ok((records, meta))
}

fn det_file(lead: usize) -> String {
    format!("forecast_det_lead{lead:04}.l96a")
}

/// Integrate deterministic (and optionally ensemble) forecasts from every
/// analysis and store the verification-aligned dataset.
pub fn cmd_forecast(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = Manifest::new("forecast", cfg.master_seed, cfg.to_toml());
    let nature = load_nature(cfg, dir)?;
    let (analyses, _) = load_analyses(dir)?;
    let tendency = forecast_tendency(cfg, dir)?;
    let model = ForecastModel { tendency, dt: cfg.model.dt };
    let leads = LeadTimeSpec {
        output_lead: cfg.forecast.output_lead,
        input_leads: cfg.forecast.input_leads.clone(),
    };
    let samples = build_dataset(
        &analyses,
        &nature,
        &model,
        &leads,
        cfg.assim.obs_every,
        cfg.forecast.with_ensemble,
    )?;

    let mut files = Vec::new();
    for &lead in &leads.capture_leads() {
        let rows: Vec<StateVector> =
            samples.iter().map(|smp| smp.det_states[&lead].clone()).collect();
        let name = det_file(lead);
        ArrayFile::from_rows(&rows)?.save(&dir.join(&name))?;
        files.push(name);
    }
    let targets: Vec<StateVector> = samples.iter().map(|s| s.analysis_target.clone()).collect();
    let truths: Vec<StateVector> = samples.iter().map(|s| s.truth.clone()).collect();
    ArrayFile::from_rows(&targets)?.save(&dir.join("forecast_target.l96a"))?;
    ArrayFile::from_rows(&truths)?.save(&dir.join("forecast_truth.l96a"))?;
    files.push("forecast_target.l96a".into());
    files.push("forecast_truth.l96a".into());

    if cfg.forecast.with_ensemble {
        let em: Vec<StateVector> =
            samples.iter().map(|s| s.ens_mean.clone().expect("ensemble requested")).collect();
        let ev: Vec<Vec<f64>> =
            samples.iter().map(|s| s.ens_var.clone().expect("ensemble requested")).collect();
        ArrayFile::from_rows(&em)?.save(&dir.join("forecast_ens_mean.l96a"))?;
        ArrayFile::from_rows(&ev)?.save(&dir.join("forecast_ens_var.l96a"))?;
        files.push("forecast_ens_mean.l96a".into());
        files.push("forecast_ens_var.l96a".into());
    }

    let meta = ForecastMeta {
        output_lead: leads.output_lead,
        input_leads: leads.input_leads.clone(),
        obs_every: cfg.assim.obs_every,
        first_init_index: samples[0].init_time_index,
        n_samples: samples.len(),
        with_ensemble: cfg.forecast.with_ensemble,
    };
    std::fs::write(dir.join(FORECAST_META_FILE), toml::to_string_pretty(&meta)?)?;
    files.push(FORECAST_META_FILE.into());

    for f in &files {
        manifest.record(dir, f)?;
    }
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    manifest.save(dir)?;
    Ok(())
}

/// In-memory view of the stored forecast dataset.
pub struct Dataset {
    pub meta: ForecastMeta,
    /// Concatenated deterministic states at the input leads, per sample.
    pub inputs: Vec<Vec<f64>>,
    /// Deterministic state at the output lead, per sample.
    pub det_out: Vec<StateVector>,
    pub ens_mean: Option<Vec<StateVector>>,
    pub ens_var: Option<Vec<Vec<f64>>>,
    pub target: Vec<StateVector>,
    pub truth: Vec<StateVector>,
}

pub fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    let meta: ForecastMeta =
        toml::from_str(&std::fs::read_to_string(dir.join(FORECAST_META_FILE))
            .context("forecast dataset missing; run `forecast` first")?)?;
    let mut per_lead = BTreeMap::new();
    let mut capture = meta.input_leads.clone();
    if !capture.contains(&meta.output_lead) {
        capture.push(meta.output_lead);
    }
    capture.sort_unstable();
    for &lead in &capture {
        per_lead.insert(lead, ArrayFile::load(&dir.join(det_file(lead)))?.rows());
    }
    let n = meta.n_samples;
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            meta.input_leads
                .iter()
                .flat_map(|lead| per_lead[lead][k].iter().copied())
                .collect()
        })
        .collect();
    let det_out = per_lead[&meta.output_lead].clone();
    let target = ArrayFile::load(&dir.join("forecast_target.l96a"))?.rows();
    let truth = ArrayFile::load(&dir.join("forecast_truth.l96a"))?.rows();
    let (ens_mean, ens_var) = if meta.with_ensemble {
        (
            Some(ArrayFile::load(&dir.join("forecast_ens_mean.l96a"))?.rows()),
            Some(ArrayFile::load(&dir.join("forecast_ens_var.l96a"))?.rows()),
        )
    } else {
        (None, None)
    };
    Ok(Dataset { meta, inputs, det_out, ens_mean, ens_var, target, truth })
}

/// Variance-loss variants trained by `train` / scored by `evaluate`.
pub const VAR_SYSTEMS: [(&str, LossKind); 3] =
    [("nn-mse", LossKind::MseVar), ("nn-ext", LossKind::Emse), ("nn-lik", LossKind::Lik)];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub layer_sizes: Vec<usize>,
    pub output_activation: OutputActivation,
    pub loss: String,
    pub lr: f64,
    pub wd: f64,
    pub best_val_loss: f64,
    pub normalization: Normalization,
}

fn save_model(
    dir: &Path,
    stem: &str,
    params: &MlpParams,
    meta: &ModelMeta,
) -> anyhow::Result<(String, String)> {
    let bin = format!("{stem}.l96a");
    let txt = format!("{stem}.toml");
    let flat = params.flatten();
    ArrayFile::new(vec![flat.len() as u64], flat)?.save(&dir.join(&bin))?;
    std::fs::write(dir.join(&txt), toml::to_string_pretty(meta)?)?;
    Ok((bin, txt))
}

pub fn load_model(dir: &Path, stem: &str) -> anyhow::Result<(MlpParams, MlpConfig, ModelMeta)> {
    let meta: ModelMeta =
        toml::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.toml")))
            .with_context(|| format!("model {stem} missing; run `train` first"))?)?;
    let cfg = MlpConfig::new(meta.layer_sizes.clone(), meta.output_activation);
    let flat = ArrayFile::load(&dir.join(format!("{stem}.l96a")))?;
    let mut params = MlpParams::init(&cfg, 0);
    params.unflatten_into(&flat.data);
    Ok((params, cfg, meta))
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.train.batch_size,
        eval_every_epochs: cfg.train.eval_every_epochs,
        patience: cfg.train.patience,
        max_epochs: cfg.train.max_epochs,
        seed,
        lr_grid: cfg.train.lr_grid.clone(),
        wd_grid: cfg.train.wd_grid.clone(),
        repeats: cfg.train.repeats,
        hidden: cfg.train.hidden.clone(),
    }
}

fn subset(rows: &[Vec<f64>], range: &std::ops::Range<usize>) -> Vec<Vec<f64>> {
    rows[range.clone()].to_vec()
}

/// Two-stage training: hyperparameter-swept mean network, then one variance
/// network per loss variant with the mean network frozen.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = Manifest::new("train", cfg.master_seed, cfg.to_toml());
    let ds = load_dataset(dir)?;
    let split = DatasetSplit::chronological(
        ds.meta.n_samples,
        cfg.split.train,
        cfg.split.validation,
        cfg.split.test,
    );
    anyhow::ensure!(
        !split.train.is_empty() && !split.validation.is_empty() && !split.test.is_empty(),
        "dataset too small for the requested split"
    );

    let targets: &[Vec<f64>] = match cfg.train.target {
        TargetMode::Analysis => &ds.target,
        TargetMode::Truth => &ds.truth,
    };
    // The mean network regresses the systematic component of the forecast
    // error: its target is the correction (target - deterministic forecast at
    // the output lead), and the corrected forecast is reassembled as
    // deterministic forecast + denormalized network output. Variance targets
    // and proxies live in the same (squared) normalized correction units.
    let residuals: Vec<Vec<f64>> = targets
        .iter()
        .zip(&ds.det_out)
        .map(|(t, d)| t.iter().zip(d).map(|(a, b)| a - b).collect())
        .collect();
    let norm =
        Normalization::fit(&subset(&ds.inputs, &split.train), &subset(&residuals, &split.train));
    let norm_inputs: Vec<Vec<f64>> = ds.inputs.iter().map(|r| norm.normalize_input(r)).collect();
    let norm_targets: Vec<Vec<f64>> =
        residuals.iter().map(|r| norm.normalize_target(r)).collect();

    let in_dim = ds.inputs[0].len();
    let out_dim = targets[0].len();
    let mut mean_sizes = vec![in_dim];
    mean_sizes.extend_from_slice(&cfg.train.hidden);
    mean_sizes.push(out_dim);
    let mean_cfg = MlpConfig::new(mean_sizes.clone(), OutputActivation::Linear);

    let mean_train = SupervisedSet {
        inputs: subset(&norm_inputs, &split.train),
        aux: subset(&norm_targets, &split.train),
    };
    let mean_val = SupervisedSet {
        inputs: subset(&norm_inputs, &split.validation),
        aux: subset(&norm_targets, &split.validation),
    };
    let tc = train_config(cfg, derive_u64(cfg.master_seed, "train-mean", 0));
    let mean_sweep = hyperparameter_sweep(&mean_train, &mean_val, &mean_cfg, LossKind::MseMean, &tc)?;

    let mut log = csv::Writer::from_path(dir.join("train_log.csv"))?;
    log.write_record(["network", "lr", "wd", "repeat", "val_loss", "epochs"])?;
    let mut log_runs = |name: &str, runs: &[l96uq_core::neuralnet::SweepRunLog]| -> anyhow::Result<()> {
        for r in runs {
            log.write_record([
                name.to_string(),
                format!("{:e}", r.lr),
                format!("{:e}", r.wd),
                r.repeat.to_string(),
                r.val_loss.map_or("diverged".into(), |v| format!("{v:.6e}")),
                r.epochs_run.to_string(),
            ])?;
        }
        Ok(())
    };
    log_runs("mean", &mean_sweep.runs)?;

    let mean_meta = ModelMeta {
        layer_sizes: mean_sizes,
        output_activation: OutputActivation::Linear,
        loss: "mse-mean".into(),
        lr: mean_sweep.lr,
        wd: mean_sweep.wd,
        best_val_loss: mean_sweep.outcome.best_val_loss,
        normalization: norm.clone(),
    };
    let (bin, txt) = save_model(dir, "model_mean", &mean_sweep.outcome.params, &mean_meta)?;
    let mut artifacts = vec![bin, txt];

    // Frozen-mean error proxy in normalized correction units, for the
    // variance stage: (corrected forecast - target) is the same difference in
    // normalized space as (network output - normalized correction target).
    let eps: Vec<Vec<f64>> = norm_inputs
        .iter()
        .zip(&norm_targets)
        .map(|(x, t)| {
            let y = forward(&mean_sweep.outcome.params, &mean_cfg, x)?;
            Ok(y.iter().zip(t).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_, l96uq_core::neuralnet::NnError>>()?;

    let norm_ens_var: Option<Vec<Vec<f64>>> = ds
        .ens_var
        .as_ref()
        .map(|rows| rows.iter().map(|r| norm.normalize_variance(r)).collect());

    let mut var_sizes = vec![in_dim];
    var_sizes.extend_from_slice(&cfg.train.hidden);
    var_sizes.push(out_dim);
    let var_cfg = MlpConfig::new(var_sizes.clone(), OutputActivation::Softplus);

    for (idx, (name, kind)) in VAR_SYSTEMS.iter().enumerate() {
        let aux: &[Vec<f64>] = match kind {
            LossKind::MseVar => match &norm_ens_var {
                Some(v) => v,
                None => {
                    // no ensemble variance stored: this variant cannot train
                    continue;
                }
            },
            _ => &eps,
        };
        let train_set = SupervisedSet {
            inputs: subset(&norm_inputs, &split.train),
            aux: subset(aux, &split.train),
        };
        let val_set = SupervisedSet {
            inputs: subset(&norm_inputs, &split.validation),
            aux: subset(aux, &split.validation),
        };
        let tc = train_config(cfg, derive_u64(cfg.master_seed, "train-var", idx as u64));
        let sweep = hyperparameter_sweep(&train_set, &val_set, &var_cfg, *kind, &tc)?;
        log_runs(name, &sweep.runs)?;
        let meta = ModelMeta {
            layer_sizes: var_sizes.clone(),
            output_activation: OutputActivation::Softplus,
            loss: name.to_string(),
            lr: sweep.lr,
            wd: sweep.wd,
            best_val_loss: sweep.outcome.best_val_loss,
            normalization: norm.clone(),
        };
        let (bin, txt) =
            save_model(dir, &format!("model_var_{}", name.replace('-', "_")), &sweep.outcome.params, &meta)?;
        artifacts.push(bin);
        artifacts.push(txt);
    }
    log.flush()?;
    artifacts.push("train_log.csv".into());

    for a in &artifacts {
        manifest.record(dir, a)?;
    }
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    manifest.save(dir)?;
    Ok(())
}

fn scored(
    ds: &Dataset,
    range: &std::ops::Range<usize>,
    preds: &[Vec<f64>],
    sigmas: &[Vec<f64>],
) -> Vec<ScoredForecast> {
    range
        .clone()
        .map(|k| {
            let init = ds.meta.first_init_index + k;
            ScoredForecast {
                valid_time_steps: init * ds.meta.obs_every + ds.meta.output_lead,
                errors: preds[k].iter().zip(&ds.truth[k]).map(|(p, t)| p - t).collect(),
                sigmas: sigmas[k].clone(),
            }
        })
        .collect()
}

/// Score every available forecast system on the test split and write the
/// metric table, PIT histograms, and pooled sigma / |error| dumps.
pub fn cmd_evaluate(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = Manifest::new("evaluate", cfg.master_seed, cfg.to_toml());
    let ds = load_dataset(dir)?;
    let split = DatasetSplit::chronological(
        ds.meta.n_samples,
        cfg.split.train,
        cfg.split.validation,
        cfg.split.test,
    );
    let n = ds.meta.n_samples;
    let s = ds.truth[0].len();

    // system name -> (predictions, sigmas, sigma varies with the flow)
    let mut systems: Vec<(String, Vec<Vec<f64>>, Vec<Vec<f64>>, bool)> = Vec::new();

    // deterministic baseline: static per-variable sigma fitted on the train
    // split as the std of (deterministic forecast - analysis)
    {
        let mut acc = vec![0.0; s];
        let mut mean_err = vec![0.0; s];
        let nt = split.train.len() as f64;
        for k in split.train.clone() {
            for i in 0..s {
                mean_err[i] += (ds.det_out[k][i] - ds.target[k][i]) / nt;
            }
        }
        for k in split.train.clone() {
            for i in 0..s {
                let d = ds.det_out[k][i] - ds.target[k][i] - mean_err[i];
                acc[i] += d * d;
            }
        }
        let sigma: Vec<f64> = acc.iter().map(|a| (a / (nt - 1.0)).sqrt()).collect();
        let sigmas = vec![sigma; n];
        systems.push(("det".into(), ds.det_out.clone(), sigmas, false));
    }

    if let (Some(em), Some(ev)) = (&ds.ens_mean, &ds.ens_var) {
        let sigmas: Vec<Vec<f64>> =
            ev.iter().map(|r| r.iter().map(|v| v.max(0.0).sqrt()).collect()).collect();
        systems.push(("ens".into(), em.clone(), sigmas, true));
    }

    if let Ok((mean_params, mean_cfg, mean_meta)) = load_model(dir, "model_mean") {
        let norm = &mean_meta.normalization;
        let norm_inputs: Vec<Vec<f64>> =
            ds.inputs.iter().map(|r| norm.normalize_input(r)).collect();
        // corrected forecast = deterministic forecast + learned correction
        let nn_mean: Vec<Vec<f64>> = norm_inputs
            .iter()
            .zip(&ds.det_out)
            .map(|(x, d)| {
                let corr = norm.denormalize_target(&forward(&mean_params, &mean_cfg, x)?);
                Ok(d.iter().zip(&corr).map(|(a, b)| a + b).collect())
            })
            .collect::<Result<_, l96uq_core::neuralnet::NnError>>()?;

        for (name, _) in VAR_SYSTEMS {
            let stem = format!("model_var_{}", name.replace('-', "_"));
            let Ok((var_params, var_cfg, _)) = load_model(dir, &stem) else { continue };
            let sigmas: Vec<Vec<f64>> = norm_inputs
                .iter()
                .map(|x| {
                    let v = forward(&var_params, &var_cfg, x)?;
                    Ok(norm.denormalize_variance(&v).iter().map(|v| v.sqrt()).collect())
                })
                .collect::<Result<_, l96uq_core::neuralnet::NnError>>()?;
            systems.push((name.to_string(), nn_mean.clone(), sigmas, true));
        }
    }

    let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    metrics.write_record([
        "system",
        "lead_steps",
        "rmse",
        "rmse_lo",
        "rmse_hi",
        "coverage90",
        "coverage90_lo",
        "coverage90_hi",
        "sigma_abs_error_corr",
        "chi2_flatness",
    ])?;
    let mut pit = csv::Writer::from_path(dir.join(PIT_FILE))?;
    pit.write_record(["system", "bin", "count"])?;
    let mut artifacts = vec![METRICS_FILE.to_string(), PIT_FILE.to_string()];

    for (name, preds, sigmas, flow_dependent) in &systems {
        let samples = scored(&ds, &split.test, preds, sigmas);
        let report =
            verify_evaluate(&samples, 10, derive_u64(cfg.master_seed, "bootstrap", 0))?;
        metrics.write_record([
            name.clone(),
            ds.meta.output_lead.to_string(),
            format!("{:.6}", report.rmse.value),
            format!("{:.6}", report.rmse.lower),
            format!("{:.6}", report.rmse.upper),
            format!("{:.6}", report.coverage_90.value),
            format!("{:.6}", report.coverage_90.lower),
            format!("{:.6}", report.coverage_90.upper),
            if *flow_dependent {
                report
                    .sigma_error_correlation
                    .map_or("not-applicable".into(), |c| format!("{c:.6}"))
            } else {
                // static sigma: correlation with the flow is undefined
                "not-applicable".into()
            },
            format!("{:.6}", report.chi2_flatness),
        ])?;
        for (b, c) in report.pit_counts.iter().enumerate() {
            pit.write_record([name.clone(), b.to_string(), c.to_string()])?;
        }

        // pooled (sigma, |error|) pairs for scatter diagnostics
        let mut pooled = Vec::new();
        for smp in &samples {
            for (sg, e) in smp.sigmas.iter().zip(&smp.errors) {
                pooled.push(*sg);
                pooled.push(e.abs());
            }
        }
        let dump = format!("sigma_abs_error_{}.l96a", name.replace('-', "_"));
        ArrayFile::new(vec![(pooled.len() / 2) as u64, 2], pooled)?.save(&dir.join(&dump))?;
        artifacts.push(dump);
    }
    metrics.flush()?;
    pit.flush()?;

    for a in &artifacts {
        manifest.record(dir, a)?;
    }
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    manifest.save(dir)?;
    Ok(())
}

/// Time-mean RMSE of the stored analysis means against the nature run.
pub fn analysis_rmse(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<f64> {
    let nature = load_nature(cfg, dir)?;
    let (analyses, _) = load_analyses(dir)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for rec in &analyses {
        let truth = nature
            .states
            .get(rec.time_index)
            .ok_or_else(|| anyhow::anyhow!("analysis beyond the nature run"))?;
        for (a, t) in rec.mean.iter().zip(truth) {
            acc += (a - t) * (a - t);
            n += 1;
        }
    }
    Ok((acc / n as f64).sqrt())
}

/// Pooled deterministic-forecast RMSE against truth at each requested lead
/// (model steps), over every post-spinup initialization.
pub fn det_rmse_at_leads(
    cfg: &ExperimentConfig,
    dir: &Path,
    leads: &[usize],
) -> anyhow::Result<Vec<f64>> {
    let nature = load_nature(cfg, dir)?;
    let (analyses, _) = load_analyses(dir)?;
    let tendency = forecast_tendency(cfg, dir)?;
    let model = ForecastModel { tendency, dt: cfg.model.dt };
    let mut out = Vec::with_capacity(leads.len());
    for &lead in leads {
        let spec = LeadTimeSpec { output_lead: lead, input_leads: vec![lead] };
        let samples =
            build_dataset(&analyses, &nature, &model, &spec, cfg.assim.obs_every, false)?;
        out.push(pooled_rmse(&samples, |s| s.det_states[&lead].clone()));
    }
    Ok(out)
}

/// The family of input-lead stacks tried at each output lead: combinations of
/// the analysis time (0), the halfway point, and the output lead itself, so
/// the study can compare stacks that reach back early against stacks built
/// only from late states.
pub fn leadtime_input_configs(lead: usize, obs_every: usize) -> Vec<Vec<usize>> {
    let half = (lead / 2 / obs_every) * obs_every;
    let raw: Vec<Vec<usize>> = vec![
        vec![0],
        vec![0, half],
        vec![0, lead],
        vec![0, half, lead],
        vec![half],
        vec![half, lead],
        vec![lead],
    ];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for mut c in raw {
        c.dedup();
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Deterministic-forecast RMSE (against truth, test split) per output lead,
/// plus the mean network retrained for each input-lead stack in
/// [`leadtime_input_configs`]. One CSV row per (lead, stack).
pub fn cmd_leadtime_study(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = Manifest::new("leadtime-study", cfg.master_seed, cfg.to_toml());
    let nature = load_nature(cfg, dir)?;
    let (analyses, _) = load_analyses(dir)?;
    let tendency = forecast_tendency(cfg, dir)?;
    let model = ForecastModel { tendency, dt: cfg.model.dt };

    let mut out = csv::Writer::from_path(dir.join(LEADTIME_FILE))?;
    out.write_record(["lead_steps", "input_leads", "det_rmse", "nn_mean_rmse"])?;

    let mut run_index = 0u64;
    for &lead in &cfg.leadtime.output_leads {
        anyhow::ensure!(
            lead % cfg.assim.obs_every == 0,
            "lead {lead} is not a whole number of observation intervals"
        );
        let configs = leadtime_input_configs(lead, cfg.assim.obs_every);
        // one dataset capturing the union of all stacks for this lead
        let mut capture: Vec<usize> = configs.iter().flatten().copied().collect();
        capture.sort_unstable();
        capture.dedup();
        let spec = LeadTimeSpec { output_lead: lead, input_leads: capture };
        let samples =
            build_dataset(&analyses, &nature, &model, &spec, cfg.assim.obs_every, false)?;
        let split = DatasetSplit::chronological(
            samples.len(),
            cfg.split.train,
            cfg.split.validation,
            cfg.split.test,
        );
        anyhow::ensure!(
            !split.test.is_empty(),
            "lead {lead} leaves no test samples; reduce the split sizes"
        );

        let det_rmse = pooled_rmse(&samples[split.test.clone()], |s| {
            s.det_states[&lead].clone()
        });

        for input_leads in &configs {
            let inputs: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| {
                    input_leads.iter().flat_map(|l| s.det_states[l].iter().copied()).collect()
                })
                .collect();
            // correction targets, as in `cmd_train`
            let targets: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| {
                    let t = match cfg.train.target {
                        TargetMode::Analysis => &s.analysis_target,
                        TargetMode::Truth => &s.truth,
                    };
                    t.iter().zip(&s.det_states[&lead]).map(|(a, b)| a - b).collect()
                })
                .collect();
            let norm = Normalization::fit(
                &subset(&inputs, &split.train),
                &subset(&targets, &split.train),
            );
            let ni: Vec<Vec<f64>> = inputs.iter().map(|r| norm.normalize_input(r)).collect();
            let nt: Vec<Vec<f64>> = targets.iter().map(|r| norm.normalize_target(r)).collect();
            let mut sizes = vec![ni[0].len()];
            sizes.extend_from_slice(&cfg.train.hidden);
            sizes.push(nt[0].len());
            let net_cfg = MlpConfig::new(sizes, OutputActivation::Linear);
            let train_set = SupervisedSet {
                inputs: subset(&ni, &split.train),
                aux: subset(&nt, &split.train),
            };
            let val_set = SupervisedSet {
                inputs: subset(&ni, &split.validation),
                aux: subset(&nt, &split.validation),
            };
            let tc = train_config(cfg, derive_u64(cfg.master_seed, "leadtime", run_index));
            run_index += 1;
            let sweep =
                hyperparameter_sweep(&train_set, &val_set, &net_cfg, LossKind::MseMean, &tc)?;

            let nn_rmse = {
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for k in split.test.clone() {
                    let corr = norm
                        .denormalize_target(&forward(&sweep.outcome.params, &net_cfg, &ni[k])?);
                    let det = &samples[k].det_states[&lead];
                    for ((c, d), t) in corr.iter().zip(det).zip(&samples[k].truth) {
                        let p = d + c;
                        acc += (p - t) * (p - t);
                        cnt += 1;
                    }
                }
                (acc / cnt as f64).sqrt()
            };

            let stack =
                input_leads.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";");
            out.write_record([
                lead.to_string(),
                stack,
                format!("{det_rmse:.6}"),
                format!("{nn_rmse:.6}"),
            ])?;
        }
    }
    out.flush()?;
    manifest.record(dir, LEADTIME_FILE)?;
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    manifest.save(dir)?;
    Ok(())
}

fn pooled_rmse<F>(samples: &[ForecastSample], pred: F) -> f64
where
    F: Fn(&ForecastSample) -> StateVector,
{
    let mut acc = 0.0;
    let mut n = 0usize;
    for s in samples {
        for (p, t) in pred(s).iter().zip(&s.truth) {
            acc += (p - t) * (p - t);
            n += 1;
        }
    }
    (acc / n as f64).sqrt()
}

/// Fast self-checks of the numerical building blocks; returns a short report
/// line per check. Fails loudly if any check does not hold.
pub fn verify_install() -> anyhow::Result<Vec<String>> {
    let mut report = Vec::new();

    // integrator order on dx/dt = -x
    let f = |s: &Vec<f64>| Ok(vec![-s[0]]);
    let err = |n: usize| {
        let got = advance(&vec![1.0], 1.0 / n as f64, n, &f).unwrap()[0];
        (got - (-1.0f64).exp()).abs()
    };
    let ratio = err(40) / err(80);
    anyhow::ensure!((14.0..=18.0).contains(&ratio), "integrator order check failed: {ratio}");
    report.push(format!("integrator: 4th-order convergence ratio {ratio:.2}"));

    // chaotic trajectory stays bounded
    let p = SingleScaleParams::new(8, 8.0);
    let g = |x: &StateVector| l96_tendency(x, &p);
    let mut x0 = vec![8.0; 8];
    x0[0] += 0.01;
    let xt = advance(&x0, 0.0125, 8000, &g)?;
    anyhow::ensure!(xt.iter().all(|v| v.abs() < 100.0), "trajectory unbounded");
    report.push("dynamics: 100-unit chaotic run bounded".into());

    // array container round trip
    let arr = ArrayFile::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?;
    let mut buf = Vec::new();
    arr.write(&mut buf)?;
    anyhow::ensure!(ArrayFile::read(&mut buf.as_slice())? == arr, "array round trip failed");
    report.push("arrayfile: round trip bit-exact".into());

    // analytic gradient vs finite difference on a small net
    let cfg = MlpConfig::new(vec![2, 4, 1], OutputActivation::Linear);
    let net = MlpParams::init(&cfg, 1);
    let x = vec![0.3, -0.7];
    let t = vec![0.2];
    let (grads, _) =
        l96uq_core::neuralnet::backward(&net, &cfg, &[&x], &[&t], LossKind::MseMean)?;
    let flat = net.flatten();
    let ag = grads.flatten();
    let mut probe = net.clone();
    let h = 1e-6;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        probe.unflatten_into(&plus);
        let lp = l96uq_core::neuralnet::loss_mse_mean(&forward(&probe, &cfg, &x)?, &t);
        let mut minus = flat.clone();
        minus[i] -= h;
        probe.unflatten_into(&minus);
        let lm = l96uq_core::neuralnet::loss_mse_mean(&forward(&probe, &cfg, &x)?, &t);
        let fd = (lp - lm) / (2.0 * h);
        anyhow::ensure!((ag[i] - fd).abs() < 1e-6, "gradient check failed at {i}");
    }
    report.push("network: analytic gradients match finite differences".into());

    Ok(report)
}

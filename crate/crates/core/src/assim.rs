//! Synthetic observations and the ensemble transform Kalman filter.
//!
//! The filter is the deterministic square-root ETKF computed in ensemble
//! space, with optional Gaspari-Cohn localization applied per grid point.
//! The observation operator is the identity over all slow variables.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dyncore::{advance, DynError, StateVector, Trajectory};
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum AssimError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("nature stride {stride} does not align with obs_every_steps {obs_every}")]
    MisalignedStride { stride: usize, obs_every: usize },
    #[error("singular ensemble-space matrix in ETKF update")]
    Singular,
    #[error("filter divergence: analysis RMSE vs observations above 5*sigma_r for {0} consecutive cycles")]
    Divergence(usize),
    #[error(transparent)]
    Dyn(#[from] DynError),
}

/// Observation network: identity operator over all slow variables.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObsNetwork {
    /// Model steps between observations.
    pub obs_every_steps: usize,
    /// Observation error standard deviation.
    pub sigma_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    /// Assimilation cycle index (cycle 0 is the unobserved initial time).
    pub time_index: usize,
    pub values: Vec<f64>,
}

/// N member states plus derived sample statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub members: Vec<StateVector>,
}

impl EnsembleState {
    pub fn new(members: Vec<StateVector>) -> Self {
        assert!(members.len() >= 2, "ensemble needs at least two members");
        let dim = members[0].len();
        assert!(members.iter().all(|m| m.len() == dim));
        Self { members }
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn mean(&self) -> StateVector {
        let n = self.n() as f64;
        let mut m = vec![0.0; self.dim()];
        for member in &self.members {
            for (acc, v) in m.iter_mut().zip(member) {
                *acc += v / n;
            }
        }
        m
    }

    /// Per-variable sample variance with the N-1 denominator.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let denom = (self.n() - 1) as f64;
        let mut var = vec![0.0; self.dim()];
        for member in &self.members {
            for ((acc, v), m) in var.iter_mut().zip(member).zip(&mean) {
                let d = v - m;
                *acc += d * d / denom;
            }
        }
        var
    }

    pub fn spread(&self) -> Vec<f64> {
        self.variance().into_iter().map(f64::sqrt).collect()
    }
}

/// ETKF options the experiments expose.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Multiplicative inflation applied to background perturbations
    /// (covariance scales by this factor).
    pub inflation: f64,
    /// Gaspari-Cohn localization radius in grid-point distance; `None`
    /// disables localization (global update).
    pub localization_radius: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AnalysisRecord {
    pub time_index: usize,
    pub ensemble: EnsembleState,
    pub mean: StateVector,
    pub spread: Vec<f64>,
}

/// Truth plus seeded N(0, sigma_r^2 I) noise at every observation time.
///
/// `nature` must be stored at a stride of whole observation intervals;
/// one record is produced per stored state after the initial one. Each
/// record draws from its own counter-based stream, so the sequence is
/// independent of evaluation order.
pub fn generate_observations(
    nature: &Trajectory<StateVector>,
    net: &ObsNetwork,
    stride_steps: usize,
    seed: u64,
) -> Result<Vec<ObservationRecord>, AssimError> {
    if stride_steps != net.obs_every_steps {
        return Err(AssimError::MisalignedStride {
            stride: stride_steps,
            obs_every: net.obs_every_steps,
        });
    }
    Ok((1..nature.states.len())
        .map(|k| {
            let mut rng = stream_rng(seed, "obs", k as u64);
            let values = nature.states[k]
                .iter()
                .map(|&t| t + net.sigma_r * standard_normal(&mut rng))
                .collect();
            ObservationRecord { time_index: k, values }
        })
        .collect())
}

/// Marsaglia polar draw; hand-rolled so the stream layout stays stable
/// across dependency upgrades.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}

/// Gaspari-Cohn fifth-order compactly supported correlation function.
/// `c` is the half-support length scale: the taper reaches zero at 2c.
pub fn gaspari_cohn(dist: f64, c: f64) -> f64 {
    let z = dist.abs() / c;
    if z >= 2.0 {
        0.0
    } else if z >= 1.0 {
        let z2 = z * z;
        let z3 = z2 * z;
        z3 * z2 / 12.0 - z2 * z2 / 2.0 + z3 * 5.0 / 8.0 + z2 * 5.0 / 3.0 - 5.0 * z + 4.0
            - (2.0 / 3.0) / z
    } else {
        let z2 = z * z;
        let z3 = z2 * z;
        -z3 * z2 / 4.0 + z2 * z2 / 2.0 + z3 * 5.0 / 8.0 - z2 * 5.0 / 3.0 + 1.0
    }
}

fn cyclic_distance(i: usize, j: usize, s: usize) -> f64 {
    let d = (i as isize - j as isize).unsigned_abs();
    d.min(s - d) as f64
}

struct EnsembleUpdate {
    /// Mean weights (N).
    w_mean: DVector<f64>,
    /// Perturbation weight matrix, the symmetric square root of (N-1) P~.
    w_pert: DMatrix<f64>,
}

/// Core ensemble-space solve shared by the global and localized paths.
/// `s_mat` holds the observation-space perturbations (p x N), `innov` the
/// innovation, and `r_inv` the diagonal of R^-1.
fn ensemble_space_update(
    s_mat: &DMatrix<f64>,
    innov: &DVector<f64>,
    r_inv: &DVector<f64>,
) -> Result<EnsembleUpdate, AssimError> {
    let n = s_mat.ncols();
    // C = S^T R^-1 (N x p)
    let mut c = s_mat.transpose();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col *= r_inv[j];
    }
    // A = (N-1) I + C S, symmetric positive definite for sigma_r > 0
    let mut a = &c * s_mat;
    for i in 0..n {
        a[(i, i)] += (n - 1) as f64;
    }
    let eig = a.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(AssimError::Singular);
    }
    // P~ = A^-1 and W = ((N-1) P~)^(1/2) from the same eigenbasis,
    // eigenvalues floored against rounding.
    let q = &eig.eigenvectors;
    let inv = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&l| 1.0 / l.max(1e-12)));
    let p_tilde = q * DMatrix::from_diagonal(&inv) * q.transpose();
    let sqrt_diag = DVector::from_iterator(
        n,
        eig.eigenvalues
            .iter()
            .map(|&l| ((n - 1) as f64 / l.max(1e-12)).sqrt()),
    );
    let w_pert = q * DMatrix::from_diagonal(&sqrt_diag) * q.transpose();
    let w_mean = &p_tilde * (&c * innov);
    Ok(EnsembleUpdate { w_mean, w_pert })
}

/// One ETKF analysis step.
pub fn letkf_update(
    background: &EnsembleState,
    obs: &ObservationRecord,
    net: &ObsNetwork,
    cfg: &FilterConfig,
) -> Result<EnsembleState, AssimError> {
    let s = background.dim();
    let n = background.n();
    if obs.values.len() != s {
        return Err(AssimError::DimensionMismatch { expected: s, got: obs.values.len() });
    }

    let mean = background.mean();
    let infl = cfg.inflation.sqrt();
    // X' (S x N), columns are inflated perturbations
    let x_pert = DMatrix::from_fn(s, n, |i, j| infl * (background.members[j][i] - mean[i]));
    let innov_full = DVector::from_fn(s, |i, _| obs.values[i] - mean[i]);
    let r_inv_scalar = 1.0 / (net.sigma_r * net.sigma_r);

    let mut members = vec![vec![0.0; s]; n];
    match cfg.localization_radius {
        None => {
            // H = I, so observation-space perturbations are X' itself.
            let r_inv = DVector::from_element(s, r_inv_scalar);
            let up = ensemble_space_update(&x_pert, &innov_full, &r_inv)?;
            apply_weights(&mut members, &mean, &x_pert, &up, None);
        }
        Some(radius) => {
            for g in 0..s {
                let mut rows = Vec::new();
                let mut taper = Vec::new();
                for o in 0..s {
                    let rho = gaspari_cohn(cyclic_distance(g, o, s), radius);
                    if rho > 1e-10 {
                        rows.push(o);
                        taper.push(rho);
                    }
                }
                let p = rows.len();
                let s_local = DMatrix::from_fn(p, n, |i, j| x_pert[(rows[i], j)]);
                let innov = DVector::from_fn(p, |i, _| innov_full[rows[i]]);
                let r_inv = DVector::from_fn(p, |i, _| r_inv_scalar * taper[i]);
                let up = ensemble_space_update(&s_local, &innov, &r_inv)?;
                apply_weights(&mut members, &mean, &x_pert, &up, Some(g));
            }
        }
    }
    Ok(EnsembleState::new(members))
}

/// Analysis members x_bar + X'(w_mean + W e_n), either for all grid points or
/// for a single localized row.
fn apply_weights(
    members: &mut [StateVector],
    mean: &[f64],
    x_pert: &DMatrix<f64>,
    up: &EnsembleUpdate,
    row: Option<usize>,
) {
    for (j, member) in members.iter_mut().enumerate() {
        let w = &up.w_mean + up.w_pert.column(j);
        match row {
            Some(g) => {
                member[g] = mean[g] + x_pert.row(g).transpose().dot(&w);
            }
            None => {
                for (g, m) in member.iter_mut().enumerate() {
                    *m = mean[g] + x_pert.row(g).transpose().dot(&w);
                }
            }
        }
    }
}

/// Forecast model used to propagate members between analyses.
pub struct ForecastModel<F> {
    pub tendency: F,
    pub dt: f64,
}

impl<F> ForecastModel<F>
where
    F: Fn(&StateVector) -> Result<StateVector, DynError> + Sync,
{
    pub fn advance(&self, x: &StateVector, n_steps: usize) -> Result<StateVector, DynError> {
        advance(x, self.dt, n_steps, &self.tendency)
    }
}

const DIVERGENCE_WINDOW: usize = 100;

/// Alternate member forecasts and ETKF updates, one analysis per observation.
pub fn run_assimilation_cycle<F>(
    model: &ForecastModel<F>,
    obs: &[ObservationRecord],
    initial: EnsembleState,
    net: &ObsNetwork,
    cfg: &FilterConfig,
) -> Result<Vec<AnalysisRecord>, AssimError>
where
    F: Fn(&StateVector) -> Result<StateVector, DynError> + Sync,
{
    let mut records = Vec::with_capacity(obs.len());
    let mut ensemble = initial;
    let mut prev_time = 0usize;
    let mut bad_streak = 0usize;
    for record in obs {
        assert!(record.time_index > prev_time, "observations must be strictly increasing in time");
        let steps = (record.time_index - prev_time) * net.obs_every_steps;
        let forecasts: Result<Vec<_>, DynError> = ensemble
            .members
            .par_iter()
            .map(|m| model.advance(m, steps))
            .collect();
        ensemble = letkf_update(&EnsembleState::new(forecasts?), record, net, cfg)?;
        let mean = ensemble.mean();

        let rmse_obs = {
            let ss: f64 = mean
                .iter()
                .zip(&record.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (ss / mean.len() as f64).sqrt()
        };
        bad_streak = if rmse_obs > 5.0 * net.sigma_r { bad_streak + 1 } else { 0 };
        if bad_streak >= DIVERGENCE_WINDOW {
            return Err(AssimError::Divergence(DIVERGENCE_WINDOW));
        }

        records.push(AnalysisRecord {
            time_index: record.time_index,
            spread: ensemble.spread(),
            mean,
            ensemble: ensemble.clone(),
        });
        prev_time = record.time_index;
    }
    Ok(records)
}

/// Initial ensemble: a center state plus seeded N(0, I) perturbations, one
/// stream per member.
pub fn initial_ensemble(center: &StateVector, n: usize, seed: u64) -> EnsembleState {
    let members = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, "init-ensemble", i as u64);
            center.iter().map(|&v| v + standard_normal(&mut rng)).collect()
        })
        .collect();
    EnsembleState::new(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyncore::{l96_tendency, integrate, SingleScaleParams};
    use approx::assert_relative_eq;

    fn scored_rmse(a: &[f64], b: &[f64]) -> f64 {
        let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (ss / a.len() as f64).sqrt()
    }

    #[test]
    fn observation_noise_vanishes_in_degenerate_limit() {
        let traj = Trajectory {
            t0: 0.0,
            dt: 0.05,
            states: vec![vec![1.0; 8], vec![2.0; 8], vec![3.0; 8]],
        };
        let net = ObsNetwork { obs_every_steps: 4, sigma_r: 1e-12 };
        let obs = generate_observations(&traj, &net, 4, 9).unwrap();
        assert_eq!(obs.len(), 2);
        for (rec, truth) in obs.iter().zip(&traj.states[1..]) {
            for (o, t) in rec.values.iter().zip(truth) {
                assert!((o - t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn observations_are_deterministic() {
        let traj = Trajectory { t0: 0.0, dt: 0.05, states: vec![vec![0.0; 8]; 50] };
        let net = ObsNetwork { obs_every_steps: 4, sigma_r: 1.0 };
        let a = generate_observations(&traj, &net, 4, 42).unwrap();
        let b = generate_observations(&traj, &net, 4, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn misaligned_stride_is_rejected() {
        let traj = Trajectory { t0: 0.0, dt: 0.05, states: vec![vec![0.0; 8]; 3] };
        let net = ObsNetwork { obs_every_steps: 4, sigma_r: 1.0 };
        assert!(matches!(
            generate_observations(&traj, &net, 3, 0),
            Err(AssimError::MisalignedStride { .. })
        ));
    }

    #[test]
    fn pooled_innovations_have_unit_moments() {
        // 10,000 normalized innovations: mean within +-0.03, std in [0.97, 1.03].
        let n_times = 1251;
        let traj = Trajectory { t0: 0.0, dt: 0.05, states: vec![vec![0.0; 8]; n_times] };
        let net = ObsNetwork { obs_every_steps: 4, sigma_r: 2.5 };
        let obs = generate_observations(&traj, &net, 4, 7).unwrap();
        let pool: Vec<f64> = obs
            .iter()
            .flat_map(|r| r.values.iter().map(|v| v / net.sigma_r))
            .collect();
        assert_eq!(pool.len(), 10_000);
        let mean = pool.iter().sum::<f64>() / pool.len() as f64;
        let var = pool.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (pool.len() - 1) as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((0.97..=1.03).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn huge_r_leaves_inflated_background_unchanged() {
        let mut rng = stream_rng(0, "test", 0);
        let members: Vec<Vec<f64>> =
            (0..10).map(|_| (0..4).map(|_| standard_normal(&mut rng)).collect()).collect();
        let bg = EnsembleState::new(members);
        let net = ObsNetwork { obs_every_steps: 1, sigma_r: 1e9 };
        let cfg = FilterConfig { inflation: 1.2, localization_radius: None };
        let obs = ObservationRecord { time_index: 1, values: vec![5.0; 4] };
        let analysis = letkf_update(&bg, &obs, &net, &cfg).unwrap();

        let mean = bg.mean();
        let infl = cfg.inflation.sqrt();
        for (a_m, b_m) in analysis.members.iter().zip(&bg.members) {
            for ((a, b), m) in a_m.iter().zip(b_m).zip(&mean) {
                let want = m + infl * (b - m);
                assert_relative_eq!(a, &want, max_relative = 1e-6, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn scalar_update_matches_kalman_limit() {
        // Background mean 0, variance 1, obs 1, R = 1 -> analysis mean 0.5,
        // variance 0.5. The draws are standardized, so the sample moments are
        // exact and the Kalman limit holds at any ensemble size; keep N small
        // because the ensemble-space solve scales as N^3.
        let n = 500;
        let mut rng = stream_rng(1, "test", 0);
        let mut draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
        for d in &mut draws {
            *d = (*d - m) / sd;
        }
        let bg = EnsembleState::new(draws.into_iter().map(|v| vec![v]).collect());
        let net = ObsNetwork { obs_every_steps: 1, sigma_r: 1.0 };
        let cfg = FilterConfig { inflation: 1.0, localization_radius: None };
        let obs = ObservationRecord { time_index: 1, values: vec![1.0] };
        let analysis = letkf_update(&bg, &obs, &net, &cfg).unwrap();
        assert!((analysis.mean()[0] - 0.5).abs() < 0.02);
        assert!((analysis.variance()[0] - 0.5).abs() < 0.02);
    }

    #[test]
    fn two_variable_update_matches_closed_form_kalman() {
        // With H = I and N > S the ETKF mean equals the Kalman update built
        // from the sample covariance.
        let n = 40;
        let mut rng = stream_rng(2, "test", 0);
        let members: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a = standard_normal(&mut rng);
                let b = standard_normal(&mut rng);
                vec![1.0 + a, -2.0 + 0.5 * a + 0.8 * b]
            })
            .collect();
        let bg = EnsembleState::new(members);
        let net = ObsNetwork { obs_every_steps: 1, sigma_r: 0.7 };
        let cfg = FilterConfig { inflation: 1.0, localization_radius: None };
        let obs = ObservationRecord { time_index: 1, values: vec![0.3, -1.1] };
        let analysis = letkf_update(&bg, &obs, &net, &cfg).unwrap();

        // Closed-form oracle: xa = xb + B (B + R)^-1 (y - xb) with sample B.
        let mean = bg.mean();
        let mut b = DMatrix::zeros(2, 2);
        for member in &bg.members {
            let d = DVector::from_vec(vec![member[0] - mean[0], member[1] - mean[1]]);
            b += &d * d.transpose() / (n as f64 - 1.0);
        }
        let r = DMatrix::identity(2, 2) * net.sigma_r * net.sigma_r;
        let gain = &b * (&b + &r).try_inverse().unwrap();
        let innov = DVector::from_vec(vec![obs.values[0] - mean[0], obs.values[1] - mean[1]]);
        let want = DVector::from_vec(mean.clone()) + gain * innov;

        let got = analysis.mean();
        for i in 0..2 {
            assert_relative_eq!(got[i], want[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn localized_update_with_large_radius_matches_global() {
        let mut rng = stream_rng(3, "test", 0);
        let members: Vec<Vec<f64>> =
            (0..20).map(|_| (0..8).map(|_| standard_normal(&mut rng)).collect()).collect();
        let bg = EnsembleState::new(members);
        let net = ObsNetwork { obs_every_steps: 1, sigma_r: 1.0 };
        let obs = ObservationRecord {
            time_index: 1,
            values: (0..8).map(|i| i as f64 * 0.1).collect(),
        };
        let global = letkf_update(
            &bg,
            &obs,
            &net,
            &FilterConfig { inflation: 1.0, localization_radius: None },
        )
        .unwrap();
        let local = letkf_update(
            &bg,
            &obs,
            &net,
            &FilterConfig { inflation: 1.0, localization_radius: Some(1e6) },
        )
        .unwrap();
        for (a, b) in global.members.iter().zip(&local.members) {
            for (x, y) in a.iter().zip(b) {
                assert_relative_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn analysis_reduces_ensemble_variance() {
        let mut rng = stream_rng(4, "test", 0);
        let net = ObsNetwork { obs_every_steps: 1, sigma_r: 1.0 };
        let cfg = FilterConfig { inflation: 1.0, localization_radius: None };
        for t in 0..20 {
            let members: Vec<Vec<f64>> =
                (0..15).map(|_| (0..6).map(|_| 3.0 * standard_normal(&mut rng)).collect()).collect();
            let bg = EnsembleState::new(members);
            let obs = ObservationRecord {
                time_index: t + 1,
                values: (0..6).map(|_| standard_normal(&mut rng)).collect(),
            };
            let analysis = letkf_update(&bg, &obs, &net, &cfg).unwrap();
            let tr_b: f64 = bg.variance().iter().sum();
            let tr_a: f64 = analysis.variance().iter().sum();
            assert!(tr_a <= tr_b + 1e-10, "trace grew: {tr_a} > {tr_b}");
        }
    }

    #[test]
    fn empty_observations_give_empty_analyses() {
        let p = SingleScaleParams::new(8, 8.0);
        let model = ForecastModel { tendency: move |x: &StateVector| l96_tendency(x, &p), dt: 0.0125 };
        let net = ObsNetwork { obs_every_steps: 4, sigma_r: 1.0 };
        let cfg = FilterConfig { inflation: 1.05, localization_radius: None };
        let init = initial_ensemble(&vec![8.0; 8], 10, 0);
        let out = run_assimilation_cycle(&model, &[], init, &net, &cfg).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn perfect_model_twin_experiment_beats_observation_error() {
        // Short PMS run: time-mean analysis RMSE vs truth under 1.0 after spinup.
        let p = SingleScaleParams::new(8, 8.0);
        let tendency = move |x: &StateVector| l96_tendency(x, &p);
        let mut x0 = vec![8.0; 8];
        x0[3] += 0.05;
        let warm = advance(&x0, 0.0125, 4000, &tendency).unwrap();
        let nature = integrate(&warm, 0.0125, 4 * 600, &tendency, 4).unwrap();

        let net = ObsNetwork { obs_every_steps: 4, sigma_r: 1.0 };
        let obs = generate_observations(&nature, &net, 4, 11).unwrap();
        let cfg = FilterConfig { inflation: 1.05, localization_radius: None };
        let model = ForecastModel { tendency, dt: 0.0125 };
        let init = initial_ensemble(&nature.states[0], 20, 13);
        let analyses = run_assimilation_cycle(&model, &obs, init, &net, &cfg).unwrap();

        let spinup = 200;
        let mut acc = 0.0;
        let mut count = 0;
        for rec in &analyses[spinup..] {
            acc += scored_rmse(&rec.mean, &nature.states[rec.time_index]);
            count += 1;
        }
        let mean_rmse = acc / count as f64;
        assert!(mean_rmse < 1.0, "analysis RMSE {mean_rmse} not below sigma_r");
    }

    #[test]
    fn assimilation_is_deterministic() {
        let p = SingleScaleParams::new(8, 8.0);
        let tendency = move |x: &StateVector| l96_tendency(x, &p);
        let mut x0 = vec![8.0; 8];
        x0[0] += 0.1;
        let warm = advance(&x0, 0.0125, 800, &tendency).unwrap();
        let nature = integrate(&warm, 0.0125, 4 * 30, &tendency, 4).unwrap();
        let net = ObsNetwork { obs_every_steps: 4, sigma_r: 1.0 };
        let obs = generate_observations(&nature, &net, 4, 5).unwrap();
        let cfg = FilterConfig { inflation: 1.05, localization_radius: None };
        let model = ForecastModel { tendency, dt: 0.0125 };
        let run = || {
            run_assimilation_cycle(&model, &obs, initial_ensemble(&nature.states[0], 10, 3), &net, &cfg)
                .unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ensemble, y.ensemble);
        }
    }

    #[test]
    fn analysis_mean_is_mean_plus_weighted_perturbations() {
        // The ones vector is an eigenvector of the ensemble-space matrix
        // (S 1 = X' 1 = 0), so the symmetric square root maps it to itself
        // and the analysis mean is exactly x_bar + X' w_bar. Equivalent,
        // observable form: analysis perturbations sum to zero and the mean
        // shift lies in the span of X'.
        let mut rng = stream_rng(6, "test", 0);
        let members: Vec<Vec<f64>> =
            (0..12).map(|_| (0..5).map(|_| standard_normal(&mut rng)).collect()).collect();
        let bg = EnsembleState::new(members);
        let net = ObsNetwork { obs_every_steps: 1, sigma_r: 0.5 };
        let cfg = FilterConfig { inflation: 1.1, localization_radius: None };
        let obs = ObservationRecord { time_index: 1, values: vec![0.2; 5] };
        let analysis = letkf_update(&bg, &obs, &net, &cfg).unwrap();

        let a_mean = analysis.mean();
        for i in 0..5 {
            let pert_sum: f64 = analysis.members.iter().map(|m| m[i] - a_mean[i]).sum();
            assert!(pert_sum.abs() < 1e-10, "perturbations do not sum to zero: {pert_sum}");
        }
    }
}

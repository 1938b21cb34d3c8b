//! Dense networks, variance losses, Adam, and the two-stage training
//! protocol.
//!
//! The mean-state network is trained first on the analysis (or truth) target
//! with a plain MSE loss. The variance network is then trained with the mean
//! network frozen, under one of three losses: MSE against the ensemble
//! variance (NN-mse), extended MSE against the squared error proxy (NN-ext),
//! or the diagonal Gaussian negative log-likelihood (NN-lik).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_u64, stream_rng};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-positive predicted variance in likelihood loss")]
    NonPositiveVariance,
    #[error("non-finite value encountered during {0}")]
    NonFinite(&'static str),
    #[error("every hyperparameter cell diverged")]
    AllCellsDiverged,
}

/// ln(1 + e^x), overflow-safe.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d/dx softplus(x) = sigmoid(x).
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Mean-state head: outputs range over state values.
    Linear,
    /// Variance head: outputs are strictly positive.
    Softplus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input, hidden..., output sizes. Hidden activations are softplus.
    pub layer_sizes: Vec<usize>,
    pub output_activation: OutputActivation,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Self {
        assert!(layer_sizes.len() >= 3, "need at least one hidden layer");
        assert!(layer_sizes.iter().all(|&n| n >= 1));
        Self { layer_sizes, output_activation }
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// y = A^T x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows, x.len());
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (yc, a) in y.iter_mut().zip(row) {
                *yc += a * x[r];
            }
        }
        y
    }
}

/// Per-layer weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Glorot-uniform initialization in +-sqrt(6/(fan_in+fan_out)), seeded.
    pub fn init(cfg: &MlpConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "nn-init", 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in cfg.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut m = Matrix::zeros(fan_out, fan_in);
            for v in m.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            weights.push(m);
            biases.push(vec![0.0; fan_out]);
        }
        Self { weights, biases }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.data.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Flat view of every parameter, for serialization and finite differences.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.data.len();
            w.data.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = b.len();
            b.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        assert_eq!(k, flat.len());
    }
}

struct ForwardCache {
    /// activations[0] is the input; activations[L] the output.
    activations: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

fn forward_cached(net: &MlpParams, cfg: &MlpConfig, input: &[f64]) -> ForwardCache {
    let n_layers = cfg.n_layers();
    let mut activations = Vec::with_capacity(n_layers + 1);
    let mut preacts = Vec::with_capacity(n_layers);
    activations.push(input.to_vec());
    for l in 0..n_layers {
        let mut z = net.weights[l].matvec(activations.last().unwrap());
        for (zi, bi) in z.iter_mut().zip(&net.biases[l]) {
            *zi += bi;
        }
        let a = if l + 1 < n_layers {
            z.iter().map(|&v| softplus(v)).collect()
        } else {
            match cfg.output_activation {
                OutputActivation::Linear => z.clone(),
                OutputActivation::Softplus => z.iter().map(|&v| softplus(v)).collect(),
            }
        };
        preacts.push(z);
        activations.push(a);
    }
    ForwardCache { activations, preacts }
}

/// Standard dense forward pass.
pub fn forward(net: &MlpParams, cfg: &MlpConfig, input: &[f64]) -> Result<Vec<f64>, NnError> {
    if input.len() != cfg.layer_sizes[0] {
        return Err(NnError::ShapeMismatch { expected: cfg.layer_sizes[0], got: input.len() });
    }
    Ok(forward_cached(net, cfg, input).activations.pop().unwrap())
}

/// Which per-sample loss the batch gradient differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Eq. for the mean net: sum of squared errors against the target state.
    MseMean,
    /// NN-mse: squared error against the ensemble variance target.
    MseVar,
    /// NN-ext: squared error of predicted variance against the squared proxy
    /// error, elementwise.
    Emse,
    /// NN-lik: diagonal Gaussian negative log-likelihood.
    Lik,
}

/// Sum of squared componentwise errors for one sample.
pub fn loss_mse_mean(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum()
}

/// NN-mse: plain MSE between predicted and ensemble variances.
pub fn loss_mse_var(pred_var: &[f64], ens_var: &[f64]) -> f64 {
    loss_mse_mean(pred_var, ens_var)
}

/// NN-ext: sum over components of (sigma^2 - eps^2)^2, squares elementwise.
pub fn loss_emse(pred_var: &[f64], eps: &[f64]) -> f64 {
    pred_var.iter().zip(eps).map(|(v, e)| (v - e * e) * (v - e * e)).sum()
}

/// NN-lik: sum over components of ln(sigma^2) + eps^2 / sigma^2.
pub fn loss_lik(pred_var: &[f64], eps: &[f64]) -> Result<f64, NnError> {
    let mut acc = 0.0;
    for (&v, &e) in pred_var.iter().zip(eps) {
        if v <= 0.0 {
            return Err(NnError::NonPositiveVariance);
        }
        acc += v.ln() + e * e / v;
    }
    Ok(acc)
}

/// Loss value for one sample. `aux` is the target state (MseMean), the
/// ensemble variance (MseVar), or the frozen-mean-network error proxy
/// (Emse, Lik).
pub fn sample_loss(kind: LossKind, output: &[f64], aux: &[f64]) -> Result<f64, NnError> {
    match kind {
        LossKind::MseMean => Ok(loss_mse_mean(output, aux)),
        LossKind::MseVar => Ok(loss_mse_var(output, aux)),
        LossKind::Emse => Ok(loss_emse(output, aux)),
        LossKind::Lik => loss_lik(output, aux),
    }
}

/// dL/d(output) for one sample.
fn loss_grad(kind: LossKind, output: &[f64], aux: &[f64]) -> Result<Vec<f64>, NnError> {
    match kind {
        LossKind::MseMean | LossKind::MseVar => {
            Ok(output.iter().zip(aux).map(|(p, t)| 2.0 * (p - t)).collect())
        }
        LossKind::Emse => Ok(output.iter().zip(aux).map(|(v, e)| 2.0 * (v - e * e)).collect()),
        LossKind::Lik => {
            if output.iter().any(|&v| v <= 0.0) {
                return Err(NnError::NonPositiveVariance);
            }
            Ok(output
                .iter()
                .zip(aux)
                .map(|(&v, &e)| 1.0 / v - e * e / (v * v))
                .collect())
        }
    }
}

/// Exact analytic gradient of the mean per-sample loss over a batch.
/// Returns (gradients, mean batch loss).
pub fn backward(
    net: &MlpParams,
    cfg: &MlpConfig,
    inputs: &[&[f64]],
    aux: &[&[f64]],
    kind: LossKind,
) -> Result<(MlpParams, f64), NnError> {
    assert_eq!(inputs.len(), aux.len());
    let n_layers = cfg.n_layers();
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = net.zeros_like();
    let mut total_loss = 0.0;

    for (x, a) in inputs.iter().zip(aux) {
        let cache = forward_cached(net, cfg, x);
        let output = cache.activations.last().unwrap();
        total_loss += sample_loss(kind, output, a)?;
        let mut delta = loss_grad(kind, output, a)?;
        // output activation derivative
        if cfg.output_activation == OutputActivation::Softplus {
            for (d, z) in delta.iter_mut().zip(&cache.preacts[n_layers - 1]) {
                *d *= sigmoid(*z);
            }
        }
        for l in (0..n_layers).rev() {
            let a_prev = &cache.activations[l];
            for (r, &d) in delta.iter().enumerate() {
                grads.biases[l][r] += scale * d;
                let row = &mut grads.weights[l].data[r * a_prev.len()..(r + 1) * a_prev.len()];
                for (g, &ap) in row.iter_mut().zip(a_prev) {
                    *g += scale * d * ap;
                }
            }
            if l > 0 {
                let mut back = net.weights[l].matvec_t(&delta);
                for (b, z) in back.iter_mut().zip(&cache.preacts[l - 1]) {
                    *b *= sigmoid(*z);
                }
                delta = back;
            }
        }
    }
    if !grads.all_finite() {
        return Err(NnError::NonFinite("backward"));
    }
    Ok((grads, total_loss * scale))
}

/// Adam optimizer state with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: MlpParams,
    pub v: MlpParams,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(like: &MlpParams, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One Adam step with bias correction; decoupled decay shrinks the
    /// parameters by (1 - lr*wd) before the moment update is applied.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;

        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        };

        for l in 0..params.weights.len() {
            for i in 0..params.weights[l].data.len() {
                update(
                    &mut params.weights[l].data[i],
                    grads.weights[l].data[i],
                    &mut self.m.weights[l].data[i],
                    &mut self.v.weights[l].data[i],
                );
            }
            for i in 0..params.biases[l].len() {
                update(
                    &mut params.biases[l][i],
                    grads.biases[l][i],
                    &mut self.m.biases[l][i],
                    &mut self.v.biases[l][i],
                );
            }
        }
    }
}

/// Per-variable standardization constants fit on the train split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl Normalization {
    pub fn fit(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Self {
        let (input_mean, input_std) = column_stats(inputs);
        let (target_mean, target_std) = column_stats(targets);
        Self { input_mean, input_std, target_mean, target_std }
    }

    pub fn normalize_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn normalize_target(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.target_mean)
            .zip(&self.target_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize_target(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.target_mean)
            .zip(&self.target_std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    /// Variances live in squared normalized target units.
    pub fn normalize_variance(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.target_std).map(|(x, s)| x / (s * s)).collect()
    }

    pub fn denormalize_variance(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.target_std).map(|(x, s)| x * s * s).collect()
    }
}

fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / (n - 1.0).max(1.0)).sqrt();
        if *s <= 0.0 {
            *s = 1.0; // constant column: avoid division by zero
        }
    }
    (mean, std)
}

/// Normalized supervised pairs: `aux` is the loss-specific per-sample target.
#[derive(Debug, Clone)]
pub struct SupervisedSet {
    pub inputs: Vec<Vec<f64>>,
    pub aux: Vec<Vec<f64>>,
}

impl SupervisedSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Training protocol constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_every_epochs: usize,
    /// Consecutive non-improving evaluations before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
    pub wd_grid: Vec<f64>,
    pub repeats: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            eval_every_epochs: 20,
            patience: 3,
            max_epochs: 5000,
            seed: 0,
            lr_grid: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            wd_grid: vec![0.0, 5e-1, 1e-1, 1e-2],
            repeats: 5,
            hidden: vec![50, 50],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub cfg: MlpConfig,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub log: Vec<TrainLogRow>,
}

/// Mean per-sample loss over a set.
pub fn eval_loss(
    net: &MlpParams,
    cfg: &MlpConfig,
    set: &SupervisedSet,
    kind: LossKind,
) -> Result<f64, NnError> {
    let mut acc = 0.0;
    for (x, a) in set.inputs.iter().zip(&set.aux) {
        let out = forward(net, cfg, x)?;
        acc += sample_loss(kind, &out, a)?;
    }
    Ok(acc / set.len() as f64)
}

/// Minibatch Adam training with periodic validation and early stopping.
/// Returns the checkpoint with the minimum validation loss, never a later
/// one. `None` signals divergence of this run (non-finite losses).
pub fn train_network(
    train: &SupervisedSet,
    val: &SupervisedSet,
    cfg: &MlpConfig,
    kind: LossKind,
    tc: &TrainConfig,
    lr: f64,
    wd: f64,
    seed: u64,
) -> Option<TrainOutcome> {
    let mut params = MlpParams::init(cfg, seed);
    let mut adam = AdamState::new(&params, lr, wd);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(f64, MlpParams, usize)> = None;
    let mut bad_evals = 0;
    let mut log = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=tc.max_epochs {
        epochs_run = epoch;
        let mut rng = stream_rng(seed, "shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut train_loss_acc = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| train.inputs[i].as_slice()).collect();
            let aux: Vec<&[f64]> = chunk.iter().map(|&i| train.aux[i].as_slice()).collect();
            match backward(&params, cfg, &xs, &aux, kind) {
                Ok((grads, loss)) => {
                    train_loss_acc += loss;
                    n_batches += 1;
                    adam.step(&mut params, &grads);
                }
                Err(_) => return None,
            }
        }
        if !params.all_finite() {
            return None;
        }

        if epoch % tc.eval_every_epochs == 0 {
            let val_loss = match eval_loss(&params, cfg, val, kind) {
                Ok(v) if v.is_finite() => v,
                _ => return None,
            };
            log.push(TrainLogRow {
                epoch,
                train_loss: train_loss_acc / n_batches.max(1) as f64,
                val_loss,
            });
            let improved = best.as_ref().map_or(true, |(b, _, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, params.clone(), epoch));
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= tc.patience {
                    break;
                }
            }
        }
    }

    let (best_val_loss, best_params, _) = best?;
    Some(TrainOutcome {
        params: best_params,
        cfg: cfg.clone(),
        best_val_loss,
        epochs_run,
        log,
    })
}

/// Record of one sweep run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRunLog {
    pub lr: f64,
    pub wd: f64,
    pub repeat: usize,
    /// `None` marks a diverged run.
    pub val_loss: Option<f64>,
    pub epochs_run: usize,
}

#[derive(Debug)]
pub struct SweepResult {
    pub outcome: TrainOutcome,
    pub lr: f64,
    pub wd: f64,
    pub runs: Vec<SweepRunLog>,
}

/// Brute-force LR x WD exploration: `repeats` seeded runs per cell, the cell
/// with the lowest mean validation loss wins (ties broken by cell order), and
/// the best repeat within the winning cell is returned.
pub fn hyperparameter_sweep(
    train: &SupervisedSet,
    val: &SupervisedSet,
    cfg: &MlpConfig,
    kind: LossKind,
    tc: &TrainConfig,
) -> Result<SweepResult, NnError> {
    let mut cells = Vec::new();
    for (li, &lr) in tc.lr_grid.iter().enumerate() {
        for (wi, &wd) in tc.wd_grid.iter().enumerate() {
            cells.push((li, wi, lr, wd));
        }
    }

    let runs: Vec<(usize, usize, Option<TrainOutcome>)> = cells
        .par_iter()
        .flat_map(|&(li, wi, lr, wd)| {
            (0..tc.repeats)
                .into_par_iter()
                .map(move |rep| {
                    let cell_id = (li * tc.wd_grid.len() + wi) as u64;
                    let seed = derive_u64(tc.seed, "sweep", cell_id * tc.repeats as u64 + rep as u64);
                    (li * tc.wd_grid.len() + wi, rep, (lr, wd, seed))
                })
                .collect::<Vec<_>>()
        })
        .map(|(cell, rep, (lr, wd, seed))| {
            (cell, rep, train_network(train, val, cfg, kind, tc, lr, wd, seed))
        })
        .collect();

    let mut run_logs = Vec::new();
    let mut by_cell: Vec<Vec<(usize, Option<TrainOutcome>)>> = vec![Vec::new(); cells.len()];
    let mut ordered = runs;
    ordered.sort_by_key(|&(cell, rep, _)| (cell, rep));
    for (cell, rep, outcome) in ordered {
        let (_, _, lr, wd) = cells[cell];
        run_logs.push(SweepRunLog {
            lr,
            wd,
            repeat: rep,
            val_loss: outcome.as_ref().map(|o| o.best_val_loss),
            epochs_run: outcome.as_ref().map_or(0, |o| o.epochs_run),
        });
        by_cell[cell].push((rep, outcome));
    }

    // Winner: lowest mean validation loss over successful repeats; a cell
    // with any diverged repeat is skipped so the mean stays comparable.
    let mut winner: Option<(f64, usize)> = None;
    for (idx, cell_runs) in by_cell.iter().enumerate() {
        if cell_runs.iter().any(|(_, o)| o.is_none()) {
            continue;
        }
        let mean: f64 = cell_runs
            .iter()
            .map(|(_, o)| o.as_ref().unwrap().best_val_loss)
            .sum::<f64>()
            / cell_runs.len() as f64;
        if !mean.is_finite() {
            continue;
        }
        if winner.map_or(true, |(best, _)| mean < best) {
            winner = Some((mean, idx));
        }
    }
    let (_, cell_idx) = winner.ok_or(NnError::AllCellsDiverged)?;
    let (_, _, lr, wd) = cells[cell_idx];

    let best = by_cell[cell_idx]
        .iter()
        .filter_map(|(rep, o)| o.as_ref().map(|o| (o.best_val_loss, *rep)))
        .min_by(|a, b| a.partial_cmp(b).unwrap())
        .unwrap();
    let outcome = by_cell[cell_idx]
        .iter()
        .find(|(rep, _)| *rep == best.1)
        .and_then(|(_, o)| o.clone())
        .unwrap();

    Ok(SweepResult { outcome, lr, wd, runs: run_logs })
}

//! Loss, optimizer, and the training/evaluation harness.
//!
//! Training follows a fixed protocol: batch size 1, Adam with coupled L2
//! regularization, early stopping on validation composite loss with
//! best-epoch restore, and seeded k-fold cross-validation.

use serde::{Deserialize, Serialize};

use crate::domain::{FieldSnapshot, Quantity};
use crate::error::{Error, Result};
use crate::model::{backward_accumulate, forward, forward_eval_with_trunk, trunk_outputs, Mode, ModelConfig, ModelParams, Network, NormalizationStats};
use crate::numerics::RandomStream;
use crate::oracle::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Coefficient of the `Σ w²` loss term.
    pub l2_lambda: f64,
    pub max_epochs: usize,
    /// Epochs without strict improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            l2_lambda: 1e-8,
            max_epochs: 500,
            patience: 10,
            batch_size: 1,
            k_folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::invalid(format!("L2 coefficient {} must be >= 0", self.l2_lambda)));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("patience and max_epochs must be >= 1"));
        }
        if self.k_folds < 2 {
            return Err(Error::invalid(format!("k_folds = {} must be >= 2", self.k_folds)));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid(format!(
                "only per-sample updates are supported (batch_size = 1), got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Composite loss in normalized space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse_t: f64,
    pub mse_v: f64,
    pub mse_k: f64,
    /// `λ Σ w²` over weight matrices.
    pub reg_term: f64,
    /// `((mse_t + mse_v) + mse_k) + reg_term`, summed in that order.
    pub composite: f64,
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / pred.len() as f64
}

pub fn composite_loss(pred: &FieldSnapshot, target: &FieldSnapshot, net: &Network, lambda: f64) -> Result<LossReport> {
    target.check_len(pred.len(), "loss target")?;
    pred.check_len(pred.len(), "loss prediction")?;
    if pred.is_empty() {
        return Err(Error::invalid("loss over zero nodes"));
    }
    let mse_t = mse(&pred.t, &target.t);
    let mse_v = mse(&pred.v, &target.v);
    let mse_k = mse(&pred.k, &target.k);
    let reg_term = lambda * net.weight_sum_of_squares();
    Ok(LossReport {
        mse_t,
        mse_v,
        mse_k,
        reg_term,
        composite: mse_t + mse_v + mse_k + reg_term,
    })
}

/// `∂(Σ_q MSE_q)/∂ŷ_q = 2 (ŷ_q − y_q) / N`.
pub fn mse_output_grads(pred: &FieldSnapshot, target: &FieldSnapshot) -> FieldSnapshot {
    let scale = 2.0 / pred.len() as f64;
    let g = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(p, t)| scale * (p - t)).collect();
    FieldSnapshot {
        t: g(&pred.t, &target.t),
        v: g(&pred.v, &target.v),
        k: g(&pred.k, &target.k),
    }
}

/// Adds `∂(λ Σ w²)/∂w = 2 λ w` to the weight gradients.
pub fn add_l2_grad(grads: &mut Network, net: &Network, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for (g, p) in grads.layers_mut().zip(net.layers()) {
        for (gw, w) in g.weight.as_mut_slice().iter_mut().zip(p.weight.as_slice()) {
            *gw += 2.0 * lambda * w;
        }
    }
}

/// `100 · ‖target − pred‖₂ / ‖target‖₂`, in percent.
pub fn relative_l2(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("relative_l2", target.len(), pred.len()));
    }
    let norm = target.iter().map(|t| t * t).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::invalid("relative L2 error is undefined for an all-zero target"));
    }
    let diff = target.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum::<f64>().sqrt();
    Ok(100.0 * diff / norm)
}

/// Adam moments for every parameter, mirroring the network's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Network,
    pub v: Network,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        Self {
            m: net.zeros_like(),
            v: net.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, b1: f64, b2: f64, eps: f64, bc1: f64, bc2: f64) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn same_shape(a: &Network, b: &Network) -> bool {
    a.layers().count() == b.layers().count()
        && a.layers().zip(b.layers()).all(|(x, y)| x.weight.shape() == y.weight.shape() && x.bias.len() == y.bias.len())
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(state: &mut AdamState, net: &mut Network, grads: &Network, lr: f64) -> Result<()> {
    if !same_shape(net, grads) || !same_shape(net, &state.m) {
        return Err(Error::shape("adam_step", "gradients and moments shaped like the network", "a different layer layout"));
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let layers = net.layers_mut().zip(grads.layers()).zip(state.m.layers_mut().zip(state.v.layers_mut()));
    for ((p, g), (m, v)) in layers {
        adam_update(p.weight.as_mut_slice(), g.weight.as_slice(), m.weight.as_mut_slice(), v.weight.as_mut_slice(), lr, b1, b2, eps, bc1, bc2);
        adam_update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, lr, b1, b2, eps, bc1, bc2);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observation {
    Improved,
    NotImproved,
    Stop,
}

/// Tracks the best validation loss. Improvement means strictly lower.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Observation {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            Observation::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                Observation::Stop
            } else {
                Observation::NotImproved
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean composite loss over the epoch's updates (dropout active).
    pub train_loss: f64,
    /// Mean composite loss over the validation set (eval mode).
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub adam_steps: u64,
}

struct Targets {
    indices: Vec<usize>,
    normalized: Vec<FieldSnapshot>,
}

impl Targets {
    fn new(data: &Dataset, indices: &[usize], norm: &NormalizationStats) -> Self {
        Self {
            indices: indices.to_vec(),
            normalized: indices.iter().map(|&i| norm.normalize(&data.snapshots[i])).collect(),
        }
    }
}

fn check_indices(data: &Dataset, indices: &[usize], what: &str) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    if let Some(bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::invalid(format!("{what} index {bad} out of range for {} samples", data.len())));
    }
    Ok(())
}

fn check_model_fits_data(data: &Dataset, model_config: &ModelConfig) -> Result<()> {
    model_config.validate()?;
    if model_config.n_nodes != data.mesh.len() {
        return Err(Error::shape("model vs dataset mesh", format!("{} nodes", model_config.n_nodes), format!("{} nodes", data.mesh.len())));
    }
    if model_config.n1 != data.n1 {
        return Err(Error::shape("model vs dataset heat-flux sensors", model_config.n1, data.n1));
    }
    Ok(())
}

/// Mean eval-mode composite loss over `targets`.
fn mean_eval_loss(params: &ModelParams, data: &Dataset, targets: &Targets, lambda: f64) -> Result<f64> {
    let psi = trunk_outputs(params, &data.mesh)?;
    let mut total = 0.0;
    for (&i, target) in targets.indices.iter().zip(&targets.normalized) {
        let pred = forward_eval_with_trunk(params, &data.samples[i], &psi)?;
        total += composite_loss(&pred, target, &params.net, lambda)?.composite;
    }
    Ok(total / targets.indices.len() as f64)
}

/// Mean eval-mode composite loss of `params` on `indices`, in normalized space.
pub fn validation_loss(params: &ModelParams, data: &Dataset, indices: &[usize], lambda: f64) -> Result<f64> {
    check_indices(data, indices, "validation")?;
    mean_eval_loss(params, data, &Targets::new(data, indices, &params.norm), lambda)
}

/// Trains one model on `train_idx`, early-stopping on `val_idx`, and
/// returns the parameters of the best validation epoch.
pub fn train_fold(
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
    model_config: &ModelConfig,
    seed: u64,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    check_indices(data, train_idx, "training")?;
    check_indices(data, val_idx, "validation")?;
    check_model_fits_data(data, model_config)?;

    let norm = NormalizationStats::from_ranges(&data.ranges, data.n1).fit_outputs(train_idx.iter().map(|&i| &data.snapshots[i]));
    let train = Targets::new(data, train_idx, &norm);
    let val = Targets::new(data, val_idx, &norm);

    let base = RandomStream::new(seed);
    let mut init_stream = base.fork(0);
    let mut order_stream = base.fork(1);
    let mut dropout_stream = base.fork(2);

    let mut params = ModelParams::init(model_config.clone(), norm, &mut init_stream)?;
    let mut adam = AdamState::new(&params.net);
    let mut grads = params.net.zeros_like();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_net = params.net.clone();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train.indices.len()).collect();

    for epoch in 1..=config.max_epochs {
        order_stream.shuffle(&mut order);
        let mut train_total = 0.0;
        for &pos in &order {
            let sample = &data.samples[train.indices[pos]];
            let target = &train.normalized[pos];
            let (pred, trace) = forward(&params, sample, &data.mesh, Mode::Train(&mut dropout_stream))?;
            let trace = trace.expect("training forward records a trace");
            train_total += composite_loss(&pred, target, &params.net, config.l2_lambda)?.composite;
            for layer in grads.layers_mut() {
                layer.weight.as_mut_slice().fill(0.0);
                layer.bias.fill(0.0);
            }
            backward_accumulate(&params, &trace, &mse_output_grads(&pred, target), &mut grads)?;
            add_l2_grad(&mut grads, &params.net, config.l2_lambda);
            adam_step(&mut adam, &mut params.net, &grads, config.learning_rate)?;
        }
        let val_loss = mean_eval_loss(&params, data, &val, config.l2_lambda)?;
        let record = EpochRecord {
            epoch,
            train_loss: train_total / order.len() as f64,
            val_loss,
        };
        log::info!("epoch {epoch}: train {:.6e} val {:.6e}", record.train_loss, val_loss);
        epochs.push(record);
        match stopper.observe(epoch, val_loss) {
            Observation::Improved => best_net.clone_from(&params.net),
            Observation::NotImproved => {}
            Observation::Stop => {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    params.net = best_net;
    Ok((
        params,
        TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch(),
            best_val_loss: stopper.best(),
            stop_reason,
            adam_steps: adam.t,
        },
    ))
}

/// Seeded shuffle of `0..n` cut into `k` folds whose sizes differ by at
/// most one. Each fold is returned sorted.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::invalid(format!("cannot split {n} samples into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RandomStream::new(seed).shuffle(&mut order);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for j in 0..k {
        let size = base + usize::from(j < extra);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

/// Seeded split of `0..n` into `(train, test)` with `round(n · test_fraction)`
/// test samples (at least one of each). Both lists sorted.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction {test_fraction} must be in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} samples")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    RandomStream::new(seed).shuffle(&mut order);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Trains on `indices` minus a seeded `holdout_fraction` used only for
/// early stopping. Returns the model, its history, and the hold-out indices.
pub fn train_with_holdout(
    data: &Dataset,
    indices: &[usize],
    holdout_fraction: f64,
    config: &TrainConfig,
    model_config: &ModelConfig,
    seed: u64,
) -> Result<(ModelParams, TrainHistory, Vec<usize>)> {
    let (fit_pos, hold_pos) = train_test_split(indices.len(), holdout_fraction, seed)?;
    let fit: Vec<usize> = fit_pos.iter().map(|&p| indices[p]).collect();
    let hold: Vec<usize> = hold_pos.iter().map(|&p| indices[p]).collect();
    let (params, history) = train_fold(data, &fit, &hold, config, model_config, seed.wrapping_add(1))?;
    Ok((params, history, hold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Best validation composite loss (normalized space).
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub k_folds: usize,
    pub seed: u64,
    /// Always "normalized": losses are computed on z-scored outputs.
    pub loss_space: String,
    pub folds: Vec<FoldRecord>,
    pub mean_val_loss: f64,
    /// Population standard deviation over folds.
    pub std_val_loss: f64,
    /// Dataset indices validated in each fold.
    pub fold_members: Vec<Vec<usize>>,
}

/// Mean and population standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl CVReport {
    pub fn from_folds(seed: u64, folds: Vec<FoldRecord>, fold_members: Vec<Vec<usize>>) -> Self {
        let losses: Vec<f64> = folds.iter().map(|f| f.best_val_loss).collect();
        let (mean, std) = mean_and_std(&losses);
        Self {
            k_folds: folds.len(),
            seed,
            loss_space: "normalized".to_string(),
            folds,
            mean_val_loss: mean,
            std_val_loss: std,
            fold_members,
        }
    }
}

/// k-fold cross-validation over the dataset entries listed in `indices`.
pub fn cross_validate(data: &Dataset, indices: &[usize], config: &TrainConfig, model_config: &ModelConfig) -> Result<CVReport> {
    config.validate()?;
    if indices.len() < config.k_folds {
        return Err(Error::invalid(format!(
            "cross-validation needs at least {} samples, got {}",
            config.k_folds,
            indices.len()
        )));
    }
    let partition = kfold_partition(indices.len(), config.k_folds, config.seed)?;
    let members: Vec<Vec<usize>> = partition.iter().map(|f| f.iter().map(|&p| indices[p]).collect()).collect();
    let mut folds = Vec::with_capacity(config.k_folds);
    for (j, val) in members.iter().enumerate() {
        let train: Vec<usize> = members
            .iter()
            .enumerate()
            .filter(|&(other, _)| other != j)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let (_, history) = train_fold(data, &train, val, config, model_config, config.seed.wrapping_add(1 + j as u64))?;
        log::info!("fold {j}: best val {:.6e} at epoch {}", history.best_val_loss, history.best_epoch);
        folds.push(FoldRecord {
            fold: j,
            train_size: train.len(),
            val_size: val.len(),
            best_val_loss: history.best_val_loss,
            best_epoch: history.best_epoch,
            epochs_run: history.epochs.len(),
            stop_reason: history.stop_reason,
        });
    }
    Ok(CVReport::from_folds(config.seed, folds, members))
}

/// Mean, population standard deviation, and quartiles (linear interpolation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty list"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mean, std) = mean_and_std(values);
    Ok(Summary {
        mean,
        std,
        min: sorted[0],
        q25: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q75: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantityEval {
    pub quantity: Quantity,
    /// Per-sample MSE in normalized space.
    pub mse: Vec<f64>,
    /// Per-sample relative L2 error in physical units, percent.
    pub relative_l2_percent: Vec<f64>,
    pub mse_summary: Summary,
    pub relative_l2_summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_indices: Vec<usize>,
    /// T, v, k in that order.
    pub quantities: Vec<QuantityEval>,
}

impl EvalReport {
    pub fn quantity(&self, q: Quantity) -> &QuantityEval {
        &self.quantities[q.index()]
    }

    pub fn mean_relative_l2(&self, q: Quantity) -> f64 {
        self.quantity(q).relative_l2_summary.mean
    }
}

/// Per-sample errors of `params` on the dataset entries in `indices`.
pub fn evaluate(params: &ModelParams, data: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    check_indices(data, indices, "test")?;
    let psi = trunk_outputs(params, &data.mesh)?;
    let mut mse_lists = [Vec::new(), Vec::new(), Vec::new()];
    let mut rel_lists = [Vec::new(), Vec::new(), Vec::new()];
    for &i in indices {
        let target = &data.snapshots[i];
        let pred_norm = forward_eval_with_trunk(params, &data.samples[i], &psi)?;
        let target_norm = params.norm.normalize(target);
        let pred = params.norm.denormalize(&pred_norm);
        for q in Quantity::ALL {
            mse_lists[q.index()].push(mse(pred_norm.get(q), target_norm.get(q)));
            rel_lists[q.index()].push(relative_l2(pred.get(q), target.get(q))?);
        }
    }
    let quantities = Quantity::ALL
        .iter()
        .map(|&q| {
            let mse = std::mem::take(&mut mse_lists[q.index()]);
            let rel = std::mem::take(&mut rel_lists[q.index()]);
            Ok(QuantityEval {
                quantity: q,
                mse_summary: summarize(&mse)?,
                relative_l2_summary: summarize(&rel)?,
                mse,
                relative_l2_percent: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        sample_indices: indices.to_vec(),
        quantities,
    })
}

//! Empirical-risk training loop with the four hierarchical-imbalance
//! strategies: action weighting, interaction-length sampling, reward
//! weighting with top-k loss selection, and effectiveness adjustment of
//! training labels.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::{ActionCatalog, ClientRecord};
use crate::encoder::Standardizer;
use crate::error::{CrnError, Result};
use crate::model::{RewardModel, TrainSample};
use crate::numerics::{stable_softmax, AdamConfig, AdamState, SplitMix64};

/// On/off switches for the four imbalance strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceConfig {
    /// Multiply each sample's loss by the softmax of inverse action
    /// frequency.
    pub action_weighting: bool,
    /// Sample clients proportional to the softmax of sequence length.
    pub interaction_sampling: bool,
    /// Multiply each sample's loss by tanh(label + 0.1) and keep only the
    /// k_loss largest per-sample losses of a batch.
    pub reward_weighting: bool,
    /// Replace training labels by r / t^2 where t is the 1-based step at
    /// which the action was taken. Never applied to evaluation labels.
    pub effectiveness_adjustment: bool,
    /// Batch loss keeps this many largest per-sample losses when reward
    /// weighting is enabled.
    pub k_loss: usize,
}

impl ImbalanceConfig {
    pub fn none() -> Self {
        ImbalanceConfig {
            action_weighting: false,
            interaction_sampling: false,
            reward_weighting: false,
            effectiveness_adjustment: false,
            k_loss: 64,
        }
    }

    pub fn all() -> Self {
        ImbalanceConfig {
            action_weighting: true,
            interaction_sampling: true,
            reward_weighting: true,
            effectiveness_adjustment: true,
            k_loss: 64,
        }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.k_loss < 1 || self.k_loss > batch_size {
            return Err(CrnError::Config(format!(
                "k_loss {} must be in 1..=batch size {}",
                self.k_loss, batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Client-level validation fraction.
    pub val_fraction: f64,
    /// Client-level held-out test fraction; the trainer never touches it.
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 20,
            seed: 1,
            adam: AdamConfig::default(),
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(CrnError::Config("batch size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(CrnError::Config("epochs must be >= 1".into()));
        }
        if self.val_fraction < 0.0
            || self.test_fraction < 0.0
            || self.val_fraction + self.test_fraction >= 1.0
        {
            return Err(CrnError::Config("val + test fractions must leave room for training".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for i in 0..self.train_loss.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                self.train_loss[i],
                self.val_loss[i],
                self.epoch_seconds[i]
            ));
        }
        out
    }

    pub fn best_val_epoch(&self) -> Option<usize> {
        self.val_loss
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i + 1)
    }
}

/// Per-action loss weights: softmax over inverse frequency, so rare
/// actions weigh more. Index 0 (no-action token) and absent actions get
/// weight zero; absent actions never appear in training samples.
pub fn action_weights(catalog: &ActionCatalog) -> Result<Vec<f64>> {
    let mut present: Vec<usize> = Vec::new();
    for a in 1..=catalog.action_count {
        if catalog.frequencies[a] > 0.0 {
            present.push(a);
        }
    }
    if present.is_empty() {
        return Err(CrnError::Config("no action has positive frequency".into()));
    }
    let inv: Vec<f64> = present.iter().map(|a| 1.0 / catalog.frequencies[*a]).collect();
    let soft = stable_softmax(&inv)?;
    let mut weights = vec![0.0; catalog.action_count + 1];
    for (a, w) in present.iter().zip(soft.iter()) {
        weights[*a] = *w;
    }
    Ok(weights)
}

/// Client sampling distribution: softmax of sequence length, favoring
/// the rare long histories.
pub fn client_sampling_probabilities(lengths: &[usize]) -> Result<Vec<f64>> {
    let as_f: Vec<f64> = lengths.iter().map(|l| *l as f64).collect();
    stable_softmax(&as_f)
}

/// Index of one (client, labeled step) sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub client: usize,
    pub step: usize,
}

/// Draws a batch of (client, step) references with replacement. With
/// interaction sampling on, clients are drawn by length-softmax and a
/// labeled step uniformly within the client; otherwise labeled steps are
/// drawn uniformly over the whole pool.
pub fn sample_batch(
    records: &[ClientRecord],
    client_probs: Option<&[f64]>,
    flat_pool: &[SampleRef],
    batch_size: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<SampleRef>> {
    if flat_pool.is_empty() {
        return Err(CrnError::Data("no labeled steps to sample from".into()));
    }
    let mut out = Vec::with_capacity(batch_size);
    match client_probs {
        Some(probs) => {
            for _ in 0..batch_size {
                let client = rng.weighted(probs);
                let labeled = records[client].labeled_step_count();
                debug_assert!(labeled > 0);
                let step = 1 + rng.below(labeled);
                out.push(SampleRef { client, step });
            }
        }
        None => {
            for _ in 0..batch_size {
                out.push(flat_pool[rng.below(flat_pool.len())]);
            }
        }
    }
    Ok(out)
}

/// The reward-imbalance weight w_r(r) = tanh(r + 0.1).
pub fn reward_weight(label: f64) -> f64 {
    (label + 0.1).tanh()
}

/// The effectiveness adjustment r* = r / t^2 for a label observed at
/// 1-based step t. Training labels only.
pub fn adjust_effectiveness(label: f64, t: usize) -> Result<f64> {
    if t < 1 {
        return Err(CrnError::Range(format!("step index {t} must be >= 1")));
    }
    Ok(label / (t * t) as f64)
}

/// Per-sample diagnostics from one loss evaluation.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub squared_error: f64,
    pub weight: f64,
    pub weighted: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub backprop_loss: f64,
    pub samples: Vec<SampleLoss>,
    pub selected: Vec<usize>,
}

/// Weighted squared-error batch loss. Each sample's factor is the
/// product of its action weight (if enabled) and reward weight (if
/// enabled); with reward weighting the backprop loss is the mean of the
/// k largest weighted losses, ties broken by lower sample index.
pub fn compute_loss(
    preds: &[f64],
    labels: &[f64],
    action_factor: &[f64],
    cfg: &ImbalanceConfig,
) -> Result<LossBreakdown> {
    if preds.len() != labels.len() || preds.len() != action_factor.len() {
        return Err(CrnError::Dimension(format!(
            "loss inputs disagree: {} preds, {} labels, {} weights",
            preds.len(),
            labels.len(),
            action_factor.len()
        )));
    }
    let n = preds.len();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let se = (preds[i] - labels[i]) * (preds[i] - labels[i]);
        let mut weight = action_factor[i];
        if cfg.reward_weighting {
            weight *= reward_weight(labels[i]);
        }
        samples.push(SampleLoss { squared_error: se, weight, weighted: weight * se, selected: true });
    }

    let selected: Vec<usize> = if cfg.reward_weighting {
        let k = cfg.k_loss.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            samples[b]
                .weighted
                .partial_cmp(&samples[a].weighted)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
        chosen.sort_unstable();
        for (i, s) in samples.iter_mut().enumerate() {
            s.selected = chosen.binary_search(&i).is_ok();
        }
        chosen
    } else {
        (0..n).collect()
    };

    let backprop_loss =
        selected.iter().map(|i| samples[*i].weighted).sum::<f64>() / selected.len() as f64;
    Ok(LossBreakdown { backprop_loss, samples, selected })
}

/// d backprop_loss / d pred for each sample; zero off the selected set.
pub fn loss_gradient(preds: &[f64], labels: &[f64], breakdown: &LossBreakdown) -> Vec<f64> {
    let k = breakdown.selected.len() as f64;
    preds
        .iter()
        .zip(labels.iter())
        .zip(breakdown.samples.iter())
        .map(|((p, l), s)| if s.selected { s.weight * 2.0 * (p - l) / k } else { 0.0 })
        .collect()
}

/// Deterministic client-level split into (train, val, test) index sets.
pub fn split_clients(
    n_clients: usize,
    seed: u64,
    val_fraction: f64,
    test_fraction: f64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_clients).collect();
    let mut rng = SplitMix64::new(seed).split(0x73706C6974);
    for i in (1..order.len()).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    let n_test = (n_clients as f64 * test_fraction).round() as usize;
    let n_val = (n_clients as f64 * val_fraction).round() as usize;
    let test = order[..n_test].to_vec();
    let val = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    (train, val, test)
}

fn mean_squared_error<M: RewardModel>(model: &M, records: &[ClientRecord]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for record in records {
        for t in 1..record.steps.len() {
            let sample = TrainSample::from_record(record, t)?;
            let pred = model.predict(&sample.tuple, sample.action)?;
            total += (pred - sample.label) * (pred - sample.label);
            count += 1;
        }
    }
    if count == 0 {
        return Err(CrnError::Data("no labeled steps to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// Output of one training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub train_clients: Vec<usize>,
    pub val_clients: Vec<usize>,
    pub test_clients: Vec<usize>,
    pub action_weights: Vec<f64>,
}

/// Trains `model` in place over the training split of `records`,
/// validating per epoch on the validation split. Deterministic given
/// `config.seed`.
pub fn train<M: RewardModel>(
    model: &mut M,
    records: &[ClientRecord],
    action_count: usize,
    config: &TrainConfig,
    imbalance: &ImbalanceConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    imbalance.validate(config.batch_size)?;

    let (train_idx, val_idx, test_idx) =
        split_clients(records.len(), config.seed, config.val_fraction, config.test_fraction);
    let train_records: Vec<ClientRecord> = train_idx.iter().map(|i| records[*i].clone()).collect();
    let val_records: Vec<ClientRecord> = val_idx.iter().map(|i| records[*i].clone()).collect();

    // Only clients with at least one labeled step participate.
    let trainable: Vec<ClientRecord> =
        train_records.into_iter().filter(|r| r.labeled_step_count() > 0).collect();
    let mut flat_pool = Vec::new();
    for (c, record) in trainable.iter().enumerate() {
        for t in 1..record.steps.len() {
            flat_pool.push(SampleRef { client: c, step: t });
        }
    }
    if flat_pool.is_empty() {
        return Err(CrnError::Data("training split has no labeled steps".into()));
    }

    let numeric_rows: Vec<&[f64]> =
        trainable.iter().map(|r| r.demographics.numeric.as_slice()).collect();
    let numeric_count = trainable
        .first()
        .map(|r| r.demographics.numeric.len())
        .unwrap_or(0);
    model.set_standardizer(Standardizer::fit(&numeric_rows, numeric_count));

    let catalog = ActionCatalog::from_records(action_count, &trainable);
    let weights = action_weights(&catalog)?;
    let client_probs = if imbalance.interaction_sampling {
        let lengths: Vec<usize> = trainable.iter().map(|r| r.len()).collect();
        Some(client_sampling_probabilities(&lengths)?)
    } else {
        None
    };

    let mut adam = AdamState::new(model.flatten().len(), config.adam);
    let mut rng = SplitMix64::new(config.seed).split(0x747261696E);
    let iterations = flat_pool.len().div_ceil(config.batch_size);
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut epoch_loss = 0.0;
        for iteration in 0..iterations {
            let refs = sample_batch(
                &trainable,
                client_probs.as_deref(),
                &flat_pool,
                config.batch_size,
                &mut rng,
            )?;
            let mut samples = Vec::with_capacity(refs.len());
            for r in &refs {
                let mut s = TrainSample::from_record(&trainable[r.client], r.step)?;
                if imbalance.effectiveness_adjustment {
                    s.label = adjust_effectiveness(s.label, r.step)?;
                }
                samples.push(s);
            }
            let action_factor: Vec<f64> = samples
                .iter()
                .map(|s| if imbalance.action_weighting { weights[s.action] } else { 1.0 })
                .collect();

            let (preds, cache) = model.forward_train(&samples)?;
            let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
            let breakdown = compute_loss(&preds, &labels, &action_factor, imbalance)?;
            if !breakdown.backprop_loss.is_finite() {
                return Err(CrnError::Numeric(format!(
                    "non-finite loss at epoch {} iteration {}",
                    epoch + 1,
                    iteration + 1
                )));
            }
            let d_preds = loss_gradient(&preds, &labels, &breakdown);
            let grads = model.backward(&samples, &cache, &d_preds)?;
            model.update_running(&cache);

            let mut flat = model.flatten();
            adam.step(&mut flat, &grads)?;
            model.load_flat(&flat).map_err(|e| {
                CrnError::Numeric(format!(
                    "parameters became non-finite at epoch {} iteration {}: {}",
                    epoch + 1,
                    iteration + 1,
                    e
                ))
            })?;
            epoch_loss += breakdown.backprop_loss;
        }

        let val = if val_records.is_empty() {
            f64::NAN
        } else {
            mean_squared_error(model, &val_records)?
        };
        history.train_loss.push(epoch_loss / iterations as f64);
        history.val_loss.push(val);
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    Ok(TrainOutcome {
        history,
        train_clients: train_idx,
        val_clients: val_idx,
        test_clients: test_idx,
        action_weights: weights,
    })
}

/// Plain test-split MSE for a trained model.
pub fn test_mse<M: RewardModel>(model: &M, records: &[ClientRecord], test_idx: &[usize]) -> Result<f64> {
    let picked: Vec<ClientRecord> = test_idx
        .iter()
        .map(|i| records[*i].clone())
        .filter(|r| r.labeled_step_count() > 0)
        .collect();
    mean_squared_error(model, &picked)
}

//! Synthetic interaction world: a deterministic generator of client
//! records with a known ground-truth reward process, plus the reduced
//! baselines used for comparative tests. The generator reproduces the
//! skew structure of real action-response logs (action frequency skew,
//! sequence-length skew, reward sparsity, high-reward concentration)
//! and, for lag > 0, a reward that depends on the action taken `lag`
//! steps earlier, which no current-step-only model can capture.

pub mod baselines;

use serde::{Deserialize, Serialize};

use crate::domain::{
    ClientRecord, Dataset, DemographicSchema, Demographics, InteractionStep, RecordBounds,
};
use crate::error::{CrnError, Result};
use crate::numerics::{sigmoid, unit_hash, SplitMix64};

/// Which demographic quantity the reward reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemSignal {
    /// The mean demographic latent, which the generator also exposes as
    /// the first explicit feature.
    MeanLatent,
    /// A fixed hash table over one categorical field's values. Not
    /// exposed in the explicit features, so a model must discover it
    /// from the raw field.
    FieldTable { field: usize },
    /// A fixed hash table over the joint values of two categorical
    /// fields; requires learning a field interaction.
    PairTable { field_a: usize, field_b: usize },
}

/// Deterministic ground-truth reward: logistic in hand-set weights over
/// a lagged-action table, a demographic signal, and the current response
/// count, plus optional Gaussian noise supplied by the caller. Part of
/// the public API so every test can recompute labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    /// Steps back at which the true reward depends on a past action;
    /// zero makes the world Markovian.
    pub lag: usize,
    pub gain: f64,
    /// Per-action intercept, indices 1..=m (index 0 unused).
    pub bias: Vec<f64>,
    /// Per-action weight on the demographic signal, indices 1..=m.
    pub dem_weight: Vec<f64>,
    pub dem_signal: DemSignal,
    pub lag_weight: f64,
    pub resp_weight: f64,
    /// Noise standard deviation in score space.
    pub noise: f64,
    pub salt: u64,
}

/// Everything the oracle may read at one decision point.
#[derive(Debug, Clone)]
pub struct OracleContext<'a> {
    pub latent: f64,
    /// Raw categorical demographic values, for field-table signals.
    pub categorical: &'a [usize],
    /// Actions taken before the current step, a_1..a_{t-1}.
    pub history: &'a [usize],
    /// Current 1-based step t.
    pub step: usize,
    pub response_count: usize,
    pub response_vocab: usize,
}

/// Fixed [-1, 1] dependence on the action taken `lag` steps ago: a
/// dominant per-lag-action effect plus a (lag action, candidate action)
/// interaction component.
pub fn lag_signal(salt: u64, lag_action: usize, action: usize) -> f64 {
    let single = 2.0 * unit_hash(salt ^ 0x6C6167, lag_action as u64, u64::MAX) - 1.0;
    let pair = 2.0 * unit_hash(salt ^ 0x6C6167, lag_action as u64, action as u64) - 1.0;
    0.7 * single + 0.3 * pair
}

/// True reward in [0, 1]. `eps` is a standard-normal draw scaled by the
/// spec's noise level; pass 0.0 for the noiseless value.
pub fn oracle_reward(spec: &OracleSpec, ctx: &OracleContext<'_>, action: usize, eps: f64) -> f64 {
    let x_dem = match spec.dem_signal {
        DemSignal::MeanLatent => 2.0 * ctx.latent - 1.0,
        DemSignal::FieldTable { field } => {
            let value = ctx.categorical.get(field).copied().unwrap_or(0);
            2.0 * unit_hash(spec.salt ^ 0x666C64, field as u64, value as u64) - 1.0
        }
        DemSignal::PairTable { field_a, field_b } => {
            let a = ctx.categorical.get(field_a).copied().unwrap_or(0);
            let b = ctx.categorical.get(field_b).copied().unwrap_or(0);
            2.0 * unit_hash(spec.salt ^ 0x706169, a as u64, b as u64) - 1.0
        }
    };
    let x_lag = if spec.lag == 0 {
        0.0
    } else {
        let lag_action = if ctx.step > spec.lag { ctx.history[ctx.step - spec.lag - 1] } else { 0 };
        lag_signal(spec.salt, lag_action, action)
    };
    let x_resp = 2.0 * ctx.response_count as f64 / ctx.response_vocab as f64 - 1.0;
    let score = spec.bias[action]
        + spec.dem_weight[action] * x_dem
        + spec.lag_weight * x_lag
        + spec.resp_weight * x_resp
        + spec.noise * eps;
    sigmoid(spec.gain * score)
}

/// Constructive check that a lag > 0 oracle really depends on the action
/// at t - lag: probes histories differing only there.
pub fn verify_lag_dependence(spec: &OracleSpec, action_count: usize) -> bool {
    if spec.lag == 0 {
        return true;
    }
    let t = spec.lag + 2;
    let base: Vec<usize> = vec![1; t - 1];
    let mut other = base.clone();
    other[t - spec.lag - 1] = 2;
    let cats: Vec<usize> = Vec::new();
    let ctx_a = OracleContext {
        latent: 0.5,
        categorical: &cats,
        history: &base,
        step: t,
        response_count: 1,
        response_vocab: 4,
    };
    let ctx_b = OracleContext {
        latent: 0.5,
        categorical: &cats,
        history: &other,
        step: t,
        response_count: 1,
        response_vocab: 4,
    };
    (1..=action_count).any(|a| {
        (oracle_reward(spec, &ctx_a, a, 0.0) - oracle_reward(spec, &ctx_b, a, 0.0)).abs() > 1e-12
    })
}

/// How reward labels are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelMechanism {
    /// Pointwise oracle; the worlds used for dependence experiments.
    Oracle(OracleSpec),
    /// Per-action two-component mixture with quota-balanced high-reward
    /// events, spread evenly over each action's occurrences. Desk-scale
    /// datasets leave the rarest actions with under a hundred labels,
    /// where independent draws cannot hold a sub-percent proportion
    /// ordering; the balanced assignment reproduces the target ordering
    /// by construction.
    StratifiedMixture {
        /// Target marginal reward mean per action, indices 1..=m.
        means: Vec<f64>,
        /// Target share of labels >= 0.5 per action, indices 1..=m.
        high_proportions: Vec<f64>,
        /// Mean of the high component, in (0.5, 1).
        high_mean: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LengthDist {
    /// Uniform in lo..=hi.
    Band { lo: usize, hi: usize },
    /// Half the clients at 1..=4, 40% at 5..=8, 10% at 20..=60: median 4
    /// with the top decile owning around half of all interactions.
    HeavyTail,
}

impl LengthDist {
    fn draw(&self, rng: &mut SplitMix64) -> usize {
        match self {
            LengthDist::Band { lo, hi } => lo + rng.below(hi - lo + 1),
            LengthDist::HeavyTail => {
                let u = rng.next_f64();
                if u < 0.5 {
                    1 + rng.below(4)
                } else if u < 0.9 {
                    5 + rng.below(4)
                } else {
                    20 + rng.below(41)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub name: String,
    pub client_count: usize,
    pub action_count: usize,
    pub response_vocab: usize,
    pub schema: DemographicSchema,
    /// Target relative frequency per action, indices 1..=m sum to 1.
    pub action_frequencies: Vec<f64>,
    pub length: LengthDist,
    /// Probability each action enters a step's candidate set.
    pub candidate_rate: f64,
    pub labels: LabelMechanism,
    pub seed: u64,
}

pub const EXPLICIT_WIDTH: usize = 3;

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        if self.client_count == 0 || self.action_count == 0 || self.response_vocab == 0 {
            return Err(CrnError::Config("profile sizes must be positive".into()));
        }
        if self.action_frequencies.len() != self.action_count + 1 {
            return Err(CrnError::Config("action_frequencies must cover indices 0..=m".into()));
        }
        if self.action_frequencies[1..].iter().any(|f| *f <= 0.0) {
            return Err(CrnError::Config("action frequencies must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.candidate_rate) {
            return Err(CrnError::Config("candidate_rate must be in [0, 1]".into()));
        }
        match &self.labels {
            LabelMechanism::Oracle(spec) => {
                if spec.bias.len() != self.action_count + 1
                    || spec.dem_weight.len() != self.action_count + 1
                {
                    return Err(CrnError::Config("oracle vectors must cover indices 0..=m".into()));
                }
                if spec.noise < 0.0 {
                    return Err(CrnError::Config("noise must be >= 0".into()));
                }
            }
            LabelMechanism::StratifiedMixture { means, high_proportions, high_mean } => {
                if means.len() != self.action_count + 1
                    || high_proportions.len() != self.action_count + 1
                {
                    return Err(CrnError::Config("mixture targets must cover indices 0..=m".into()));
                }
                if means[1..].iter().any(|m| !(0.0..=1.0).contains(m)) {
                    return Err(CrnError::Config("target reward means must lie in [0, 1]".into()));
                }
                if high_proportions[1..].iter().any(|p| !(0.0..1.0).contains(p)) {
                    return Err(CrnError::Config("high proportions must lie in [0, 1)".into()));
                }
                if !(0.5..1.0).contains(high_mean) {
                    return Err(CrnError::Config("high_mean must lie in [0.5, 1)".into()));
                }
                for a in 1..=self.action_count {
                    let low = low_component_mean(means[a], high_proportions[a], *high_mean);
                    if !(0.0..0.5).contains(&low) {
                        return Err(CrnError::Config(format!(
                            "action {a}: mean {} and high proportion {} are not representable",
                            means[a], high_proportions[a]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> RecordBounds {
        RecordBounds {
            action_count: self.action_count,
            response_vocab: self.response_vocab,
            explicit_width: EXPLICIT_WIDTH,
            schema: self.schema.clone(),
        }
    }
}

/// Deterministic demographic latent: the mean of one fixed hash value
/// per categorical choice and one squashed value per numeric field. A
/// model can recover it from the raw fields; the generator also exposes
/// it as the first explicit feature.
pub fn demographic_latent(demographics: &Demographics, salt: u64) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for (k, v) in demographics.categorical.iter().enumerate() {
        total += unit_hash(salt ^ 0x64656D, k as u64, *v as u64);
        count += 1.0;
    }
    for x in &demographics.numeric {
        total += (0.5 + 0.2 * x).clamp(0.0, 1.0);
        count += 1.0;
    }
    if count == 0.0 {
        0.5
    } else {
        total / count
    }
}

fn low_component_mean(mean: f64, high_prop: f64, high_mean: f64) -> f64 {
    (mean - high_mean * high_prop) / (1.0 - high_prop)
}

/// Per-step response inclusion probability, tied to the previous action
/// so response sequences carry signal about the action history.
fn response_rate(salt: u64, prev_action: usize, code: usize) -> f64 {
    0.15 + 0.5 * unit_hash(salt ^ 0x72657370, prev_action as u64, code as u64)
}

struct ClientStructure {
    demographics: Demographics,
    latent: f64,
    /// Per step: (prev_action, responses, candidates, explicit).
    steps: Vec<(usize, Vec<usize>, Vec<usize>, Vec<f64>)>,
    /// Actions taken at steps 1..len-1.
    taken: Vec<usize>,
}

fn generate_structure(profile: &SynthProfile, client: usize, salt: u64) -> ClientStructure {
    let root = SplitMix64::new(profile.seed).split(client as u64);
    let mut demo_rng = root.split(1);
    let mut policy_rng = root.split(2);
    let mut resp_rng = root.split(3);

    let demographics = Demographics {
        categorical: profile
            .schema
            .categorical_cardinalities
            .iter()
            .map(|card| demo_rng.below(*card))
            .collect(),
        numeric: (0..profile.schema.numeric_count).map(|_| demo_rng.normal().clamp(-3.0, 3.0)).collect(),
    };
    let latent = demographic_latent(&demographics, salt);
    let length = profile.length.draw(&mut demo_rng);

    let m = profile.action_count;
    let mut steps = Vec::with_capacity(length);
    let mut taken = Vec::with_capacity(length.saturating_sub(1));
    let mut prev_action = 0usize;
    for i in 1..=length {
        let responses: Vec<usize> = (0..profile.response_vocab)
            .filter(|code| resp_rng.next_f64() < response_rate(salt, prev_action, *code))
            .collect();

        let mut candidates: Vec<usize> =
            (1..=m).filter(|_| policy_rng.next_f64() < profile.candidate_rate).collect();
        if candidates.is_empty() {
            candidates.push(1 + policy_rng.below(m));
        }

        let explicit = vec![
            latent,
            (i as f64 / 10.0).min(1.0),
            responses.len() as f64 / profile.response_vocab as f64,
        ];

        if i < length {
            let weights: Vec<f64> =
                candidates.iter().map(|a| profile.action_frequencies[*a]).collect();
            let chosen = candidates[policy_rng.weighted(&weights)];
            taken.push(chosen);
        }
        steps.push((prev_action, responses, candidates, explicit));
        prev_action = *taken.last().unwrap_or(&0);
    }
    ClientStructure { demographics, latent, steps, taken }
}

/// Quotas of high-reward labels per action: round(n * p) nudged so the
/// realized proportions are strictly ordered like the targets.
fn ordered_quotas(counts: &[usize], targets: &[f64]) -> Vec<usize> {
    let m = counts.len() - 1;
    let mut order: Vec<usize> = (1..=m).filter(|a| counts[*a] > 0).collect();
    order.sort_by(|&a, &b| targets[a].partial_cmp(&targets[b]).unwrap());
    let mut quotas = vec![0usize; m + 1];
    let mut prev_ratio = -1.0f64;
    for &a in &order {
        let n = counts[a];
        let mut q = (n as f64 * targets[a]).round() as usize;
        q = q.min(n);
        while (q as f64) / (n as f64) <= prev_ratio && q < n {
            q += 1;
        }
        quotas[a] = q;
        prev_ratio = q as f64 / n as f64;
    }
    quotas
}

/// Bresenham-style even spreading: the idx-th occurrence (0-based) of an
/// action with quota q of n is a high event iff the running quota
/// crosses an integer there.
fn quota_high(idx: usize, quota: usize, total: usize) -> bool {
    ((idx + 1) * quota) / total > (idx * quota) / total
}

/// Deterministic dataset generation. Same profile (including seed) twice
/// gives byte-identical datasets.
pub fn generate_dataset(profile: &SynthProfile) -> Result<Dataset> {
    profile.validate()?;
    let salt = profile.seed ^ 0x776F726C64;

    let structures: Vec<ClientStructure> =
        (0..profile.client_count).map(|c| generate_structure(profile, c, salt)).collect();

    // Labels.
    let mut labels: Vec<Vec<f64>> = Vec::with_capacity(structures.len());
    match &profile.labels {
        LabelMechanism::Oracle(spec) => {
            if spec.lag > 0 && !verify_lag_dependence(spec, profile.action_count) {
                return Err(CrnError::Config("oracle does not depend on the lagged action".into()));
            }
            for (c, s) in structures.iter().enumerate() {
                let mut noise_rng = SplitMix64::new(profile.seed).split(c as u64).split(4);
                let mut row = Vec::with_capacity(s.taken.len());
                for (t0, action) in s.taken.iter().enumerate() {
                    let t = t0 + 1;
                    let ctx = OracleContext {
                        latent: s.latent,
                        categorical: &s.demographics.categorical,
                        history: &s.taken[..t0],
                        step: t,
                        response_count: s.steps[t0].1.len(),
                        response_vocab: profile.response_vocab,
                    };
                    let eps = if spec.noise > 0.0 { noise_rng.normal() } else { 0.0 };
                    row.push(oracle_reward(spec, &ctx, *action, eps));
                }
                labels.push(row);
            }
        }
        LabelMechanism::StratifiedMixture { means, high_proportions, high_mean } => {
            let mut counts = vec![0usize; profile.action_count + 1];
            for s in &structures {
                for a in &s.taken {
                    counts[*a] += 1;
                }
            }
            let quotas = ordered_quotas(&counts, high_proportions);
            let mut seen = vec![0usize; profile.action_count + 1];
            for (c, s) in structures.iter().enumerate() {
                let mut value_rng = SplitMix64::new(profile.seed).split(c as u64).split(4);
                let mut row = Vec::with_capacity(s.taken.len());
                for a in &s.taken {
                    let idx = seen[*a];
                    seen[*a] += 1;
                    let u = value_rng.next_f64();
                    let reward = if quota_high(idx, quotas[*a], counts[*a]) {
                        // Uniform around the high component mean.
                        (high_mean - 0.2) + 0.4 * u
                    } else {
                        let low = low_component_mean(means[*a], high_proportions[*a], *high_mean);
                        (low * (0.5 + u)).min(0.499)
                    };
                    row.push(reward.clamp(0.0, 1.0));
                }
                labels.push(row);
            }
        }
    }

    let records: Vec<ClientRecord> = structures
        .into_iter()
        .enumerate()
        .map(|(c, s)| {
            let len = s.steps.len();
            let steps: Vec<InteractionStep> = s
                .steps
                .into_iter()
                .enumerate()
                .map(|(i0, (prev_action, responses, candidates, explicit))| InteractionStep {
                    index: i0 + 1,
                    prev_action,
                    responses,
                    reward: if i0 + 1 < len { Some(labels[c][i0]) } else { None },
                    candidates,
                    explicit,
                })
                .collect();
            ClientRecord { client_id: c as u64, demographics: s.demographics, steps }
        })
        .collect();

    Ok(Dataset { header: profile.bounds(), records })
}

// ---------------------------------------------------------------------------
// Named profiles.
// ---------------------------------------------------------------------------

fn default_schema() -> DemographicSchema {
    DemographicSchema { categorical_cardinalities: vec![5, 4], numeric_count: 2 }
}

fn spread_bias(m: usize, salt: u64, scale: f64) -> Vec<f64> {
    let mut bias = vec![0.0; m + 1];
    for (a, b) in bias.iter_mut().enumerate().skip(1) {
        *b = scale * (2.0 * unit_hash(salt ^ 0x62696173, a as u64, 0) - 1.0);
    }
    bias
}

/// Dependence world: near-uniform actions, reward coupled to the action
/// taken `lag` steps earlier.
pub fn profile_lag(lag: usize, clients: usize, seed: u64) -> SynthProfile {
    let m = 6;
    let freqs = vec![0.0, 0.20, 0.18, 0.17, 0.16, 0.15, 0.14];
    SynthProfile {
        name: format!("lag{lag}"),
        client_count: clients,
        action_count: m,
        response_vocab: 6,
        schema: default_schema(),
        action_frequencies: freqs,
        length: LengthDist::Band { lo: 4, hi: 9 },
        candidate_rate: 0.75,
        labels: LabelMechanism::Oracle(OracleSpec {
            lag,
            gain: 1.4,
            bias: spread_bias(m, seed ^ 0x1A, 0.25),
            dem_weight: vec![0.55; m + 1],
            dem_signal: DemSignal::MeanLatent,
            lag_weight: 1.0,
            resp_weight: 0.35,
            noise: 0.22,
            salt: 0x0513_C0DE,
        }),
        seed,
    }
}

/// One dominant action and one rare (1%) action whose high rewards hinge
/// on a per-category table of the first demographic field. The table is
/// absent from the explicit features, so it must be learned from the
/// rare action's few samples.
pub fn profile_skewed(clients: usize, seed: u64) -> SynthProfile {
    let m = 6;
    let mut bias = vec![-2.3; m + 1];
    bias[0] = 0.0;
    bias[1] = 0.3;
    // Common actions lean the opposite way on the same field, so a
    // plainly trained shared representation works against the rare
    // action's pattern.
    let mut dem_weight = vec![-0.45; m + 1];
    dem_weight[0] = 0.0;
    dem_weight[1] = 1.8;
    SynthProfile {
        name: "skewed".into(),
        client_count: clients,
        action_count: m,
        response_vocab: 6,
        schema: default_schema(),
        action_frequencies: vec![0.0, 0.01, 0.55, 0.13, 0.12, 0.10, 0.09],
        length: LengthDist::Band { lo: 2, hi: 2 },
        candidate_rate: 0.9,
        labels: LabelMechanism::Oracle(OracleSpec {
            lag: 0,
            gain: 1.6,
            bias,
            dem_weight,
            dem_signal: DemSignal::PairTable { field_a: 0, field_b: 1 },
            lag_weight: 0.0,
            resp_weight: 0.15,
            noise: 0.12,
            salt: 0x5EED_5EED,
        }),
        seed,
    }
}

/// Marginals scaled from the published ten-action reward distribution:
/// counts, reward means and high-reward proportions per action, heavy
/// sequence-length tail with median 4.
pub fn profile_table1(clients: usize, seed: u64) -> SynthProfile {
    let counts =
        [1225.0, 390.0, 13592.0, 1020.0, 1384.0, 62263.0, 15403.0, 3289.0, 904.0, 12044.0];
    let total: f64 = counts.iter().sum();
    let mut freqs = vec![0.0];
    freqs.extend(counts.iter().map(|c| c / total));
    let mut means = vec![0.0];
    means.extend_from_slice(&[0.065, 0.132, 0.125, 0.229, 0.057, 0.223, 0.186, 0.097, 0.311, 0.159]);
    let mut props = vec![0.0];
    props.extend_from_slice(&[
        0.0242, 0.1175, 0.0753, 0.2750, 0.0328, 0.2585, 0.1767, 0.0665, 0.4059, 0.1201,
    ]);
    SynthProfile {
        name: "table1".into(),
        client_count: clients,
        action_count: 10,
        response_vocab: 8,
        schema: DemographicSchema { categorical_cardinalities: vec![6, 5, 3], numeric_count: 2 },
        action_frequencies: freqs,
        length: LengthDist::HeavyTail,
        candidate_rate: 0.8,
        labels: LabelMechanism::StratifiedMixture {
            means,
            high_proportions: props,
            high_mean: 0.7,
        },
        seed,
    }
}

pub fn profile_by_name(name: &str, clients: usize, seed: u64) -> Result<SynthProfile> {
    match name {
        "default" | "lag3" => Ok(profile_lag(3, clients, seed)),
        "lag0" => Ok(profile_lag(0, clients, seed)),
        "table1" => Ok(profile_table1(clients, seed)),
        "skewed" => Ok(profile_skewed(clients, seed)),
        other => Err(CrnError::Config(format!(
            "unknown profile '{other}' (expected default, lag0, lag3, table1, skewed)"
        ))),
    }
}

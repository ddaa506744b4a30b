//! Data model for clients, actions, responses, rewards and candidate
//! sets. Records are immutable after construction and freely shareable.

use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};

/// Declared layout of the demographic fields. The concrete fields of the
/// source system are opaque; a dataset only declares categorical
/// cardinalities and how many numeric fields follow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicSchema {
    pub categorical_cardinalities: Vec<usize>,
    pub numeric_count: usize,
}

impl DemographicSchema {
    /// Width after one-hot encoding categoricals and appending numerics.
    pub fn encoded_width(&self) -> usize {
        self.categorical_cardinalities.iter().sum::<usize>() + self.numeric_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub categorical: Vec<usize>,
    pub numeric: Vec<f64>,
}

impl Demographics {
    pub fn matches(&self, schema: &DemographicSchema) -> bool {
        self.categorical.len() == schema.categorical_cardinalities.len()
            && self
                .categorical
                .iter()
                .zip(&schema.categorical_cardinalities)
                .all(|(v, card)| v < card)
            && self.numeric.len() == schema.numeric_count
    }
}

/// Action vocabulary: ids 1..=m are real actions, id 0 is the reserved
/// "no prior action" token used at step 1. Frequencies are training-set
/// relative frequencies of taken actions (index 0 unused).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCatalog {
    pub action_count: usize,
    pub frequencies: Vec<f64>,
}

/// The id used in the prior-action slot at step 1, where no action
/// exists yet.
pub const NO_ACTION: usize = 0;

impl ActionCatalog {
    pub fn with_frequencies(frequencies_by_action: &[f64]) -> Result<Self> {
        if frequencies_by_action.iter().any(|f| *f < 0.0 || !f.is_finite()) {
            return Err(CrnError::Config("action frequencies must be finite and >= 0".into()));
        }
        let mut frequencies = vec![0.0];
        frequencies.extend_from_slice(frequencies_by_action);
        Ok(ActionCatalog { action_count: frequencies_by_action.len(), frequencies })
    }

    /// Relative frequency of each taken action over the given records.
    pub fn from_records(action_count: usize, records: &[ClientRecord]) -> Self {
        let mut counts = vec![0u64; action_count + 1];
        let mut total = 0u64;
        for record in records {
            for (action, _label, _t) in record.labeled_steps() {
                if action >= 1 && action <= action_count {
                    counts[action] += 1;
                    total += 1;
                }
            }
        }
        let frequencies = counts
            .iter()
            .map(|c| if total == 0 { 0.0 } else { *c as f64 / total as f64 })
            .collect();
        ActionCatalog { action_count, frequencies }
    }

    pub fn contains(&self, action: usize) -> bool {
        action >= 1 && action <= self.action_count
    }
}

/// One interaction step. `prev_action` is the action taken before this
/// step (NO_ACTION at step 1); `responses` are the client's responses to
/// it; `reward` labels the action taken *at* this step and is absent on
/// the final open step, where no action has been chosen yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionStep {
    pub index: usize,
    pub prev_action: usize,
    pub responses: Vec<usize>,
    pub reward: Option<f64>,
    pub candidates: Vec<usize>,
    pub explicit: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: u64,
    pub demographics: Demographics,
    pub steps: Vec<InteractionStep>,
}

impl ClientRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// (action taken at step t, its reward label, t) for every closed
    /// step. The action taken at step t is recorded as step t+1's
    /// prev_action.
    pub fn labeled_steps(&self) -> impl Iterator<Item = (usize, f64, usize)> + '_ {
        (1..self.steps.len()).filter_map(move |i| {
            let action = self.steps[i].prev_action;
            self.steps[i - 1].reward.map(|r| (action, r, i))
        })
    }

    pub fn labeled_step_count(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

/// The client tuple at a given step: demographics, the t-1 prior actions,
/// the t response sets, and the explicit features observed at t.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTuple {
    pub client_id: u64,
    pub step: usize,
    pub demographics: Demographics,
    pub actions: Vec<usize>,
    pub response_sets: Vec<Vec<usize>>,
    pub explicit: Vec<f64>,
}

/// One validation finding; records are checked exhaustively rather than
/// failing on the first problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub client_id: u64,
    pub step: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.step {
            Some(s) => write!(f, "client {} step {}: {}", self.client_id, s, self.message),
            None => write!(f, "client {}: {}", self.client_id, self.message),
        }
    }
}

/// Bounds a record is validated against, taken from the dataset header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordBounds {
    pub action_count: usize,
    pub response_vocab: usize,
    pub explicit_width: usize,
    pub schema: DemographicSchema,
}

/// Checks every record invariant and returns all violations (empty means
/// valid). Never mutates.
pub fn validate_record(record: &ClientRecord, bounds: &RecordBounds) -> Vec<Violation> {
    let mut out = Vec::new();
    let cid = record.client_id;
    let push = |out: &mut Vec<Violation>, step: Option<usize>, message: String| {
        out.push(Violation { client_id: cid, step, message });
    };

    if record.steps.is_empty() {
        push(&mut out, None, "record has no steps; length must be >= 1".into());
        return out;
    }
    if !record.demographics.matches(&bounds.schema) {
        push(&mut out, None, "demographics do not match the declared schema".into());
    }

    let last = record.steps.len();
    for (pos, step) in record.steps.iter().enumerate() {
        let expect = pos + 1;
        let s = Some(step.index);
        if step.index != expect {
            push(
                &mut out,
                Some(expect),
                format!("step index {} out of order or gapped (expected {})", step.index, expect),
            );
        }
        if expect == 1 {
            if step.prev_action != NO_ACTION {
                push(&mut out, s, format!("prev_action must be 0 at step 1, got {}", step.prev_action));
            }
        } else if step.prev_action < 1 || step.prev_action > bounds.action_count {
            push(
                &mut out,
                s,
                format!("prev_action {} outside catalog 1..={}", step.prev_action, bounds.action_count),
            );
        }
        let mut seen = std::collections::BTreeSet::new();
        for &code in &step.responses {
            if code >= bounds.response_vocab {
                push(&mut out, s, format!("response code {} >= vocabulary size {}", code, bounds.response_vocab));
            }
            if !seen.insert(code) {
                push(&mut out, s, format!("duplicate response code {}", code));
            }
        }
        match step.reward {
            Some(r) if expect == last => {
                push(&mut out, s, format!("reward {} present on the final open step", r));
            }
            Some(r) if !(0.0..=1.0).contains(&r) => {
                push(&mut out, s, format!("reward {} outside [0, 1]", r));
            }
            None if expect != last => {
                push(&mut out, s, "reward missing on a closed step".into());
            }
            _ => {}
        }
        if step.candidates.is_empty() {
            push(&mut out, s, "candidate set is empty".into());
        }
        let mut cand_seen = std::collections::BTreeSet::new();
        for &a in &step.candidates {
            if a < 1 || a > bounds.action_count {
                push(&mut out, s, format!("candidate action {} outside catalog 1..={}", a, bounds.action_count));
            }
            if !cand_seen.insert(a) {
                push(&mut out, s, format!("duplicate candidate action {}", a));
            }
        }
        if step.explicit.len() != bounds.explicit_width {
            push(
                &mut out,
                s,
                format!("explicit feature width {} != declared {}", step.explicit.len(), bounds.explicit_width),
            );
        }
        if step.explicit.iter().any(|v| !v.is_finite()) {
            push(&mut out, s, "explicit features must be finite".into());
        }
        // The action actually taken at this step must respect the step's
        // candidate constraint.
        if expect < last {
            let taken = record.steps[pos + 1].prev_action;
            if !step.candidates.contains(&taken) {
                push(&mut out, s, format!("taken action {} not in this step's candidate set", taken));
            }
        }
    }
    out
}

/// A dataset: declared bounds plus the records themselves. Serialization
/// lives in the io module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub header: RecordBounds,
    pub records: Vec<ClientRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for record in &self.records {
            out.extend(validate_record(record, &self.header));
        }
        out
    }

    pub fn labeled_step_count(&self) -> usize {
        self.records.iter().map(|r| r.labeled_step_count()).sum()
    }
}

/// Slices the record strictly before/at step t: t-1 prior actions and t
/// response sets. Demographics are copied unchanged.
pub fn build_client_tuple(record: &ClientRecord, t: usize) -> Result<ClientTuple> {
    if t < 1 || t > record.steps.len() {
        return Err(CrnError::Range(format!(
            "step {} outside 1..={} for client {}",
            t,
            record.steps.len(),
            record.client_id
        )));
    }
    let actions = (2..=t).map(|i| record.steps[i - 1].prev_action).collect();
    let response_sets = (1..=t).map(|i| record.steps[i - 1].responses.clone()).collect();
    Ok(ClientTuple {
        client_id: record.client_id,
        step: t,
        demographics: record.demographics.clone(),
        actions,
        response_sets,
        explicit: record.steps[t - 1].explicit.clone(),
    })
}

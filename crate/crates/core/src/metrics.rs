//! Evaluation metrics: per-action squared error with count-weighted and
//! unweighted averages, per-action precision at the 0.5 high-reward
//! threshold, top-decile mean true reward, and the reward lift of the
//! model's best-ranked decile over the logged policy.

use serde::{Deserialize, Serialize};

use crate::domain::ClientRecord;
use crate::error::{CrnError, Result};
use crate::model::{RewardModel, TrainSample};

/// One scored evaluation point: the model's prediction, the true reward
/// for that (context, action), the action id, and the reward the logged
/// policy actually obtained at that step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub prediction: f64,
    pub label: f64,
    pub action: usize,
    pub logged_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMetrics {
    pub action: usize,
    pub count: usize,
    pub mse: f64,
    /// Share of the truly high-reward samples (label >= 0.5) that the
    /// model also predicts as high-reward; absent when the action has no
    /// truly high samples.
    pub precision: Option<f64>,
    pub predicted_positives: usize,
    pub true_positives: usize,
    pub high_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_action: Vec<ActionMetrics>,
    /// Count-weighted average of per-action MSEs (equals the plain
    /// sample MSE).
    pub total_avg_mse: f64,
    /// Unweighted average over actions that appear.
    pub action_avg_mse: f64,
    pub top_decile_reward: f64,
    pub mean_logged_reward: f64,
    /// top_decile_reward / mean_logged_reward; absent when the logged
    /// policy's mean reward is zero.
    pub reward_lift: Option<f64>,
    pub sample_count: usize,
}

pub const HIGH_REWARD_THRESHOLD: f64 = 0.5;

pub fn compute_metrics(samples: &[EvalSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(CrnError::Data("no samples to evaluate".into()));
    }
    if samples.iter().any(|s| !(0.0..=1.0).contains(&s.label)) {
        return Err(CrnError::Data("labels must lie in [0, 1]".into()));
    }

    let max_action = samples.iter().map(|s| s.action).max().unwrap_or(0);
    let mut count = vec![0usize; max_action + 1];
    let mut sq_sum = vec![0.0f64; max_action + 1];
    let mut predicted_pos = vec![0usize; max_action + 1];
    let mut true_pos = vec![0usize; max_action + 1];
    let mut high_count = vec![0usize; max_action + 1];
    for s in samples {
        count[s.action] += 1;
        sq_sum[s.action] += (s.prediction - s.label) * (s.prediction - s.label);
        let predicted_high = s.prediction >= HIGH_REWARD_THRESHOLD;
        if predicted_high {
            predicted_pos[s.action] += 1;
        }
        if s.label >= HIGH_REWARD_THRESHOLD {
            high_count[s.action] += 1;
            if predicted_high {
                true_pos[s.action] += 1;
            }
        }
    }

    let mut per_action = Vec::new();
    let mut weighted = 0.0;
    let mut unweighted = 0.0;
    let mut present = 0usize;
    for action in 0..=max_action {
        if count[action] == 0 {
            continue;
        }
        let mse = sq_sum[action] / count[action] as f64;
        weighted += sq_sum[action];
        unweighted += mse;
        present += 1;
        per_action.push(ActionMetrics {
            action,
            count: count[action],
            mse,
            precision: if high_count[action] > 0 {
                Some(true_pos[action] as f64 / high_count[action] as f64)
            } else {
                None
            },
            predicted_positives: predicted_pos[action],
            true_positives: true_pos[action],
            high_count: high_count[action],
        });
    }
    let total_avg_mse = weighted / samples.len() as f64;
    let action_avg_mse = unweighted / present as f64;

    // Top decile by predicted reward, ties broken by sample index.
    let n_top = samples.len().div_ceil(10);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        samples[b]
            .prediction
            .partial_cmp(&samples[a].prediction)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top_decile_reward =
        order[..n_top].iter().map(|i| samples[*i].label).sum::<f64>() / n_top as f64;

    let mean_logged_reward =
        samples.iter().map(|s| s.logged_reward).sum::<f64>() / samples.len() as f64;
    let reward_lift =
        if mean_logged_reward > 0.0 { Some(top_decile_reward / mean_logged_reward) } else { None };

    Ok(MetricsReport {
        per_action,
        total_avg_mse,
        action_avg_mse,
        top_decile_reward,
        mean_logged_reward,
        reward_lift,
        sample_count: samples.len(),
    })
}

/// Scores every labeled step of the records with the model (inference
/// mode, logged actions) and computes the report. Predictions never see
/// the labels.
pub fn evaluate_model<M: RewardModel>(model: &M, records: &[ClientRecord]) -> Result<MetricsReport> {
    let samples = score_records(model, records)?;
    compute_metrics(&samples)
}

pub fn score_records<M: RewardModel>(model: &M, records: &[ClientRecord]) -> Result<Vec<EvalSample>> {
    let mut samples = Vec::new();
    for record in records {
        for t in 1..record.steps.len() {
            let s = TrainSample::from_record(record, t)?;
            let prediction = model.predict(&s.tuple, s.action)?;
            samples.push(EvalSample {
                prediction,
                label: s.label,
                action: s.action,
                logged_reward: s.label,
            });
        }
    }
    Ok(samples)
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,count,mse,precision,predicted_positives\n");
        for a in &self.per_action {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                a.action,
                a.count,
                a.mse,
                a.precision.map(|p| p.to_string()).unwrap_or_default(),
                a.predicted_positives
            ));
        }
        out.push_str(&format!(
            "total_avg,{},{},,\naction_avg,{},{},,\n",
            self.sample_count, self.total_avg_mse, self.per_action.len(), self.action_avg_mse
        ));
        out.push_str(&format!("top_decile_reward,,{},,\n", self.top_decile_reward));
        out.push_str(&format!("mean_logged_reward,,{},,\n", self.mean_logged_reward));
        out.push_str(&format!(
            "reward_lift,,{},,\n",
            self.reward_lift.map(|l| l.to_string()).unwrap_or_default()
        ));
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6} {:>8} {:>10} {:>10} {:>8}\n",
            "action", "count", "mse", "precision", "pred+"
        ));
        for a in &self.per_action {
            out.push_str(&format!(
                "{:>6} {:>8} {:>10.5} {:>10} {:>8}\n",
                format!("A{}", a.action),
                a.count,
                a.mse,
                a.precision.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into()),
                a.predicted_positives
            ));
        }
        out.push_str(&format!(
            "total_avg mse {:.6}  action_avg mse {:.6}\n",
            self.total_avg_mse, self.action_avg_mse
        ));
        out.push_str(&format!(
            "top-decile reward {:.4}  logged mean {:.4}  lift {}\n",
            self.top_decile_reward,
            self.mean_logged_reward,
            self.reward_lift.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into())
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(prediction: f64, label: f64, action: usize) -> EvalSample {
        EvalSample { prediction, label, action, logged_reward: label }
    }

    #[test]
    fn perfect_predictor_zero_mse_and_unit_precision() {
        let samples = vec![s(0.8, 0.8, 1), s(0.2, 0.2, 1), s(0.9, 0.9, 2)];
        let report = compute_metrics(&samples).unwrap();
        for a in &report.per_action {
            assert_eq!(a.mse, 0.0);
            if a.predicted_positives > 0 {
                assert_eq!(a.precision, Some(1.0));
            }
        }
        assert_eq!(report.total_avg_mse, 0.0);
    }

    #[test]
    fn weighted_and_unweighted_averages() {
        // Two actions with per-action MSEs 0.1 (100 samples) and 0.3
        // (300 samples): action_avg 0.2, total_avg 0.25.
        let mut samples = Vec::new();
        for _ in 0..100 {
            samples.push(s(0.1f64.sqrt(), 0.0, 1));
        }
        for _ in 0..300 {
            samples.push(s(0.3f64.sqrt(), 0.0, 2));
        }
        let report = compute_metrics(&samples).unwrap();
        assert!((report.action_avg_mse - 0.2).abs() < 1e-12);
        assert!((report.total_avg_mse - 0.25).abs() < 1e-12);

        // The count-weighted identity is recomputable from per-action rows.
        let recomputed: f64 = report
            .per_action
            .iter()
            .map(|a| a.mse * a.count as f64)
            .sum::<f64>()
            / report.sample_count as f64;
        assert!((recomputed - report.total_avg_mse).abs() < 1e-12);
    }

    #[test]
    fn constant_predictions_give_first_decile_by_index() {
        // Ties broken by index, so the decile is arbitrary; with equal
        // labels its mean equals the overall mean true reward.
        let samples: Vec<EvalSample> = (0..40).map(|_| s(0.4, 0.3, 1)).collect();
        let report = compute_metrics(&samples).unwrap();
        assert_eq!(report.top_decile_reward, 0.3);
        let overall = 0.3;
        assert_eq!(report.top_decile_reward, overall);
    }

    #[test]
    fn top_decile_selects_highest_predictions() {
        let mut samples: Vec<EvalSample> = (0..18).map(|_| s(0.1, 0.0, 1)).collect();
        samples.push(s(0.9, 1.0, 1));
        samples.push(s(0.8, 0.5, 1));
        let report = compute_metrics(&samples).unwrap();
        // 20 samples -> decile of 2 -> labels 1.0 and 0.5.
        assert!((report.top_decile_reward - 0.75).abs() < 1e-12);
        let lift = report.reward_lift.unwrap();
        let logged = samples.iter().map(|x| x.logged_reward).sum::<f64>() / 20.0;
        assert!((lift - 0.75 / logged).abs() < 1e-12);
    }

    #[test]
    fn precision_is_share_of_true_highs_predicted_high() {
        // Two truly high samples, one of them flagged high -> 0.5.
        let samples = vec![s(0.7, 0.9, 1), s(0.6, 0.1, 1), s(0.2, 0.9, 1)];
        let report = compute_metrics(&samples).unwrap();
        let a1 = &report.per_action[0];
        assert_eq!(a1.predicted_positives, 2);
        assert_eq!(a1.high_count, 2);
        assert_eq!(a1.true_positives, 1);
        assert_eq!(a1.precision, Some(0.5));
    }

    #[test]
    fn no_true_highs_gives_absent_precision() {
        let samples = vec![s(0.9, 0.2, 3), s(0.8, 0.3, 3)];
        let report = compute_metrics(&samples).unwrap();
        assert_eq!(report.per_action[0].precision, None);
    }

    #[test]
    fn empty_input_is_data_error() {
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn out_of_bound_labels_rejected() {
        assert!(compute_metrics(&[s(0.5, 1.5, 1)]).is_err());
    }
}

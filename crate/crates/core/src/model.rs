//! Full model assembly: embeddings + demographic encoder + coupled
//! recurrent unit + fusion + residual reward head, with one flat named
//! parameter store, a batched training forward/backward, and the
//! whole-network gradient check.

use serde::{Deserialize, Serialize};

use crate::cru::{unroll, unroll_backward, CruCell, CruState, StepCache};
use crate::domain::{build_client_tuple, ClientRecord, ClientTuple, DemographicSchema, Demographics};
use crate::encoder::{
    encode_demographics, EncoderParams, EncoderStats, ModelDims, Standardizer, StateVector,
};
use crate::error::{CrnError, Result};
use crate::head::{HeadStats, RewardHeadParams};
use crate::layers::{Mlp3Cache, BN_MOMENTUM};
use crate::numerics::gradcheck::{finite_diff_check, GradCheckReport};
use crate::numerics::{Matrix, SplitMix64};

/// One resolved training sample: the client tuple at step t, the action
/// taken there, and its (possibly adjusted) reward label.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub tuple: ClientTuple,
    pub action: usize,
    pub label: f64,
}

impl TrainSample {
    pub fn from_record(record: &ClientRecord, t: usize) -> Result<Self> {
        if t + 1 > record.steps.len() {
            return Err(CrnError::Range(format!("step {t} is not a closed step")));
        }
        let label = record.steps[t - 1].reward.ok_or_else(|| {
            CrnError::Data(format!("client {} step {} has no reward label", record.client_id, t))
        })?;
        Ok(TrainSample {
            tuple: build_client_tuple(record, t)?,
            action: record.steps[t].prev_action,
            label,
        })
    }
}

/// Named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Interface shared by the full model and the reduced baselines so the
/// training loop is identical for all of them.
pub trait RewardModel {
    type Cache;

    fn kind(&self) -> &'static str;
    /// Installs the numeric-demographic standardization fitted on the
    /// training split.
    fn set_standardizer(&mut self, s: Standardizer);
    fn forward_train(&self, samples: &[TrainSample]) -> Result<(Vec<f64>, Self::Cache)>;
    /// Accumulates parameter gradients for the batch and returns them as
    /// one flat vector aligned with `param_layout`.
    fn backward(&self, samples: &[TrainSample], cache: &Self::Cache, d_preds: &[f64]) -> Result<Vec<f64>>;
    fn update_running(&mut self, cache: &Self::Cache);
    fn predict(&self, tuple: &ClientTuple, action: usize) -> Result<f64>;
    fn flatten(&self) -> Vec<f64>;
    fn load_flat(&mut self, flat: &[f64]) -> Result<()>;
    fn param_layout(&self) -> Vec<ParamSpec>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrnParams {
    pub cru: CruCell,
    pub enc: EncoderParams,
    pub head: RewardHeadParams,
}

impl CrnParams {
    pub fn for_each(&self, f: &mut impl FnMut(String, &Matrix)) {
        self.cru.for_each(&mut |name, m| f(name.to_string(), m));
        self.enc.for_each(f);
        self.head.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Matrix)) {
        self.cru.for_each_mut(&mut |name, m| f(name.to_string(), m));
        self.enc.for_each_mut(f);
        self.head.for_each_mut(f);
    }

    pub fn zeroed(&self) -> CrnParams {
        let mut g = self.clone();
        g.for_each_mut(&mut |_, m| m.fill(0.0));
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrnStats {
    pub enc: EncoderStats,
    pub head: HeadStats,
}

/// Everything the backward pass needs from one batched forward pass.
pub struct CrnCache {
    dem_cache: Mlp3Cache,
    seq: Vec<SeqCache>,
    imp_in: Matrix,
    exp_in: Matrix,
    fusion_cache: Mlp3Cache,
    head_cache: crate::head::HeadCache,
}

struct SeqCache {
    action_ids: Vec<usize>,
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrnModel {
    pub dims: ModelDims,
    pub action_count: usize,
    pub response_vocab: usize,
    pub explicit_width: usize,
    pub schema: DemographicSchema,
    pub standardizer: Standardizer,
    pub params: CrnParams,
    pub stats: CrnStats,
}

impl CrnModel {
    pub fn new(
        dims: ModelDims,
        action_count: usize,
        response_vocab: usize,
        explicit_width: usize,
        schema: DemographicSchema,
        seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::new(seed).split(0x6D6F64656C);
        let dem_width = schema.encoded_width();
        let enc = EncoderParams::init(&dims, action_count, response_vocab, dem_width, explicit_width, &mut rng);
        let cru = CruCell::init(dims.n_a, dims.n_o, &mut rng);
        let head = RewardHeadParams::init(dims.head_width(), &mut rng);
        let stats = CrnStats { enc: enc.fresh_stats(), head: head.fresh_stats() };
        let standardizer = Standardizer::identity(schema.numeric_count);
        CrnModel {
            dims,
            action_count,
            response_vocab,
            explicit_width,
            schema,
            standardizer,
            params: CrnParams { cru, enc, head },
            stats,
        }
    }

    pub fn set_standardizer(&mut self, s: Standardizer) {
        self.standardizer = s;
    }

    fn dem_row(&self, demographics: &Demographics) -> Result<Vec<f64>> {
        encode_demographics(&self.schema, &self.standardizer, demographics)
    }

    /// Aligned per-step inputs for the recurrent cell: step i consumes
    /// the embedding of the action before it (the no-action token at
    /// i = 1) and the encoding of the step's response set.
    fn cru_inputs(&self, tuple: &ClientTuple) -> Result<(Vec<usize>, Vec<(Vec<f64>, Vec<f64>)>)> {
        let t = tuple.step;
        if tuple.actions.len() + 1 != t || tuple.response_sets.len() != t {
            return Err(CrnError::Consistency(format!(
                "tuple at step {} has {} actions / {} response sets",
                t,
                tuple.actions.len(),
                tuple.response_sets.len()
            )));
        }
        let mut ids = Vec::with_capacity(t);
        let mut inputs = Vec::with_capacity(t);
        for i in 1..=t {
            let a_id = if i == 1 { 0 } else { tuple.actions[i - 2] };
            let a_in = self.params.enc.embed_action(a_id)?.to_vec();
            let o_in = self.params.enc.encode_responses(&tuple.response_sets[i - 1])?;
            ids.push(a_id);
            inputs.push((a_in, o_in));
        }
        Ok((ids, inputs))
    }

    /// Inference-mode client state vector s_t.
    pub fn encode_client(&self, tuple: &ClientTuple) -> Result<StateVector> {
        let dem = self.dem_row(&tuple.demographics)?;
        let dem_x = Matrix::from_vec(1, dem.len(), dem)?;
        let o0 = self.params.enc.dem.forward_infer(&self.stats.enc.dem, &dem_x);
        let init = CruState { action: vec![0.0; self.dims.n_a], response: o0.row(0).to_vec() };
        let (_, inputs) = self.cru_inputs(tuple)?;
        let (final_state, _) = unroll(&self.params.cru, &inputs, &init)?;

        let mut imp_in = final_state.action.clone();
        imp_in.extend_from_slice(&final_state.response);
        let imp_x = Matrix::from_vec(1, imp_in.len(), imp_in)?;
        let s_imp = self.params.enc.s_imp.forward(&imp_x);
        if tuple.explicit.len() != self.explicit_width {
            return Err(CrnError::Schema(format!(
                "explicit feature width {} != declared {}",
                tuple.explicit.len(),
                self.explicit_width
            )));
        }
        let exp_x = Matrix::from_vec(1, tuple.explicit.len(), tuple.explicit.clone())?;
        let s_exp = self.params.enc.s_exp.forward(&exp_x);
        let mut fusion_in = s_imp.row(0).to_vec();
        fusion_in.extend_from_slice(s_exp.row(0));
        let fusion_x = Matrix::from_vec(1, fusion_in.len(), fusion_in)?;
        let s_t = self.params.enc.fusion.forward_infer(&self.stats.enc.fusion, &fusion_x);
        Ok(StateVector { client_id: tuple.client_id, step: tuple.step, values: s_t.row(0).to_vec() })
    }

    /// Estimated reward of taking `action` in the state described by the
    /// tuple; inference mode, deterministic, strictly inside (0, 1).
    pub fn predict_reward(&self, tuple: &ClientTuple, action: usize) -> Result<f64> {
        if action < 1 || action > self.action_count {
            return Err(CrnError::Range(format!(
                "action {} outside catalog 1..={}",
                action, self.action_count
            )));
        }
        let state = self.encode_client(tuple)?;
        let mut head_in = state.values;
        head_in.extend_from_slice(self.params.enc.embed_action(action)?);
        let x = Matrix::from_vec(1, head_in.len(), head_in)?;
        let preds = self.params.head.forward_infer(&self.stats.head, &x);
        Ok(preds[0])
    }
}


impl RewardModel for CrnModel {
    type Cache = CrnCache;

    fn kind(&self) -> &'static str {
        "crn"
    }

    fn set_standardizer(&mut self, s: Standardizer) {
        self.standardizer = s;
    }

    fn forward_train(&self, samples: &[TrainSample]) -> Result<(Vec<f64>, CrnCache)> {
        let n = samples.len();
        if n == 0 {
            return Err(CrnError::Data("empty batch".into()));
        }
        let dem_width = self.schema.encoded_width();
        let mut dem_x = Matrix::zeros(n, dem_width);
        for (i, s) in samples.iter().enumerate() {
            let row = self.dem_row(&s.tuple.demographics)?;
            dem_x.row_mut(i).copy_from_slice(&row);
        }
        let (o0, dem_cache) = self.params.enc.dem.forward_train(&dem_x);

        let mut seq = Vec::with_capacity(n);
        let mut imp_in = Matrix::zeros(n, self.dims.n_a + self.dims.n_o);
        let mut exp_in = Matrix::zeros(n, self.explicit_width);
        for (i, s) in samples.iter().enumerate() {
            let init = CruState { action: vec![0.0; self.dims.n_a], response: o0.row(i).to_vec() };
            let (action_ids, inputs) = self.cru_inputs(&s.tuple)?;
            let (final_state, steps) = unroll(&self.params.cru, &inputs, &init)?;
            imp_in.row_mut(i)[..self.dims.n_a].copy_from_slice(&final_state.action);
            imp_in.row_mut(i)[self.dims.n_a..].copy_from_slice(&final_state.response);
            if s.tuple.explicit.len() != self.explicit_width {
                return Err(CrnError::Schema("explicit feature width mismatch".into()));
            }
            exp_in.row_mut(i).copy_from_slice(&s.tuple.explicit);
            seq.push(SeqCache { action_ids, steps });
        }

        let s_imp = self.params.enc.s_imp.forward(&imp_in);
        let s_exp = self.params.enc.s_exp.forward(&exp_in);
        let mut fusion_in = Matrix::zeros(n, self.dims.n_imp + self.dims.n_exp);
        for i in 0..n {
            fusion_in.row_mut(i)[..self.dims.n_imp].copy_from_slice(s_imp.row(i));
            fusion_in.row_mut(i)[self.dims.n_imp..].copy_from_slice(s_exp.row(i));
        }
        let (s_t, fusion_cache) = self.params.enc.fusion.forward_train(&fusion_in);

        let mut head_in = Matrix::zeros(n, self.dims.head_width());
        for (i, s) in samples.iter().enumerate() {
            if s.action < 1 || s.action > self.action_count {
                return Err(CrnError::Range(format!(
                    "sample action {} outside catalog 1..={}",
                    s.action, self.action_count
                )));
            }
            head_in.row_mut(i)[..self.dims.n_s].copy_from_slice(s_t.row(i));
            head_in.row_mut(i)[self.dims.n_s..]
                .copy_from_slice(self.params.enc.embed_action(s.action)?);
        }
        let (preds, head_cache) = self.params.head.forward_train(&head_in);

        Ok((preds, CrnCache { dem_cache, seq, imp_in, exp_in, fusion_cache, head_cache }))
    }

    fn backward(&self, samples: &[TrainSample], cache: &CrnCache, d_preds: &[f64]) -> Result<Vec<f64>> {
        let n = samples.len();
        let mut grads = self.params.zeroed();

        // Head, then peel the shared-embedding gradient for the scored
        // action off the head input gradient.
        let d_head_in = self.params.head.backward(&cache.head_cache, d_preds, &mut grads.head);
        let mut d_s_t = Matrix::zeros(n, self.dims.n_s);
        for (i, s) in samples.iter().enumerate() {
            d_s_t.row_mut(i).copy_from_slice(&d_head_in.row(i)[..self.dims.n_s]);
            let d_emb = &d_head_in.row(i)[self.dims.n_s..];
            for (g, d) in grads.enc.embedding.row_mut(s.action).iter_mut().zip(d_emb) {
                *g += d;
            }
        }

        let d_fusion_in = self.params.enc.fusion.backward(&cache.fusion_cache, &d_s_t, &mut grads.enc.fusion);
        let mut d_imp_out = Matrix::zeros(n, self.dims.n_imp);
        let mut d_exp_out = Matrix::zeros(n, self.dims.n_exp);
        for i in 0..n {
            d_imp_out.row_mut(i).copy_from_slice(&d_fusion_in.row(i)[..self.dims.n_imp]);
            d_exp_out.row_mut(i).copy_from_slice(&d_fusion_in.row(i)[self.dims.n_imp..]);
        }
        let d_imp_in = self.params.enc.s_imp.backward(&cache.imp_in, &d_imp_out, &mut grads.enc.s_imp);
        let _ = self.params.enc.s_exp.backward(&cache.exp_in, &d_exp_out, &mut grads.enc.s_exp);

        // Through time, per sample. The gradient at the initial action
        // memory is dropped (a*_0 is the zero constant); the gradient at
        // the initial response memory flows into the demographic encoder.
        let mut d_o0 = Matrix::zeros(n, self.dims.n_o);
        for (i, s) in samples.iter().enumerate() {
            let grad_final = CruState {
                action: d_imp_in.row(i)[..self.dims.n_a].to_vec(),
                response: d_imp_in.row(i)[self.dims.n_a..].to_vec(),
            };
            let (input_grads, grad_init) =
                unroll_backward(&self.params.cru, &cache.seq[i].steps, &grad_final, &mut grads.cru)?;
            for (j, (d_a_in, d_o_in)) in input_grads.iter().enumerate() {
                let a_id = cache.seq[i].action_ids[j];
                for (g, d) in grads.enc.embedding.row_mut(a_id).iter_mut().zip(d_a_in) {
                    *g += d;
                }
                EncoderParams::encode_responses_backward(
                    &s.tuple.response_sets[j],
                    d_o_in,
                    &mut grads.enc.resp_proj,
                );
            }
            d_o0.row_mut(i).copy_from_slice(&grad_init.response);
        }
        let _ = self.params.enc.dem.backward(&cache.dem_cache, &d_o0, &mut grads.enc.dem);

        let mut flat = Vec::with_capacity(self.flatten().len());
        grads.for_each(&mut |_, m| flat.extend_from_slice(m.as_slice()));
        Ok(flat)
    }

    fn update_running(&mut self, cache: &CrnCache) {
        let params = &self.params;
        params.enc.dem.update_running(&mut self.stats.enc.dem, &cache.dem_cache, BN_MOMENTUM);
        params.enc.fusion.update_running(&mut self.stats.enc.fusion, &cache.fusion_cache, BN_MOMENTUM);
        params.head.update_running(&mut self.stats.head, &cache.head_cache, BN_MOMENTUM);
    }

    fn predict(&self, tuple: &ClientTuple, action: usize) -> Result<f64> {
        self.predict_reward(tuple, action)
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.params.for_each(&mut |_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = {
            let mut total = 0;
            self.params.for_each(&mut |_, m| total += m.len());
            total
        };
        if flat.len() != expected {
            return Err(CrnError::Dimension(format!(
                "flat parameter vector has {} values, model needs {}",
                flat.len(),
                expected
            )));
        }
        let mut offset = 0;
        let mut bad: Option<String> = None;
        self.params.for_each_mut(&mut |name, m| {
            let len = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            if bad.is_none() && !m.all_finite() {
                bad = Some(name);
            }
            offset += len;
        });
        if let Some(name) = bad {
            return Err(CrnError::Numeric(format!("parameter '{name}' is non-finite")));
        }
        Ok(())
    }

    fn param_layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.params.for_each(&mut |name, m| {
            out.push(ParamSpec { name, offset, len: m.len() });
            offset += m.len();
        });
        out
    }
}

/// Builds a small random batch (clients with random demographics,
/// response sets and action sequences) and checks the analytic gradient
/// of the batch mean-squared-error against central finite differences,
/// per parameter family.
pub fn full_gradcheck(
    dims: &ModelDims,
    seq_len: usize,
    batch: usize,
    seed: u64,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let schema = DemographicSchema { categorical_cardinalities: vec![3, 2], numeric_count: 2 };
    let action_count = 5;
    let n_r = 6;
    let explicit_width = 3;
    let mut model = CrnModel::new(*dims, action_count, n_r, explicit_width, schema.clone(), seed);

    let mut rng = SplitMix64::new(seed).split(0x67636865636B);
    // The fan-in training initialization leaves many coordinates with
    // gradients near the finite-difference noise floor; check the
    // derivative code at a generic, well-conditioned point instead.
    model.params.for_each_mut(&mut |name, m| {
        if name.ends_with("gamma") {
            for v in m.as_mut_slice() {
                *v = rng.uniform(0.7, 1.3);
            }
        } else if name.ends_with("beta") {
            for v in m.as_mut_slice() {
                *v = rng.uniform(-0.3, 0.3);
            }
        } else {
            for v in m.as_mut_slice() {
                *v = rng.uniform(-0.6, 0.6);
            }
        }
    });
    let mut samples = Vec::with_capacity(batch);
    for i in 0..batch {
        let t = seq_len;
        let demographics = Demographics {
            categorical: vec![rng.below(3), rng.below(2)],
            numeric: (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        };
        let actions: Vec<usize> = (0..t - 1).map(|_| 1 + rng.below(action_count)).collect();
        let response_sets: Vec<Vec<usize>> = (0..t)
            .map(|_| {
                let mut set = Vec::new();
                for code in 0..n_r {
                    if rng.next_f64() < 0.4 {
                        set.push(code);
                    }
                }
                set
            })
            .collect();
        let tuple = ClientTuple {
            client_id: i as u64,
            step: t,
            demographics,
            actions,
            response_sets,
            explicit: (0..explicit_width).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        };
        samples.push(TrainSample { tuple, action: 1 + rng.below(action_count), label: rng.next_f64() });
    }

    // The check loss is the batch mean squared error plus a small ridge
    // term. Without the ridge, a handful of coordinates whose batch
    // gradients nearly cancel sit at the finite-difference noise floor
    // (~1e-11 at h = 1e-5) and report meaningless relative errors; the
    // ridge gives every coordinate a baseline gradient while leaving any
    // real derivative defect visible at far above the tolerance.
    let ridge = 1e-3;
    let (preds, cache) = model.forward_train(&samples)?;
    let nf = samples.len() as f64;
    let d_preds: Vec<f64> = preds
        .iter()
        .zip(samples.iter())
        .map(|(p, s)| 2.0 * (p - s.label) / nf)
        .collect();
    let mut analytic = model.backward(&samples, &cache, &d_preds)?;
    let params = model.flatten();
    for (g, p) in analytic.iter_mut().zip(params.iter()) {
        *g += 2.0 * ridge * p;
    }

    let layout = model.param_layout();
    let families: Vec<(String, usize, usize)> =
        layout.iter().map(|s| (s.name.clone(), s.offset, s.len)).collect();
    let mut probe = model.clone();
    let mut loss = |flat: &[f64]| -> f64 {
        probe.load_flat(flat).expect("same layout");
        let (p, _) = probe.forward_train(&samples).expect("forward");
        let mse = p
            .iter()
            .zip(samples.iter())
            .map(|(pr, s)| (pr - s.label) * (pr - s.label))
            .sum::<f64>()
            / nf;
        mse + ridge * flat.iter().map(|v| v * v).sum::<f64>()
    };
    finite_diff_check(&mut loss, &params, &analytic, &families, h, tolerance)
}

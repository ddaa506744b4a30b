//! Reduced comparison models trained with the identical loop: a
//! current-step-only MLP (the Markovian reference point) and a single
//! bias-free GRU over concatenated (action embedding, response encoding)
//! inputs with the same fusion and reward head as the full model.

use serde::{Deserialize, Serialize};

use crate::domain::{ClientTuple, Dataset, DemographicSchema};
use crate::encoder::{encode_demographics, ModelDims, Standardizer};
use crate::error::{CrnError, Result};
use crate::head::{HeadStats, RewardHeadParams};
use crate::layers::{Affine, FinalActivation, Mlp3, Mlp3Cache, Mlp3Stats, BN_MOMENTUM};
use crate::model::{ParamSpec, RewardModel, TrainSample};
use crate::numerics::{sigmoid, Matrix, SplitMix64};
use crate::training::{test_mse, train, ImbalanceConfig, TrainConfig, TrainOutcome};

// ---------------------------------------------------------------------------
// Bias-free GRU cell, same update convention as the coupled cell:
// h' = (1 - z) o h + z o tanh(W_n x + U_n (r o h)).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub w_n: Matrix,
    pub u_n: Matrix,
}

#[derive(Debug, Clone)]
pub struct GruStepCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

impl GruCell {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruCell {
            w_z: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            w_r: Matrix::zeros(hidden, input),
            u_r: Matrix::zeros(hidden, hidden),
            w_n: Matrix::zeros(hidden, input),
            u_n: Matrix::zeros(hidden, hidden),
        }
    }

    pub fn init(hidden: usize, input: usize, rng: &mut SplitMix64) -> Self {
        let mut cell = GruCell::zeros(hidden, input);
        cell.for_each_mut("g", &mut |_, m: &mut Matrix| {
            let limit = (1.0 / m.cols() as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = rng.uniform(-limit, limit);
            }
        });
        cell
    }

    pub fn hidden(&self) -> usize {
        self.u_z.rows()
    }

    pub fn step(&self, x: &[f64], h: &[f64]) -> (Vec<f64>, GruStepCache) {
        let d = self.hidden();
        let mut pre = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut z = vec![0.0; d];
        self.w_z.matvec(x, &mut pre);
        self.u_z.matvec(h, &mut tmp);
        for i in 0..d {
            z[i] = sigmoid(pre[i] + tmp[i]);
        }
        let mut r = vec![0.0; d];
        self.w_r.matvec(x, &mut pre);
        self.u_r.matvec(h, &mut tmp);
        for i in 0..d {
            r[i] = sigmoid(pre[i] + tmp[i]);
        }
        let gated: Vec<f64> = (0..d).map(|i| r[i] * h[i]).collect();
        self.w_n.matvec(x, &mut pre);
        self.u_n.matvec(&gated, &mut tmp);
        let n: Vec<f64> = (0..d).map(|i| (pre[i] + tmp[i]).tanh()).collect();
        let next: Vec<f64> = (0..d).map(|i| (1.0 - z[i]) * h[i] + z[i] * n[i]).collect();
        (next, GruStepCache { x: x.to_vec(), h: h.to_vec(), z, r, n })
    }

    pub fn backward(
        &self,
        cache: &GruStepCache,
        d_next: &[f64],
        grads: &mut GruCell,
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.hidden();
        let mut dx = vec![0.0; cache.x.len()];
        let mut dh = vec![0.0; d];
        let mut dz = vec![0.0; d];
        let mut dn = vec![0.0; d];
        for i in 0..d {
            dz[i] = d_next[i] * (cache.n[i] - cache.h[i]);
            dn[i] = d_next[i] * cache.z[i];
            dh[i] += d_next[i] * (1.0 - cache.z[i]);
        }
        let gated: Vec<f64> = (0..d).map(|i| cache.r[i] * cache.h[i]).collect();
        let pn: Vec<f64> = (0..d).map(|i| dn[i] * (1.0 - cache.n[i] * cache.n[i])).collect();
        grads.w_n.add_outer(&pn, &cache.x, 1.0);
        grads.u_n.add_outer(&pn, &gated, 1.0);
        self.w_n.matvec_t_add(&pn, &mut dx);
        let mut d_gated = vec![0.0; d];
        self.u_n.matvec_t_add(&pn, &mut d_gated);
        let mut dr = vec![0.0; d];
        for i in 0..d {
            dr[i] = d_gated[i] * cache.h[i];
            dh[i] += d_gated[i] * cache.r[i];
        }
        let pr: Vec<f64> = (0..d).map(|i| dr[i] * cache.r[i] * (1.0 - cache.r[i])).collect();
        grads.w_r.add_outer(&pr, &cache.x, 1.0);
        grads.u_r.add_outer(&pr, &cache.h, 1.0);
        self.w_r.matvec_t_add(&pr, &mut dx);
        self.u_r.matvec_t_add(&pr, &mut dh);
        let pz: Vec<f64> = (0..d).map(|i| dz[i] * cache.z[i] * (1.0 - cache.z[i])).collect();
        grads.w_z.add_outer(&pz, &cache.x, 1.0);
        grads.u_z.add_outer(&pz, &cache.h, 1.0);
        self.w_z.matvec_t_add(&pz, &mut dx);
        self.u_z.matvec_t_add(&pz, &mut dh);
        (dx, dh)
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Matrix)) {
        f(format!("{prefix}.w_z"), &self.w_z);
        f(format!("{prefix}.u_z"), &self.u_z);
        f(format!("{prefix}.w_r"), &self.w_r);
        f(format!("{prefix}.u_r"), &self.u_r);
        f(format!("{prefix}.w_n"), &self.w_n);
        f(format!("{prefix}.u_n"), &self.u_n);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Matrix)) {
        f(format!("{prefix}.w_z"), &mut self.w_z);
        f(format!("{prefix}.u_z"), &mut self.u_z);
        f(format!("{prefix}.w_r"), &mut self.w_r);
        f(format!("{prefix}.u_r"), &mut self.u_r);
        f(format!("{prefix}.w_n"), &mut self.w_n);
        f(format!("{prefix}.u_n"), &mut self.u_n);
    }
}

// ---------------------------------------------------------------------------
// Markovian MLP: sees only (demographics, explicit features, current
// response set, candidate action). No history.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovMlp {
    pub action_count: usize,
    pub response_vocab: usize,
    pub explicit_width: usize,
    pub schema: DemographicSchema,
    pub standardizer: Standardizer,
    pub emb_dim: usize,
    pub embedding: Matrix,
    pub mlp: Mlp3,
    pub stats: Mlp3Stats,
}

pub struct MarkovCache {
    mlp: Mlp3Cache,
    preds: Vec<f64>,
}

impl MarkovMlp {
    pub fn new(
        dims: &ModelDims,
        action_count: usize,
        response_vocab: usize,
        explicit_width: usize,
        schema: DemographicSchema,
        seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::new(seed).split(0x6D61726B);
        let emb_dim = dims.n_a;
        let in_dim = schema.encoded_width() + explicit_width + response_vocab + emb_dim;
        let hidden = dims.n_s + dims.n_a;
        let standardizer = Standardizer::identity(schema.numeric_count);
        let mlp = Mlp3::init(in_dim, hidden, 1, FinalActivation::None, &mut rng);
        let stats = mlp.fresh_stats();
        MarkovMlp {
            action_count,
            response_vocab,
            explicit_width,
            schema,
            standardizer,
            emb_dim,
            embedding: Matrix::uniform(action_count + 1, emb_dim, 0.05, &mut rng),
            mlp,
            stats,
        }
    }

    fn row_for(&self, tuple: &ClientTuple, action: usize) -> Result<Vec<f64>> {
        if action < 1 || action > self.action_count {
            return Err(CrnError::Range(format!(
                "action {} outside catalog 1..={}",
                action, self.action_count
            )));
        }
        let mut row = encode_demographics(&self.schema, &self.standardizer, &tuple.demographics)?;
        row.extend_from_slice(&tuple.explicit);
        let current = tuple
            .response_sets
            .last()
            .ok_or_else(|| CrnError::Consistency("tuple has no response sets".into()))?;
        let mut multi_hot = vec![0.0; self.response_vocab];
        for &code in current {
            if code >= self.response_vocab {
                return Err(CrnError::Range(format!("response code {code} out of range")));
            }
            multi_hot[code] = 1.0;
        }
        row.extend_from_slice(&multi_hot);
        row.extend_from_slice(self.embedding.row(action));
        Ok(row)
    }

    fn zero_grads(&self) -> (Matrix, Mlp3) {
        let mlp = Mlp3::zeros(self.mlp.l1.in_dim(), self.mlp.l1.out_dim(), 1, FinalActivation::None);
        (Matrix::zeros(self.embedding.rows(), self.embedding.cols()), mlp)
    }
}

impl RewardModel for MarkovMlp {
    type Cache = MarkovCache;

    fn kind(&self) -> &'static str {
        "markov_mlp"
    }

    fn set_standardizer(&mut self, s: Standardizer) {
        self.standardizer = s;
    }

    fn forward_train(&self, samples: &[TrainSample]) -> Result<(Vec<f64>, MarkovCache)> {
        if samples.is_empty() {
            return Err(CrnError::Data("empty batch".into()));
        }
        let width = self.mlp.l1.in_dim();
        let mut x = Matrix::zeros(samples.len(), width);
        for (i, s) in samples.iter().enumerate() {
            let row = self.row_for(&s.tuple, s.action)?;
            x.row_mut(i).copy_from_slice(&row);
        }
        let (z, cache) = self.mlp.forward_train(&x);
        let preds: Vec<f64> = (0..z.rows()).map(|i| sigmoid(z.get(i, 0))).collect();
        Ok((preds.clone(), MarkovCache { mlp: cache, preds }))
    }

    fn backward(&self, samples: &[TrainSample], cache: &MarkovCache, d_preds: &[f64]) -> Result<Vec<f64>> {
        let n = samples.len();
        let (mut d_emb, mut d_mlp) = self.zero_grads();
        let mut dz = Matrix::zeros(n, 1);
        for i in 0..n {
            let p = cache.preds[i];
            dz.set(i, 0, d_preds[i] * p * (1.0 - p));
        }
        let dx = self.mlp.backward(&cache.mlp, &dz, &mut d_mlp);
        let emb_start = self.mlp.l1.in_dim() - self.emb_dim;
        for (i, s) in samples.iter().enumerate() {
            for (g, d) in d_emb.row_mut(s.action).iter_mut().zip(&dx.row(i)[emb_start..]) {
                *g += d;
            }
        }
        let mut flat = Vec::new();
        flat.extend_from_slice(d_emb.as_slice());
        d_mlp.for_each("mlp", &mut |_, m| flat.extend_from_slice(m.as_slice()));
        Ok(flat)
    }

    fn update_running(&mut self, cache: &MarkovCache) {
        let mlp = self.mlp.clone();
        mlp.update_running(&mut self.stats, &cache.mlp, BN_MOMENTUM);
    }

    fn predict(&self, tuple: &ClientTuple, action: usize) -> Result<f64> {
        let row = self.row_for(tuple, action)?;
        let x = Matrix::from_vec(1, row.len(), row)?;
        let z = self.mlp.forward_infer(&self.stats, &x);
        Ok(sigmoid(z.get(0, 0)))
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.embedding.as_slice());
        self.mlp.for_each("mlp", &mut |_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.flatten().len();
        if flat.len() != total {
            return Err(CrnError::Dimension(format!("expected {total} values, got {}", flat.len())));
        }
        let emb_len = self.embedding.len();
        self.embedding.as_mut_slice().copy_from_slice(&flat[..emb_len]);
        let mut bad: Option<String> = None;
        if !self.embedding.all_finite() {
            bad = Some("embedding".into());
        }
        let mut offset = emb_len;
        self.mlp.for_each_mut("mlp", &mut |name, m| {
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
        let mut out = vec![ParamSpec {
            name: "embedding".into(),
            offset: 0,
            len: self.embedding.len(),
        }];
        let mut offset = self.embedding.len();
        self.mlp.for_each("mlp", &mut |name, m| {
            out.push(ParamSpec { name, offset, len: m.len() });
            offset += m.len();
        });
        out
    }
}

// ---------------------------------------------------------------------------
// GRU baseline: single recurrent memory over concatenated inputs, same
// demographic initialization, fusion and reward head as the full model.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruBaseline {
    pub dims: ModelDims,
    pub action_count: usize,
    pub response_vocab: usize,
    pub explicit_width: usize,
    pub schema: DemographicSchema,
    pub standardizer: Standardizer,
    pub embedding: Matrix,
    pub resp_proj: Matrix,
    pub dem: Mlp3,
    pub cell: GruCell,
    pub s_imp: Affine,
    pub s_exp: Affine,
    pub fusion: Mlp3,
    pub head: RewardHeadParams,
    pub dem_stats: Mlp3Stats,
    pub fusion_stats: Mlp3Stats,
    pub head_stats: HeadStats,
}

pub struct GruCache {
    dem_cache: Mlp3Cache,
    seq: Vec<(Vec<usize>, Vec<GruStepCache>)>,
    imp_in: Matrix,
    exp_in: Matrix,
    fusion_cache: Mlp3Cache,
    head_cache: crate::head::HeadCache,
}

impl GruBaseline {
    pub fn new(
        dims: &ModelDims,
        action_count: usize,
        response_vocab: usize,
        explicit_width: usize,
        schema: DemographicSchema,
        seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::new(seed).split(0x677275);
        let hidden = dims.n_a + dims.n_o;
        let input = dims.n_a + dims.n_o;
        let dem_width = schema.encoded_width();
        let standardizer = Standardizer::identity(schema.numeric_count);
        let dem = Mlp3::init(dem_width, dims.dem_hidden, hidden, FinalActivation::Tanh, &mut rng);
        let fusion = Mlp3::init(
            dims.n_imp + dims.n_exp,
            dims.fusion_hidden,
            dims.n_s,
            FinalActivation::None,
            &mut rng,
        );
        let head = RewardHeadParams::init(dims.head_width(), &mut rng);
        let dem_stats = dem.fresh_stats();
        let fusion_stats = fusion.fresh_stats();
        let head_stats = head.fresh_stats();
        GruBaseline {
            dims: *dims,
            action_count,
            response_vocab,
            explicit_width,
            schema,
            standardizer,
            embedding: Matrix::uniform(action_count + 1, dims.n_a, 0.05, &mut rng),
            resp_proj: Matrix::uniform(dims.n_o, response_vocab, (1.0 / response_vocab as f64).sqrt(), &mut rng),
            dem: dem.clone(),
            cell: GruCell::init(hidden, input, &mut rng),
            s_imp: Affine::init(dims.n_imp, hidden, &mut rng),
            s_exp: Affine::init(dims.n_exp, explicit_width, &mut rng),
            fusion,
            head,
            dem_stats,
            fusion_stats,
            head_stats,
        }
    }

    fn inputs_for(&self, tuple: &ClientTuple) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let t = tuple.step;
        if tuple.actions.len() + 1 != t || tuple.response_sets.len() != t {
            return Err(CrnError::Consistency("tuple histories inconsistent with step".into()));
        }
        let mut ids = Vec::with_capacity(t);
        let mut rows = Vec::with_capacity(t);
        for i in 1..=t {
            let a_id = if i == 1 { 0 } else { tuple.actions[i - 2] };
            if a_id >= self.embedding.rows() {
                return Err(CrnError::Range(format!("action id {a_id} out of range")));
            }
            let mut x = self.embedding.row(a_id).to_vec();
            let mut resp = vec![0.0; self.dims.n_o];
            for &code in &tuple.response_sets[i - 1] {
                if code >= self.response_vocab {
                    return Err(CrnError::Range(format!("response code {code} out of range")));
                }
                for (r, v) in resp.iter_mut().enumerate() {
                    *v += self.resp_proj.get(r, code);
                }
            }
            x.extend_from_slice(&resp);
            ids.push(a_id);
            rows.push(x);
        }
        Ok((ids, rows))
    }

    fn zero_grads(&self) -> GruBaseline {
        let mut g = self.clone();
        g.for_each_params_mut(&mut |_, m| m.fill(0.0));
        g
    }

    fn for_each_params(&self, f: &mut impl FnMut(String, &Matrix)) {
        f("embedding".into(), &self.embedding);
        f("resp_proj".into(), &self.resp_proj);
        self.dem.for_each("dem", f);
        self.cell.for_each("gru", f);
        f("s_imp.w".into(), &self.s_imp.w);
        f("s_imp.b".into(), &self.s_imp.b);
        f("s_exp.w".into(), &self.s_exp.w);
        f("s_exp.b".into(), &self.s_exp.b);
        self.fusion.for_each("fusion", f);
        self.head.for_each(f);
    }

    fn for_each_params_mut(&mut self, f: &mut impl FnMut(String, &mut Matrix)) {
        f("embedding".into(), &mut self.embedding);
        f("resp_proj".into(), &mut self.resp_proj);
        self.dem.for_each_mut("dem", f);
        self.cell.for_each_mut("gru", f);
        f("s_imp.w".into(), &mut self.s_imp.w);
        f("s_imp.b".into(), &mut self.s_imp.b);
        f("s_exp.w".into(), &mut self.s_exp.w);
        f("s_exp.b".into(), &mut self.s_exp.b);
        self.fusion.for_each_mut("fusion", f);
        self.head.for_each_mut(f);
    }
}

impl RewardModel for GruBaseline {
    type Cache = GruCache;

    fn kind(&self) -> &'static str {
        "gru"
    }

    fn set_standardizer(&mut self, s: Standardizer) {
        self.standardizer = s;
    }

    fn forward_train(&self, samples: &[TrainSample]) -> Result<(Vec<f64>, GruCache)> {
        if samples.is_empty() {
            return Err(CrnError::Data("empty batch".into()));
        }
        let n = samples.len();
        let hidden = self.cell.hidden();
        let mut dem_x = Matrix::zeros(n, self.schema.encoded_width());
        for (i, s) in samples.iter().enumerate() {
            let row = encode_demographics(&self.schema, &self.standardizer, &s.tuple.demographics)?;
            dem_x.row_mut(i).copy_from_slice(&row);
        }
        let (h0, dem_cache) = self.dem.forward_train(&dem_x);

        let mut seq = Vec::with_capacity(n);
        let mut imp_in = Matrix::zeros(n, hidden);
        let mut exp_in = Matrix::zeros(n, self.explicit_width);
        for (i, s) in samples.iter().enumerate() {
            let (ids, rows) = self.inputs_for(&s.tuple)?;
            let mut h = h0.row(i).to_vec();
            let mut caches = Vec::with_capacity(rows.len());
            for x in &rows {
                let (next, cache) = self.cell.step(x, &h);
                caches.push(cache);
                h = next;
            }
            imp_in.row_mut(i).copy_from_slice(&h);
            exp_in.row_mut(i).copy_from_slice(&s.tuple.explicit);
            seq.push((ids, caches));
        }

        let s_imp = self.s_imp.forward(&imp_in);
        let s_exp = self.s_exp.forward(&exp_in);
        let mut fusion_in = Matrix::zeros(n, self.dims.n_imp + self.dims.n_exp);
        for i in 0..n {
            fusion_in.row_mut(i)[..self.dims.n_imp].copy_from_slice(s_imp.row(i));
            fusion_in.row_mut(i)[self.dims.n_imp..].copy_from_slice(s_exp.row(i));
        }
        let (s_t, fusion_cache) = self.fusion.forward_train(&fusion_in);
        let mut head_in = Matrix::zeros(n, self.dims.head_width());
        for (i, s) in samples.iter().enumerate() {
            if s.action < 1 || s.action > self.action_count {
                return Err(CrnError::Range(format!("action {} out of catalog", s.action)));
            }
            head_in.row_mut(i)[..self.dims.n_s].copy_from_slice(s_t.row(i));
            head_in.row_mut(i)[self.dims.n_s..].copy_from_slice(self.embedding.row(s.action));
        }
        let (preds, head_cache) = self.head.forward_train(&head_in);
        Ok((preds, GruCache { dem_cache, seq, imp_in, exp_in, fusion_cache, head_cache }))
    }

    fn backward(&self, samples: &[TrainSample], cache: &GruCache, d_preds: &[f64]) -> Result<Vec<f64>> {
        let n = samples.len();
        let mut grads = self.zero_grads();

        let d_head_in = self.head.backward(&cache.head_cache, d_preds, &mut grads.head);
        let mut d_s_t = Matrix::zeros(n, self.dims.n_s);
        for (i, s) in samples.iter().enumerate() {
            d_s_t.row_mut(i).copy_from_slice(&d_head_in.row(i)[..self.dims.n_s]);
            for (g, d) in grads
                .embedding
                .row_mut(s.action)
                .iter_mut()
                .zip(&d_head_in.row(i)[self.dims.n_s..])
            {
                *g += d;
            }
        }
        let d_fusion_in = self.fusion.backward(&cache.fusion_cache, &d_s_t, &mut grads.fusion);
        let mut d_imp_out = Matrix::zeros(n, self.dims.n_imp);
        let mut d_exp_out = Matrix::zeros(n, self.dims.n_exp);
        for i in 0..n {
            d_imp_out.row_mut(i).copy_from_slice(&d_fusion_in.row(i)[..self.dims.n_imp]);
            d_exp_out.row_mut(i).copy_from_slice(&d_fusion_in.row(i)[self.dims.n_imp..]);
        }
        let d_h_final = self.s_imp.backward(&cache.imp_in, &d_imp_out, &mut grads.s_imp);
        let _ = self.s_exp.backward(&cache.exp_in, &d_exp_out, &mut grads.s_exp);

        let mut d_h0 = Matrix::zeros(n, self.cell.hidden());
        for (i, s) in samples.iter().enumerate() {
            let (ids, caches) = &cache.seq[i];
            let mut dh = d_h_final.row(i).to_vec();
            for (j, step_cache) in caches.iter().enumerate().rev() {
                let (dx, dprev) = self.cell.backward(step_cache, &dh, &mut grads.cell);
                let a_id = ids[j];
                for (g, d) in grads.embedding.row_mut(a_id).iter_mut().zip(&dx[..self.dims.n_a]) {
                    *g += d;
                }
                let d_resp = &dx[self.dims.n_a..];
                for &code in &s.tuple.response_sets[j] {
                    for (r, d) in d_resp.iter().enumerate() {
                        let cur = grads.resp_proj.get(r, code);
                        grads.resp_proj.set(r, code, cur + d);
                    }
                }
                dh = dprev;
            }
            d_h0.row_mut(i).copy_from_slice(&dh);
        }
        let _ = self.dem.backward(&cache.dem_cache, &d_h0, &mut grads.dem);

        let mut flat = Vec::new();
        grads.for_each_params(&mut |_, m| flat.extend_from_slice(m.as_slice()));
        Ok(flat)
    }

    fn update_running(&mut self, cache: &GruCache) {
        let dem = self.dem.clone();
        dem.update_running(&mut self.dem_stats, &cache.dem_cache, BN_MOMENTUM);
        let fusion = self.fusion.clone();
        fusion.update_running(&mut self.fusion_stats, &cache.fusion_cache, BN_MOMENTUM);
        let head = self.head.clone();
        head.update_running(&mut self.head_stats, &cache.head_cache, BN_MOMENTUM);
    }

    fn predict(&self, tuple: &ClientTuple, action: usize) -> Result<f64> {
        if action < 1 || action > self.action_count {
            return Err(CrnError::Range(format!("action {action} out of catalog")));
        }
        let dem = encode_demographics(&self.schema, &self.standardizer, &tuple.demographics)?;
        let dem_x = Matrix::from_vec(1, dem.len(), dem)?;
        let h0 = self.dem.forward_infer(&self.dem_stats, &dem_x);
        let (_, rows) = self.inputs_for(tuple)?;
        let mut h = h0.row(0).to_vec();
        for x in &rows {
            h = self.cell.step(x, &h).0;
        }
        let imp_x = Matrix::from_vec(1, h.len(), h)?;
        let s_imp = self.s_imp.forward(&imp_x);
        let exp_x = Matrix::from_vec(1, tuple.explicit.len(), tuple.explicit.clone())?;
        let s_exp = self.s_exp.forward(&exp_x);
        let mut fusion_in = s_imp.row(0).to_vec();
        fusion_in.extend_from_slice(s_exp.row(0));
        let fusion_x = Matrix::from_vec(1, fusion_in.len(), fusion_in)?;
        let s_t = self.fusion.forward_infer(&self.fusion_stats, &fusion_x);
        let mut head_in = s_t.row(0).to_vec();
        head_in.extend_from_slice(self.embedding.row(action));
        let x = Matrix::from_vec(1, head_in.len(), head_in)?;
        Ok(self.head.forward_infer(&self.head_stats, &x)[0])
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_params(&mut |_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.flatten().len();
        if flat.len() != total {
            return Err(CrnError::Dimension(format!("expected {total} values, got {}", flat.len())));
        }
        let mut offset = 0;
        let mut bad: Option<String> = None;
        self.for_each_params_mut(&mut |name, m| {
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
        self.for_each_params(&mut |name, m| {
            out.push(ParamSpec { name, offset, len: m.len() });
            offset += m.len();
        });
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    MarkovMlp,
    Gru,
}

impl std::str::FromStr for BaselineKind {
    type Err = CrnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov_mlp" | "markov" => Ok(BaselineKind::MarkovMlp),
            "gru" => Ok(BaselineKind::Gru),
            other => Err(CrnError::Config(format!("unknown baseline kind '{other}'"))),
        }
    }
}

pub enum TrainedBaseline {
    Markov(MarkovMlp),
    Gru(GruBaseline),
}

/// Trains a reduced baseline with the identical training loop and
/// reports its held-out test MSE.
pub fn run_baseline(
    kind: BaselineKind,
    dataset: &Dataset,
    dims: &ModelDims,
    config: &TrainConfig,
    imbalance: &ImbalanceConfig,
) -> Result<(TrainedBaseline, TrainOutcome, f64)> {
    match kind {
        BaselineKind::MarkovMlp => {
            let mut model = MarkovMlp::new(
                dims,
                dataset.header.action_count,
                dataset.header.response_vocab,
                dataset.header.explicit_width,
                dataset.header.schema.clone(),
                config.seed,
            );
            let outcome = train(&mut model, &dataset.records, dataset.header.action_count, config, imbalance)?;
            let mse = test_mse(&model, &dataset.records, &outcome.test_clients)?;
            Ok((TrainedBaseline::Markov(model), outcome, mse))
        }
        BaselineKind::Gru => {
            let mut model = GruBaseline::new(
                dims,
                dataset.header.action_count,
                dataset.header.response_vocab,
                dataset.header.explicit_width,
                dataset.header.schema.clone(),
                config.seed,
            );
            let outcome = train(&mut model, &dataset.records, dataset.header.action_count, config, imbalance)?;
            let mse = test_mse(&model, &dataset.records, &outcome.test_clients)?;
            Ok((TrainedBaseline::Gru(model), outcome, mse))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Demographics;
    use crate::numerics::gradcheck::finite_diff_check_flat;

    fn tiny_dims() -> ModelDims {
        ModelDims { n_a: 3, n_o: 4, n_imp: 3, n_exp: 3, n_s: 4, dem_hidden: 4, fusion_hidden: 4 }
    }

    fn schema() -> DemographicSchema {
        DemographicSchema { categorical_cardinalities: vec![3, 2], numeric_count: 2 }
    }

    fn sample(seed: u64, t: usize, action_count: usize) -> TrainSample {
        let mut rng = SplitMix64::new(seed);
        TrainSample {
            tuple: ClientTuple {
                client_id: seed,
                step: t,
                demographics: Demographics {
                    categorical: vec![rng.below(3), rng.below(2)],
                    numeric: vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                },
                actions: (0..t - 1).map(|_| 1 + rng.below(action_count)).collect(),
                response_sets: (0..t)
                    .map(|_| (0..6).filter(|_| rng.next_f64() < 0.3).collect())
                    .collect(),
                explicit: vec![0.5, 0.2, 0.3],
            },
            action: 1 + rng.below(action_count),
            label: rng.next_f64(),
        }
    }

    #[test]
    fn gru_cell_backward_matches_finite_differences() {
        let mut rng = SplitMix64::new(5);
        let cell = GruCell::init(4, 3, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (_, cache) = cell.step(&x, &h);
        let mut grads = GruCell::zeros(4, 3);
        let d_next = vec![1.0; 4];
        let (dx, dh) = cell.backward(&cache, &d_next, &mut grads);

        let mut params = Vec::new();
        cell.for_each("g", &mut |_, m| params.extend_from_slice(m.as_slice()));
        params.extend_from_slice(&x);
        params.extend_from_slice(&h);
        let mut analytic = Vec::new();
        grads.for_each("g", &mut |_, m| analytic.extend_from_slice(m.as_slice()));
        analytic.extend_from_slice(&dx);
        analytic.extend_from_slice(&dh);

        let n_cell = params.len() - 7;
        let template = cell.clone();
        let mut loss = |p: &[f64]| {
            let mut c = template.clone();
            let mut off = 0;
            c.for_each_mut("g", &mut |_, m| {
                let len = m.len();
                m.as_mut_slice().copy_from_slice(&p[off..off + len]);
                off += len;
            });
            let xs = &p[n_cell..n_cell + 3];
            let hs = &p[n_cell + 3..];
            let (next, _) = c.step(xs, hs);
            next.iter().sum()
        };
        let report = finite_diff_check_flat(&mut loss, &params, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    /// Moves every parameter (notably the zero-initialized biases) to a
    /// generic nonzero point so no coordinate sits at the
    /// finite-difference noise floor.
    fn jitter<M: RewardModel>(model: &mut M, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let mut flat = model.flatten();
        for v in flat.iter_mut() {
            *v += rng.uniform(-0.3, 0.3);
        }
        model.load_flat(&flat).unwrap();
    }

    #[test]
    fn markov_backward_matches_finite_differences() {
        let mut model = MarkovMlp::new(&tiny_dims(), 5, 6, 3, schema(), 77);
        jitter(&mut model, 900);
        let samples: Vec<TrainSample> = (0..4).map(|i| sample(400 + i, 3, 5)).collect();
        let (preds, cache) = model.forward_train(&samples).unwrap();
        let d: Vec<f64> = preds.iter().zip(&samples).map(|(p, s)| 2.0 * (p - s.label)).collect();
        let mut analytic = model.backward(&samples, &cache, &d).unwrap();
        let params = model.flatten();
        // Ridge keeps near-cancelled batch gradients off the
        // finite-difference noise floor; see model::full_gradcheck.
        let ridge = 1e-3;
        for (g, p) in analytic.iter_mut().zip(params.iter()) {
            *g += 2.0 * ridge * p;
        }
        let mut probe = model.clone();
        let mut loss = |p: &[f64]| {
            probe.load_flat(p).unwrap();
            let (pr, _) = probe.forward_train(&samples).unwrap();
            let mse: f64 =
                pr.iter().zip(&samples).map(|(a, s)| (a - s.label) * (a - s.label)).sum();
            mse + ridge * p.iter().map(|v| v * v).sum::<f64>()
        };
        let report = finite_diff_check_flat(&mut loss, &params, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn gru_baseline_backward_matches_finite_differences() {
        let mut model = GruBaseline::new(&tiny_dims(), 5, 6, 3, schema(), 78);
        jitter(&mut model, 901);
        let samples: Vec<TrainSample> = (0..3).map(|i| sample(500 + i, 4, 5)).collect();
        let (preds, cache) = model.forward_train(&samples).unwrap();
        let d: Vec<f64> = preds.iter().zip(&samples).map(|(p, s)| 2.0 * (p - s.label)).collect();
        let mut analytic = model.backward(&samples, &cache, &d).unwrap();
        let params = model.flatten();
        let ridge = 1e-3;
        for (g, p) in analytic.iter_mut().zip(params.iter()) {
            *g += 2.0 * ridge * p;
        }
        let mut probe = model.clone();
        let mut loss = |p: &[f64]| {
            probe.load_flat(p).unwrap();
            let (pr, _) = probe.forward_train(&samples).unwrap();
            let mse: f64 =
                pr.iter().zip(&samples).map(|(a, s)| (a - s.label) * (a - s.label)).sum();
            mse + ridge * p.iter().map(|v| v * v).sum::<f64>()
        };
        let families: Vec<(String, usize, usize)> = model
            .param_layout()
            .iter()
            .map(|s| (s.name.clone(), s.offset, s.len))
            .collect();
        let report = crate::numerics::gradcheck::finite_diff_check(
            &mut loss, &params, &analytic, &families, 1e-5, 1e-4,
        )
        .unwrap();
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn markov_prediction_ignores_history() {
        let model = MarkovMlp::new(&tiny_dims(), 5, 6, 3, schema(), 79);
        let mut s = sample(300, 4, 5);
        let p1 = model.predict(&s.tuple, 2).unwrap();
        // Rewrite earlier history, keep the current step identical.
        s.tuple.actions = vec![5, 5, 5];
        for r in s.tuple.response_sets.iter_mut().take(3) {
            *r = vec![0];
        }
        let p2 = model.predict(&s.tuple, 2).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn gru_prediction_depends_on_history() {
        let model = GruBaseline::new(&tiny_dims(), 5, 6, 3, schema(), 80);
        let s = sample(301, 4, 5);
        let p1 = model.predict(&s.tuple, 2).unwrap();
        let mut other = s.clone();
        other.tuple.actions[0] = 1 + (other.tuple.actions[0] % 5);
        let p2 = model.predict(&other.tuple, 2).unwrap();
        assert_ne!(p1, p2);
    }
}

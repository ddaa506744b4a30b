//! Personalized client representation: action embedding, response-set
//! encoding, demographic initialization of the response memory, and the
//! projections that fuse implicit and explicit features into the client
//! state vector.

use serde::{Deserialize, Serialize};

use crate::domain::{DemographicSchema, Demographics};
use crate::error::{CrnError, Result};
use crate::layers::{Affine, FinalActivation, Mlp3, Mlp3Stats};
use crate::numerics::{Matrix, SplitMix64};

/// Widths of every learned representation. All fully connected stacks
/// have exactly three affine layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_a: usize,
    pub n_o: usize,
    pub n_imp: usize,
    pub n_exp: usize,
    pub n_s: usize,
    pub dem_hidden: usize,
    pub fusion_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { n_a: 16, n_o: 32, n_imp: 16, n_exp: 16, n_s: 32, dem_hidden: 32, fusion_hidden: 32 }
    }
}

impl ModelDims {
    /// Reward-head width: the head consumes (s_t, action embedding).
    pub fn head_width(&self) -> usize {
        self.n_s + self.n_a
    }
}

/// Standardization of numeric demographic fields, fixed from the
/// training split and carried in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(numeric_count: usize) -> Self {
        Standardizer { mean: vec![0.0; numeric_count], std: vec![1.0; numeric_count] }
    }

    pub fn fit(rows: &[&[f64]], numeric_count: usize) -> Self {
        let mut mean = vec![0.0; numeric_count];
        let mut std = vec![1.0; numeric_count];
        if rows.is_empty() {
            return Standardizer { mean, std };
        }
        let n = rows.len() as f64;
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for (j, s) in std.iter_mut().enumerate() {
            let var: f64 = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            *s = var.sqrt().max(1e-8);
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, numeric: &[f64], out: &mut Vec<f64>) {
        for (j, v) in numeric.iter().enumerate() {
            out.push((v - self.mean[j]) / self.std[j]);
        }
    }
}

/// One-hot categoricals followed by standardized numerics.
pub fn encode_demographics(
    schema: &DemographicSchema,
    standardizer: &Standardizer,
    demographics: &Demographics,
) -> Result<Vec<f64>> {
    if !demographics.matches(schema) {
        return Err(CrnError::Schema(format!(
            "demographics ({} categorical, {} numeric) do not match schema ({}, {})",
            demographics.categorical.len(),
            demographics.numeric.len(),
            schema.categorical_cardinalities.len(),
            schema.numeric_count
        )));
    }
    let mut out = Vec::with_capacity(schema.encoded_width());
    for (value, card) in demographics.categorical.iter().zip(&schema.categorical_cardinalities) {
        for k in 0..*card {
            out.push(if k == *value { 1.0 } else { 0.0 });
        }
    }
    standardizer.apply(&demographics.numeric, &mut out);
    Ok(out)
}

/// Learnable parameters of the representation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// (m+1) x n_a; row 0 is the no-action token. Shared with the reward
    /// head's action input.
    pub embedding: Matrix,
    /// n_o x n_r, bias-free so an empty response set encodes to zero.
    pub resp_proj: Matrix,
    /// Demographic encoder; final tanh keeps the initial response memory
    /// inside the cell's [-1, 1] bound.
    pub dem: Mlp3,
    /// Affine projection of the final (a*, o*) concatenation.
    pub s_imp: Affine,
    /// Affine transform of the raw explicit features.
    pub s_exp: Affine,
    /// Fuses (s_imp, s_exp) into s_t.
    pub fusion: Mlp3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderStats {
    pub dem: Mlp3Stats,
    pub fusion: Mlp3Stats,
}

impl EncoderParams {
    pub fn zeros(dims: &ModelDims, action_count: usize, n_r: usize, dem_width: usize, explicit_width: usize) -> Self {
        EncoderParams {
            embedding: Matrix::zeros(action_count + 1, dims.n_a),
            resp_proj: Matrix::zeros(dims.n_o, n_r),
            dem: Mlp3::zeros(dem_width, dims.dem_hidden, dims.n_o, FinalActivation::Tanh),
            s_imp: Affine::zeros(dims.n_imp, dims.n_a + dims.n_o),
            s_exp: Affine::zeros(dims.n_exp, explicit_width),
            fusion: Mlp3::zeros(dims.n_imp + dims.n_exp, dims.fusion_hidden, dims.n_s, FinalActivation::None),
        }
    }

    pub fn init(
        dims: &ModelDims,
        action_count: usize,
        n_r: usize,
        dem_width: usize,
        explicit_width: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let embed_limit = 0.05;
        let resp_limit = (1.0 / n_r as f64).sqrt();
        EncoderParams {
            embedding: Matrix::uniform(action_count + 1, dims.n_a, embed_limit, rng),
            resp_proj: Matrix::uniform(dims.n_o, n_r, resp_limit, rng),
            dem: Mlp3::init(dem_width, dims.dem_hidden, dims.n_o, FinalActivation::Tanh, rng),
            s_imp: Affine::init(dims.n_imp, dims.n_a + dims.n_o, rng),
            s_exp: Affine::init(dims.n_exp, explicit_width, rng),
            fusion: Mlp3::init(dims.n_imp + dims.n_exp, dims.fusion_hidden, dims.n_s, FinalActivation::None, rng),
        }
    }

    pub fn fresh_stats(&self) -> EncoderStats {
        EncoderStats { dem: self.dem.fresh_stats(), fusion: self.fusion.fresh_stats() }
    }

    pub fn action_count(&self) -> usize {
        self.embedding.rows() - 1
    }

    pub fn response_vocab(&self) -> usize {
        self.resp_proj.cols()
    }

    /// Embedding row for an action id (0 = no-action token).
    pub fn embed_action(&self, action_id: usize) -> Result<&[f64]> {
        if action_id >= self.embedding.rows() {
            return Err(CrnError::Range(format!(
                "action id {} outside 0..={}",
                action_id,
                self.embedding.rows() - 1
            )));
        }
        Ok(self.embedding.row(action_id))
    }

    /// Multi-hot response set linearly projected to response space. An
    /// empty set maps to the zero vector.
    pub fn encode_responses(&self, responses: &[usize]) -> Result<Vec<f64>> {
        let n_r = self.resp_proj.cols();
        let mut out = vec![0.0; self.resp_proj.rows()];
        for &code in responses {
            if code >= n_r {
                return Err(CrnError::Range(format!("response code {} >= vocabulary {}", code, n_r)));
            }
            for (r, o) in out.iter_mut().enumerate() {
                *o += self.resp_proj.get(r, code);
            }
        }
        Ok(out)
    }

    /// Accumulates the response-projection gradient for one encoded set.
    pub fn encode_responses_backward(responses: &[usize], d_out: &[f64], grad_proj: &mut Matrix) {
        for &code in responses {
            for (r, d) in d_out.iter().enumerate() {
                let cur = grad_proj.get(r, code);
                grad_proj.set(r, code, cur + d);
            }
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(String, &Matrix)) {
        f("enc.embedding".into(), &self.embedding);
        f("enc.resp_proj".into(), &self.resp_proj);
        self.dem.for_each("enc.dem", f);
        f("enc.s_imp.w".into(), &self.s_imp.w);
        f("enc.s_imp.b".into(), &self.s_imp.b);
        f("enc.s_exp.w".into(), &self.s_exp.w);
        f("enc.s_exp.b".into(), &self.s_exp.b);
        self.fusion.for_each("enc.fusion", f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Matrix)) {
        f("enc.embedding".into(), &mut self.embedding);
        f("enc.resp_proj".into(), &mut self.resp_proj);
        self.dem.for_each_mut("enc.dem", f);
        f("enc.s_imp.w".into(), &mut self.s_imp.w);
        f("enc.s_imp.b".into(), &mut self.s_imp.b);
        f("enc.s_exp.w".into(), &mut self.s_exp.w);
        f("enc.s_exp.b".into(), &mut self.s_exp.b);
        self.fusion.for_each_mut("enc.fusion", f);
    }
}

/// The client state vector s_t with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub client_id: u64,
    pub step: usize,
    pub values: Vec<f64>,
}

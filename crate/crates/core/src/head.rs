//! Residual reward prediction head: three residual blocks over the
//! concatenated (state vector, action embedding), then affine + sigmoid
//! to a scalar reward estimate in (0, 1).
//!
//! Each block is affine -> ReLU -> batch norm with an identity skip, so
//! with zero block weights (and fresh normalization statistics in
//! inference mode) the head degenerates to a single affine + sigmoid of
//! its input.

use serde::{Deserialize, Serialize};

use crate::layers::{
    bn_backward, bn_forward_infer, bn_forward_train, bn_update_running, relu, relu_backward,
    Affine, BnCache, BnParams, BnStats,
};
use crate::numerics::{sigmoid, Matrix, SplitMix64};

pub const RESIDUAL_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub affine: Affine,
    pub bn: BnParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHeadParams {
    pub blocks: Vec<ResidualBlock>,
    pub out: Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub blocks: Vec<BnStats>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Matrix,
    pub z: Matrix,
    pub bn: BnCache,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub blocks: Vec<BlockCache>,
    pub final_x: Matrix,
    pub preds: Vec<f64>,
}

impl RewardHeadParams {
    pub fn zeros(width: usize) -> Self {
        RewardHeadParams {
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|_| ResidualBlock { affine: Affine::zeros(width, width), bn: BnParams::zeros(width) })
                .collect(),
            out: Affine::zeros(1, width),
        }
    }

    pub fn init(width: usize, rng: &mut SplitMix64) -> Self {
        RewardHeadParams {
            blocks: (0..RESIDUAL_BLOCKS)
                .map(|_| ResidualBlock {
                    affine: Affine::init(width, width, rng),
                    bn: BnParams::identity(width),
                })
                .collect(),
            out: Affine::init(1, width, rng),
        }
    }

    pub fn fresh_stats(&self) -> HeadStats {
        HeadStats { blocks: self.blocks.iter().map(|b| BnStats::fresh(b.bn.dim())).collect() }
    }

    pub fn width(&self) -> usize {
        self.out.in_dim()
    }

    pub fn forward_train(&self, x: &Matrix) -> (Vec<f64>, HeadCache) {
        let mut cur = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let z = block.affine.forward(&cur);
            let r = relu(&z);
            let (y, bn) = bn_forward_train(&block.bn, &r);
            let mut next = cur.clone();
            for (n, v) in next.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *n += v;
            }
            blocks.push(BlockCache { input: cur, z, bn });
            cur = next;
        }
        let logits = self.out.forward(&cur);
        let preds: Vec<f64> = (0..logits.rows()).map(|i| sigmoid(logits.get(i, 0))).collect();
        (preds.clone(), HeadCache { blocks, final_x: cur, preds })
    }

    pub fn forward_infer(&self, stats: &HeadStats, x: &Matrix) -> Vec<f64> {
        let mut cur = x.clone();
        for (block, st) in self.blocks.iter().zip(&stats.blocks) {
            let r = relu(&block.affine.forward(&cur));
            let y = bn_forward_infer(&block.bn, st, &r);
            for (n, v) in cur.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *n += v;
            }
        }
        let logits = self.out.forward(&cur);
        (0..logits.rows()).map(|i| sigmoid(logits.get(i, 0))).collect()
    }

    pub fn update_running(&self, stats: &mut HeadStats, cache: &HeadCache, momentum: f64) {
        for (st, c) in stats.blocks.iter_mut().zip(&cache.blocks) {
            bn_update_running(st, &c.bn, momentum);
        }
    }

    /// d preds -> d head input; parameter gradients accumulate.
    pub fn backward(&self, cache: &HeadCache, d_preds: &[f64], grads: &mut RewardHeadParams) -> Matrix {
        let n = d_preds.len();
        let mut d_logits = Matrix::zeros(n, 1);
        for i in 0..n {
            let p = cache.preds[i];
            d_logits.set(i, 0, d_preds[i] * p * (1.0 - p));
        }
        let mut d_cur = self.out.backward(&cache.final_x, &d_logits, &mut grads.out);
        for (block, (cache_b, grads_b)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            // block output = input + bn(relu(affine(input)))
            let d_bn_out = d_cur.clone();
            let d_relu = bn_backward(&block.bn, &cache_b.bn, &d_bn_out, &mut grads_b.bn);
            let d_z = relu_backward(&cache_b.z, &d_relu);
            let d_from_affine = block.affine.backward(&cache_b.input, &d_z, &mut grads_b.affine);
            for (d, extra) in d_cur.as_mut_slice().iter_mut().zip(d_from_affine.as_slice()) {
                *d += extra;
            }
        }
        d_cur
    }

    pub fn for_each(&self, f: &mut impl FnMut(String, &Matrix)) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("head.block{}.w", i + 1), &b.affine.w);
            f(format!("head.block{}.b", i + 1), &b.affine.b);
            f(format!("head.block{}.bn.gamma", i + 1), &b.bn.gamma);
            f(format!("head.block{}.bn.beta", i + 1), &b.bn.beta);
        }
        f("head.out.w".into(), &self.out.w);
        f("head.out.b".into(), &self.out.b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Matrix)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("head.block{}.w", i + 1), &mut b.affine.w);
            f(format!("head.block{}.b", i + 1), &mut b.affine.b);
            f(format!("head.block{}.bn.gamma", i + 1), &mut b.bn.gamma);
            f(format!("head.block{}.bn.beta", i + 1), &mut b.bn.beta);
        }
        f("head.out.w".into(), &mut self.out.w);
        f("head.out.b".into(), &mut self.out.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check_flat;
    use crate::numerics::SplitMix64;

    #[test]
    fn zero_output_weights_predict_exactly_half() {
        let mut rng = SplitMix64::new(4);
        let mut head = RewardHeadParams::init(5, &mut rng);
        head.out.w.fill(0.0);
        head.out.b.fill(0.0);
        let stats = head.fresh_stats();
        let x = Matrix::from_fn(3, 5, |_, _| rng.uniform(-2.0, 2.0));
        let preds = head.forward_infer(&stats, &x);
        assert!(preds.iter().all(|p| *p == 0.5));
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let mut rng = SplitMix64::new(5);
        let head = RewardHeadParams::init(6, &mut rng);
        let stats = head.fresh_stats();
        let x = Matrix::from_fn(20, 6, |_, _| rng.uniform(-5.0, 5.0));
        for p in head.forward_infer(&stats, &x) {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn zero_blocks_reduce_to_identity_in_inference() {
        // With zero block affines and fresh running stats with unit
        // scale/zero shift, every block contributes bn(relu(0)) which is
        // a constant ~0, so the head acts as affine + sigmoid of x.
        let mut rng = SplitMix64::new(6);
        let mut head = RewardHeadParams::init(4, &mut rng);
        for b in &mut head.blocks {
            b.affine.w.fill(0.0);
            b.affine.b.fill(0.0);
        }
        let stats = head.fresh_stats();
        let x = Matrix::from_fn(7, 4, |_, _| rng.uniform(-1.0, 1.0));
        let preds = head.forward_infer(&stats, &x);
        for i in 0..7 {
            let mut z = head.out.b.as_slice()[0];
            for j in 0..4 {
                z += head.out.w.get(0, j) * x.get(i, j);
            }
            assert!((preds[i] - sigmoid(z)).abs() < 1e-12);
        }
    }

    fn flatten(head: &RewardHeadParams) -> Vec<f64> {
        let mut out = Vec::new();
        head.for_each(&mut |_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    fn load(template: &RewardHeadParams, flat: &[f64]) -> RewardHeadParams {
        let mut h = template.clone();
        let mut off = 0;
        h.for_each_mut(&mut |_, m| {
            let len = m.len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + len]);
            off += len;
        });
        h
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SplitMix64::new(7);
        let head = RewardHeadParams::init(4, &mut rng);
        let x = Matrix::from_fn(5, 4, |_, _| rng.uniform(-1.0, 1.0));
        let targets: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();

        let (preds, cache) = head.forward_train(&x);
        let mut grads = RewardHeadParams::zeros(4);
        let d_preds: Vec<f64> = preds.iter().zip(&targets).map(|(p, t)| 2.0 * (p - t)).collect();
        let dx = head.backward(&cache, &d_preds, &mut grads);

        // Parameters and the input jointly.
        let mut params = flatten(&head);
        params.extend_from_slice(x.as_slice());
        let mut analytic = flatten(&grads);
        analytic.extend_from_slice(dx.as_slice());
        let head_len = flatten(&head).len();
        let mut loss = |p: &[f64]| {
            let h = load(&head, &p[..head_len]);
            let xm = Matrix::from_vec(5, 4, p[head_len..].to_vec()).unwrap();
            let (pr, _) = h.forward_train(&xm);
            pr.iter().zip(&targets).map(|(a, t)| (a - t) * (a - t)).sum()
        };
        let report = finite_diff_check_flat(&mut loss, &params, &analytic, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{}", report.render());
    }
}

//! Batched fully connected building blocks with hand-derived backward
//! passes: affine, batch normalization, and the three-affine-layer stack
//! used everywhere a fully connected network appears. Batches are plain
//! Matrix values with rows = samples.

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, SplitMix64};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Matrix,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine { w: Matrix::zeros(out_dim, in_dim), b: Matrix::zeros(out_dim, 1) }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut SplitMix64) -> Self {
        let limit = (1.0 / in_dim as f64).sqrt();
        Affine { w: Matrix::uniform(out_dim, in_dim, limit, rng), b: Matrix::zeros(out_dim, 1) }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        debug_assert_eq!(x.cols(), self.in_dim());
        let mut y = Matrix::zeros(x.rows(), self.out_dim());
        for i in 0..x.rows() {
            self.w.matvec(x.row(i), y.row_mut(i));
            for (v, b) in y.row_mut(i).iter_mut().zip(self.b.as_slice()) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates dW, db into `grads` and returns dx.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grads: &mut Affine) -> Matrix {
        let mut dx = Matrix::zeros(x.rows(), self.in_dim());
        for i in 0..x.rows() {
            grads.w.add_outer(dy.row(i), x.row(i), 1.0);
            for (g, d) in grads.b.as_mut_slice().iter_mut().zip(dy.row(i)) {
                *g += d;
            }
            self.w.matvec_t_add(dy.row(i), dx.row_mut(i));
        }
        dx
    }
}

/// Learnable scale/shift of a batch-norm layer. Running statistics live
/// in [`BnStats`]; they are state, not parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl BnParams {
    pub fn identity(dim: usize) -> Self {
        BnParams { gamma: Matrix::from_fn(dim, 1, |_, _| 1.0), beta: Matrix::zeros(dim, 1) }
    }

    pub fn zeros(dim: usize) -> Self {
        BnParams { gamma: Matrix::zeros(dim, 1), beta: Matrix::zeros(dim, 1) }
    }

    pub fn dim(&self) -> usize {
        self.gamma.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn fresh(dim: usize) -> Self {
        BnStats { running_mean: vec![0.0; dim], running_var: vec![1.0; dim] }
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Normalizes per feature over the batch (biased variance) and applies
/// gamma/beta. Running statistics are NOT updated here; callers that
/// train call [`bn_update_running`] with the returned cache so that pure
/// loss evaluations (gradient checking) stay side-effect free.
pub fn bn_forward_train(params: &BnParams, x: &Matrix) -> (Matrix, BnCache) {
    let n = x.rows();
    let d = x.cols();
    debug_assert_eq!(d, params.dim());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let c = x.get(i, j) - mean[j];
            var[j] += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let h = (x.get(i, j) - mean[j]) * inv_std[j];
            xhat.set(i, j, h);
            y.set(i, j, params.gamma.as_slice()[j] * h + params.beta.as_slice()[j]);
        }
    }
    (y, BnCache { xhat, inv_std, batch_mean: mean, batch_var: var })
}

pub fn bn_update_running(stats: &mut BnStats, cache: &BnCache, momentum: f64) {
    for j in 0..stats.running_mean.len() {
        stats.running_mean[j] =
            (1.0 - momentum) * stats.running_mean[j] + momentum * cache.batch_mean[j];
        stats.running_var[j] =
            (1.0 - momentum) * stats.running_var[j] + momentum * cache.batch_var[j];
    }
}

pub fn bn_forward_infer(params: &BnParams, stats: &BnStats, x: &Matrix) -> Matrix {
    let n = x.rows();
    let d = x.cols();
    let mut y = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let h = (x.get(i, j) - stats.running_mean[j]) / (stats.running_var[j] + BN_EPS).sqrt();
            y.set(i, j, params.gamma.as_slice()[j] * h + params.beta.as_slice()[j]);
        }
    }
    y
}

/// Batch-norm backward for the biased-variance training form. Accumulates
/// dgamma/dbeta into `grads` and returns dx.
pub fn bn_backward(params: &BnParams, cache: &BnCache, dy: &Matrix, grads: &mut BnParams) -> Matrix {
    let n = dy.rows();
    let d = dy.cols();
    let nf = n as f64;
    let mut sum_dy = vec![0.0; d];
    let mut sum_dy_xhat = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let dyij = dy.get(i, j);
            sum_dy[j] += dyij;
            sum_dy_xhat[j] += dyij * cache.xhat.get(i, j);
        }
    }
    for j in 0..d {
        grads.gamma.as_mut_slice()[j] += sum_dy_xhat[j];
        grads.beta.as_mut_slice()[j] += sum_dy[j];
    }
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let g = params.gamma.as_slice()[j] * cache.inv_std[j];
            let v = dy.get(i, j) - sum_dy[j] / nf - cache.xhat.get(i, j) * sum_dy_xhat[j] / nf;
            dx.set(i, j, g * v);
        }
    }
    dx
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in y.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// dx from dy given the pre-activation values.
pub fn relu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, p) in dx.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if *p <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Output activation of a three-layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalActivation {
    /// Plain affine output.
    None,
    /// tanh, used by the demographic encoder so the initial response
    /// memory respects the recurrent cell's [-1, 1] bound.
    Tanh,
}

/// Three affine layers with ReLU + batch norm after the first two
/// nonlinearities. The output layer has no batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp3 {
    pub l1: Affine,
    pub bn1: BnParams,
    pub l2: Affine,
    pub bn2: BnParams,
    pub l3: Affine,
    pub final_act: FinalActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp3Stats {
    pub bn1: BnStats,
    pub bn2: BnStats,
}

#[derive(Debug, Clone)]
pub struct Mlp3Cache {
    pub x: Matrix,
    pub z1: Matrix,
    pub bn1: Option<BnCache>,
    pub y1: Matrix,
    pub z2: Matrix,
    pub bn2: Option<BnCache>,
    pub y2: Matrix,
    pub out: Matrix,
}

impl Mlp3 {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize, final_act: FinalActivation) -> Self {
        Mlp3 {
            l1: Affine::zeros(hidden, in_dim),
            bn1: BnParams::zeros(hidden),
            l2: Affine::zeros(hidden, hidden),
            bn2: BnParams::zeros(hidden),
            l3: Affine::zeros(out_dim, hidden),
            final_act,
        }
    }

    pub fn init(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        final_act: FinalActivation,
        rng: &mut SplitMix64,
    ) -> Self {
        Mlp3 {
            l1: Affine::init(hidden, in_dim, rng),
            bn1: BnParams::identity(hidden),
            l2: Affine::init(hidden, hidden, rng),
            bn2: BnParams::identity(hidden),
            l3: Affine::init(out_dim, hidden, rng),
            final_act,
        }
    }

    pub fn fresh_stats(&self) -> Mlp3Stats {
        Mlp3Stats { bn1: BnStats::fresh(self.bn1.dim()), bn2: BnStats::fresh(self.bn2.dim()) }
    }

    pub fn forward_train(&self, x: &Matrix) -> (Matrix, Mlp3Cache) {
        let z1 = self.l1.forward(x);
        let r1 = relu(&z1);
        let (y1, bn1) = bn_forward_train(&self.bn1, &r1);
        let z2 = self.l2.forward(&y1);
        let r2 = relu(&z2);
        let (y2, bn2) = bn_forward_train(&self.bn2, &r2);
        let z3 = self.l3.forward(&y2);
        let out = match self.final_act {
            FinalActivation::None => z3,
            FinalActivation::Tanh => {
                let mut t = z3;
                for v in t.as_mut_slice() {
                    *v = v.tanh();
                }
                t
            }
        };
        (
            out.clone(),
            Mlp3Cache { x: x.clone(), z1, bn1: Some(bn1), y1, z2, bn2: Some(bn2), y2, out },
        )
    }

    pub fn forward_infer(&self, stats: &Mlp3Stats, x: &Matrix) -> Matrix {
        let r1 = relu(&self.l1.forward(x));
        let y1 = bn_forward_infer(&self.bn1, &stats.bn1, &r1);
        let r2 = relu(&self.l2.forward(&y1));
        let y2 = bn_forward_infer(&self.bn2, &stats.bn2, &r2);
        let mut z3 = self.l3.forward(&y2);
        if self.final_act == FinalActivation::Tanh {
            for v in z3.as_mut_slice() {
                *v = v.tanh();
            }
        }
        z3
    }

    pub fn update_running(&self, stats: &mut Mlp3Stats, cache: &Mlp3Cache, momentum: f64) {
        if let Some(c) = &cache.bn1 {
            bn_update_running(&mut stats.bn1, c, momentum);
        }
        if let Some(c) = &cache.bn2 {
            bn_update_running(&mut stats.bn2, c, momentum);
        }
    }

    pub fn backward(&self, cache: &Mlp3Cache, dy: &Matrix, grads: &mut Mlp3) -> Matrix {
        let dz3 = match self.final_act {
            FinalActivation::None => dy.clone(),
            FinalActivation::Tanh => {
                let mut d = dy.clone();
                for (g, o) in d.as_mut_slice().iter_mut().zip(cache.out.as_slice()) {
                    *g *= 1.0 - o * o;
                }
                d
            }
        };
        let dy2 = self.l3.backward(&cache.y2, &dz3, &mut grads.l3);
        let dr2 = bn_backward(&self.bn2, cache.bn2.as_ref().unwrap(), &dy2, &mut grads.bn2);
        let dz2 = relu_backward(&cache.z2, &dr2);
        let dy1 = self.l2.backward(&cache.y1, &dz2, &mut grads.l2);
        let dr1 = bn_backward(&self.bn1, cache.bn1.as_ref().unwrap(), &dy1, &mut grads.bn1);
        let dz1 = relu_backward(&cache.z1, &dr1);
        self.l1.backward(&cache.x, &dz1, &mut grads.l1)
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Matrix)) {
        f(format!("{prefix}.l1.w"), &self.l1.w);
        f(format!("{prefix}.l1.b"), &self.l1.b);
        f(format!("{prefix}.bn1.gamma"), &self.bn1.gamma);
        f(format!("{prefix}.bn1.beta"), &self.bn1.beta);
        f(format!("{prefix}.l2.w"), &self.l2.w);
        f(format!("{prefix}.l2.b"), &self.l2.b);
        f(format!("{prefix}.bn2.gamma"), &self.bn2.gamma);
        f(format!("{prefix}.bn2.beta"), &self.bn2.beta);
        f(format!("{prefix}.l3.w"), &self.l3.w);
        f(format!("{prefix}.l3.b"), &self.l3.b);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Matrix)) {
        f(format!("{prefix}.l1.w"), &mut self.l1.w);
        f(format!("{prefix}.l1.b"), &mut self.l1.b);
        f(format!("{prefix}.bn1.gamma"), &mut self.bn1.gamma);
        f(format!("{prefix}.bn1.beta"), &mut self.bn1.beta);
        f(format!("{prefix}.l2.w"), &mut self.l2.w);
        f(format!("{prefix}.l2.b"), &mut self.l2.b);
        f(format!("{prefix}.bn2.gamma"), &mut self.bn2.gamma);
        f(format!("{prefix}.bn2.beta"), &mut self.bn2.beta);
        f(format!("{prefix}.l3.w"), &mut self.l3.w);
        f(format!("{prefix}.l3.b"), &mut self.l3.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check_flat;

    fn random_batch(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_fn(n, d, |_, _| rng.uniform(-1.5, 1.5))
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = SplitMix64::new(4);
        let layer = Affine::init(3, 4, &mut rng);
        let x = random_batch(5, 4, 10);

        let mut grads = Affine::zeros(3, 4);
        let y = layer.forward(&x);
        let dy = Matrix::from_fn(5, 3, |_, _| 1.0);
        let _ = layer.backward(&x, &dy, &mut grads);

        let mut params: Vec<f64> = layer.w.as_slice().to_vec();
        params.extend_from_slice(layer.b.as_slice());
        let mut analytic: Vec<f64> = grads.w.as_slice().to_vec();
        analytic.extend_from_slice(grads.b.as_slice());
        let mut loss = |p: &[f64]| {
            let w = Matrix::from_vec(3, 4, p[..12].to_vec()).unwrap();
            let b = Matrix::from_vec(3, 1, p[12..].to_vec()).unwrap();
            let l = Affine { w, b };
            l.forward(&x).as_slice().iter().sum()
        };
        let report = finite_diff_check_flat(&mut loss, &params, &analytic, 1e-5, 1e-6).unwrap();
        assert!(report.pass, "{}", report.render());
        assert_eq!(y.rows(), 5);
    }

    #[test]
    fn bn_train_normalizes_batch() {
        let params = BnParams::identity(3);
        let x = random_batch(64, 3, 77);
        let (y, _) = bn_forward_train(&params, &x);
        for j in 0..3 {
            let mean: f64 = (0..64).map(|i| y.get(i, j)).sum::<f64>() / 64.0;
            let var: f64 = (0..64).map(|i| (y.get(i, j) - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bn_infer_with_fresh_stats_is_near_identity() {
        let params = BnParams::identity(2);
        let stats = BnStats::fresh(2);
        let x = random_batch(4, 2, 5);
        let y = bn_forward_infer(&params, &stats, &x);
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        // Check both the parameter gradient and the input gradient. The
        // loss mixes coordinates so batch coupling is exercised.
        let mut rng = SplitMix64::new(6);
        let params = BnParams {
            gamma: Matrix::from_fn(3, 1, |_, _| rng.uniform(0.5, 1.5)),
            beta: Matrix::from_fn(3, 1, |_, _| rng.uniform(-0.5, 0.5)),
        };
        let x = random_batch(6, 3, 123);
        let weights = random_batch(6, 3, 321);

        let loss_of = |p: &BnParams, xm: &Matrix| -> f64 {
            let (y, _) = bn_forward_train(p, xm);
            y.as_slice().iter().zip(weights.as_slice()).map(|(a, w)| a * w).sum()
        };

        let (_, cache) = bn_forward_train(&params, &x);
        let mut grads = BnParams::zeros(3);
        let dx = bn_backward(&params, &cache, &weights, &mut grads);

        let mut flat: Vec<f64> = params.gamma.as_slice().to_vec();
        flat.extend_from_slice(params.beta.as_slice());
        flat.extend_from_slice(x.as_slice());
        let mut analytic: Vec<f64> = grads.gamma.as_slice().to_vec();
        analytic.extend_from_slice(grads.beta.as_slice());
        analytic.extend_from_slice(dx.as_slice());
        let mut loss = |p: &[f64]| {
            let g = Matrix::from_vec(3, 1, p[..3].to_vec()).unwrap();
            let b = Matrix::from_vec(3, 1, p[3..6].to_vec()).unwrap();
            let xm = Matrix::from_vec(6, 3, p[6..].to_vec()).unwrap();
            loss_of(&BnParams { gamma: g, beta: b }, &xm)
        };
        let report = finite_diff_check_flat(&mut loss, &flat, &analytic, 1e-5, 1e-5).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    fn flatten_mlp(m: &Mlp3) -> Vec<f64> {
        let mut out = Vec::new();
        m.for_each("m", &mut |_, mat| out.extend_from_slice(mat.as_slice()));
        out
    }

    fn load_mlp(template: &Mlp3, flat: &[f64]) -> Mlp3 {
        let mut m = template.clone();
        let mut off = 0;
        m.for_each_mut("m", &mut |_, mat| {
            let len = mat.len();
            mat.as_mut_slice().copy_from_slice(&flat[off..off + len]);
            off += len;
        });
        m
    }

    #[test]
    fn mlp3_backward_matches_finite_differences() {
        for final_act in [FinalActivation::None, FinalActivation::Tanh] {
            let mut rng = SplitMix64::new(88);
            let mlp = Mlp3::init(4, 5, 3, final_act, &mut rng);
            let x = random_batch(6, 4, 9);

            let (out, cache) = mlp.forward_train(&x);
            let mut grads = Mlp3::zeros(4, 5, 3, final_act);
            let dy = Matrix::from_fn(6, 3, |i, j| 0.1 + 0.05 * (i + j) as f64);
            let _ = mlp.backward(&cache, &dy, &mut grads);

            let params = flatten_mlp(&mlp);
            let analytic = flatten_mlp(&grads);
            let mut loss = |p: &[f64]| {
                let m = load_mlp(&mlp, p);
                let (y, _) = m.forward_train(&x);
                y.as_slice()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * (0.1 + 0.05 * ((k / 3) + (k % 3)) as f64))
                    .sum()
            };
            let report =
                finite_diff_check_flat(&mut loss, &params, &analytic, 1e-5, 1e-4).unwrap();
            assert!(report.pass, "final_act {final_act:?}: {}", report.render());
            assert_eq!(out.cols(), 3);
        }
    }

    #[test]
    fn mlp3_infer_is_deterministic_and_train_updates_running_stats() {
        let mut rng = SplitMix64::new(3);
        let mlp = Mlp3::init(3, 4, 2, FinalActivation::None, &mut rng);
        let mut stats = mlp.fresh_stats();
        let x = random_batch(8, 3, 44);
        let (_, cache) = mlp.forward_train(&x);
        mlp.update_running(&mut stats, &cache, BN_MOMENTUM);
        assert!(stats.bn1.running_mean.iter().any(|v| *v != 0.0));
        let y1 = mlp.forward_infer(&stats, &x);
        let y2 = mlp.forward_infer(&stats, &x);
        assert_eq!(y1, y2);
    }
}

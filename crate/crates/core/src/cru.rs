//! The coupled recurrent unit: two coupled memories (action pathway,
//! response pathway), five gates, the forward step, the hand-derived
//! backward step and sequence unrolling.
//!
//! Update order per step, writing `a_in`/`o_in` for the step inputs and
//! `(ap, op)` for the previous memories:
//!
//!   z_a = sigma(W_za a_in + U_za ap)
//!   r_a = sigma(W_ra a_in + U_ra ap)
//!   z_o = sigma(W_zo o_in + U_zo op)
//!   r_o = sigma(W_ro o_in + U_ro op)
//!   r_i = sigma(W_i  a_in + U_i  op)
//!   a_hat = tanh(W_a a_in + U_a (r_a o ap))
//!   o_hat = tanh(W_o o_in + U_o (r_o o op) + I_o (r_i o a_hat))
//!   a' = (1 - z_a) o ap + z_a o a_hat
//!   o' = (1 - z_o) o op + z_o o o_hat
//!
//! There are no bias vectors anywhere in the cell. The interaction gate
//! r_i lives in action space (n_a) and injects the *post-tanh* action
//! candidate into the response candidate through I_o. The action pathway
//! never reads a response quantity, so o inputs cannot perturb a*.

use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};
use crate::numerics::{sigmoid_slice, tanh_slice, Matrix, SplitMix64};

/// The sixteen learnable matrices of the cell. n_a is the action
/// embedding width, n_o the response state width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CruCell {
    pub n_a: usize,
    pub n_o: usize,
    pub w_za: Matrix,
    pub u_za: Matrix,
    pub w_ra: Matrix,
    pub u_ra: Matrix,
    pub w_a: Matrix,
    pub u_a: Matrix,
    pub w_i: Matrix,
    pub u_i: Matrix,
    pub w_zo: Matrix,
    pub u_zo: Matrix,
    pub w_ro: Matrix,
    pub u_ro: Matrix,
    pub w_o: Matrix,
    pub u_o: Matrix,
    pub i_o: Matrix,
}

impl CruCell {
    pub fn zeros(n_a: usize, n_o: usize) -> Self {
        CruCell {
            n_a,
            n_o,
            w_za: Matrix::zeros(n_a, n_a),
            u_za: Matrix::zeros(n_a, n_a),
            w_ra: Matrix::zeros(n_a, n_a),
            u_ra: Matrix::zeros(n_a, n_a),
            w_a: Matrix::zeros(n_a, n_a),
            u_a: Matrix::zeros(n_a, n_a),
            w_i: Matrix::zeros(n_a, n_a),
            u_i: Matrix::zeros(n_a, n_o),
            w_zo: Matrix::zeros(n_o, n_o),
            u_zo: Matrix::zeros(n_o, n_o),
            w_ro: Matrix::zeros(n_o, n_o),
            u_ro: Matrix::zeros(n_o, n_o),
            w_o: Matrix::zeros(n_o, n_o),
            u_o: Matrix::zeros(n_o, n_o),
            i_o: Matrix::zeros(n_o, n_a),
        }
    }

    /// Fan-in scaled uniform initialization for every matrix.
    pub fn init(n_a: usize, n_o: usize, rng: &mut SplitMix64) -> Self {
        let mut cell = CruCell::zeros(n_a, n_o);
        cell.for_each_mut(&mut |_, m| {
            let limit = (1.0 / m.cols() as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = rng.uniform(-limit, limit);
            }
        });
        cell
    }

    pub fn for_each(&self, f: &mut impl FnMut(&'static str, &Matrix)) {
        f("cru.w_za", &self.w_za);
        f("cru.u_za", &self.u_za);
        f("cru.w_ra", &self.w_ra);
        f("cru.u_ra", &self.u_ra);
        f("cru.w_a", &self.w_a);
        f("cru.u_a", &self.u_a);
        f("cru.w_i", &self.w_i);
        f("cru.u_i", &self.u_i);
        f("cru.w_zo", &self.w_zo);
        f("cru.u_zo", &self.u_zo);
        f("cru.w_ro", &self.w_ro);
        f("cru.u_ro", &self.u_ro);
        f("cru.w_o", &self.w_o);
        f("cru.u_o", &self.u_o);
        f("cru.i_o", &self.i_o);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&'static str, &mut Matrix)) {
        f("cru.w_za", &mut self.w_za);
        f("cru.u_za", &mut self.u_za);
        f("cru.w_ra", &mut self.w_ra);
        f("cru.u_ra", &mut self.u_ra);
        f("cru.w_a", &mut self.w_a);
        f("cru.u_a", &mut self.u_a);
        f("cru.w_i", &mut self.w_i);
        f("cru.u_i", &mut self.u_i);
        f("cru.w_zo", &mut self.w_zo);
        f("cru.u_zo", &mut self.u_zo);
        f("cru.w_ro", &mut self.w_ro);
        f("cru.u_ro", &mut self.u_ro);
        f("cru.w_o", &mut self.w_o);
        f("cru.u_o", &mut self.u_o);
        f("cru.i_o", &mut self.i_o);
    }

    fn check_dims(&self, a_in: &[f64], o_in: &[f64], prev: &CruState) -> Result<()> {
        if a_in.len() != self.n_a || o_in.len() != self.n_o {
            return Err(CrnError::Dimension(format!(
                "cru inputs ({}, {}) vs cell ({}, {})",
                a_in.len(),
                o_in.len(),
                self.n_a,
                self.n_o
            )));
        }
        if prev.action.len() != self.n_a || prev.response.len() != self.n_o {
            return Err(CrnError::Dimension("cru state width mismatch".into()));
        }
        if a_in.iter().chain(o_in.iter()).any(|v| !v.is_finite()) {
            return Err(CrnError::Numeric("cru inputs must be finite".into()));
        }
        Ok(())
    }
}

/// The paired memories a* (action pathway) and o* (response pathway).
/// The convex update keeps every component in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CruState {
    pub action: Vec<f64>,
    pub response: Vec<f64>,
}

impl CruState {
    pub fn zeros(n_a: usize, n_o: usize) -> Self {
        CruState { action: vec![0.0; n_a], response: vec![0.0; n_o] }
    }

    pub fn within_bounds(&self) -> bool {
        self.action.iter().chain(self.response.iter()).all(|v| v.abs() <= 1.0)
    }
}

/// Everything the backward step needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub a_in: Vec<f64>,
    pub o_in: Vec<f64>,
    pub prev: CruState,
    pub z_a: Vec<f64>,
    pub r_a: Vec<f64>,
    pub z_o: Vec<f64>,
    pub r_o: Vec<f64>,
    pub r_i: Vec<f64>,
    pub a_hat: Vec<f64>,
    pub o_hat: Vec<f64>,
}

/// Gradients for one application of the cell, same shapes as the cell.
pub type CruGrads = CruCell;

/// Gradient flowing into a step's inputs and previous state.
#[derive(Debug, Clone)]
pub struct StepInputGrads {
    pub a_in: Vec<f64>,
    pub o_in: Vec<f64>,
    pub prev: CruState,
}

fn hadamard(a: &[f64], b: &[f64], out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
        *o = x * y;
    }
}

/// One forward step of the cell.
pub fn cru_step(
    cell: &CruCell,
    a_in: &[f64],
    o_in: &[f64],
    prev: &CruState,
) -> Result<(CruState, StepCache)> {
    cell.check_dims(a_in, o_in, prev)?;
    let (n_a, n_o) = (cell.n_a, cell.n_o);
    let ap = &prev.action;
    let op = &prev.response;

    let mut pre_a = vec![0.0; n_a];
    let mut tmp_a = vec![0.0; n_a];
    let mut pre_o = vec![0.0; n_o];
    let mut tmp_o = vec![0.0; n_o];

    let gate = |w: &Matrix, x: &[f64], u: &Matrix, h: &[f64], pre: &mut [f64], tmp: &mut [f64]| {
        w.matvec(x, pre);
        u.matvec(h, tmp);
        for (p, t) in pre.iter_mut().zip(tmp.iter()) {
            *p += t;
        }
    };

    let mut z_a = vec![0.0; n_a];
    gate(&cell.w_za, a_in, &cell.u_za, ap, &mut pre_a, &mut tmp_a);
    sigmoid_slice(&pre_a, &mut z_a);

    let mut r_a = vec![0.0; n_a];
    gate(&cell.w_ra, a_in, &cell.u_ra, ap, &mut pre_a, &mut tmp_a);
    sigmoid_slice(&pre_a, &mut r_a);

    let mut z_o = vec![0.0; n_o];
    gate(&cell.w_zo, o_in, &cell.u_zo, op, &mut pre_o, &mut tmp_o);
    sigmoid_slice(&pre_o, &mut z_o);

    let mut r_o = vec![0.0; n_o];
    gate(&cell.w_ro, o_in, &cell.u_ro, op, &mut pre_o, &mut tmp_o);
    sigmoid_slice(&pre_o, &mut r_o);

    // Interaction gate: action-space pre-activation fed by o memory.
    let mut r_i = vec![0.0; n_a];
    cell.w_i.matvec(a_in, &mut pre_a);
    cell.u_i.matvec(op, &mut tmp_a);
    for (p, t) in pre_a.iter_mut().zip(tmp_a.iter()) {
        *p += t;
    }
    sigmoid_slice(&pre_a, &mut r_i);

    // Action candidate.
    let mut gated_ap = vec![0.0; n_a];
    hadamard(&r_a, ap, &mut gated_ap);
    cell.w_a.matvec(a_in, &mut pre_a);
    cell.u_a.matvec(&gated_ap, &mut tmp_a);
    for (p, t) in pre_a.iter_mut().zip(tmp_a.iter()) {
        *p += t;
    }
    let mut a_hat = vec![0.0; n_a];
    tanh_slice(&pre_a, &mut a_hat);

    // Response candidate with the interaction term.
    let mut gated_op = vec![0.0; n_o];
    hadamard(&r_o, op, &mut gated_op);
    let mut gated_ahat = vec![0.0; n_a];
    hadamard(&r_i, &a_hat, &mut gated_ahat);
    cell.w_o.matvec(o_in, &mut pre_o);
    cell.u_o.matvec(&gated_op, &mut tmp_o);
    for (p, t) in pre_o.iter_mut().zip(tmp_o.iter()) {
        *p += t;
    }
    cell.i_o.matvec(&gated_ahat, &mut tmp_o);
    for (p, t) in pre_o.iter_mut().zip(tmp_o.iter()) {
        *p += t;
    }
    let mut o_hat = vec![0.0; n_o];
    tanh_slice(&pre_o, &mut o_hat);

    // Convex memory updates.
    let mut action = vec![0.0; n_a];
    for i in 0..n_a {
        action[i] = (1.0 - z_a[i]) * ap[i] + z_a[i] * a_hat[i];
    }
    let mut response = vec![0.0; n_o];
    for i in 0..n_o {
        response[i] = (1.0 - z_o[i]) * op[i] + z_o[i] * o_hat[i];
    }

    let next = CruState { action, response };
    let cache = StepCache {
        a_in: a_in.to_vec(),
        o_in: o_in.to_vec(),
        prev: prev.clone(),
        z_a,
        r_a,
        z_o,
        r_o,
        r_i,
        a_hat,
        o_hat,
    };
    Ok((next, cache))
}

/// Chain rule through one forward step. Matrix gradients accumulate into
/// `grads` (additively across time steps); input/previous-state gradients
/// are returned.
pub fn cru_backward(
    cell: &CruCell,
    cache: &StepCache,
    grad_next: &CruState,
    grads: &mut CruGrads,
) -> Result<StepInputGrads> {
    let (n_a, n_o) = (cell.n_a, cell.n_o);
    if cache.a_in.len() != n_a || cache.o_in.len() != n_o {
        return Err(CrnError::Consistency("cache does not match cell dimensions".into()));
    }
    if grad_next.action.len() != n_a || grad_next.response.len() != n_o {
        return Err(CrnError::Dimension("grad_next width mismatch".into()));
    }
    let ap = &cache.prev.action;
    let op = &cache.prev.response;
    let ga = &grad_next.action;
    let go = &grad_next.response;

    let mut d_a_in = vec![0.0; n_a];
    let mut d_o_in = vec![0.0; n_o];
    let mut d_ap = vec![0.0; n_a];
    let mut d_op = vec![0.0; n_o];

    // o' = (1 - z_o) o op + z_o o o_hat
    let mut d_z_o = vec![0.0; n_o];
    let mut d_o_hat = vec![0.0; n_o];
    for i in 0..n_o {
        d_z_o[i] = go[i] * (cache.o_hat[i] - op[i]);
        d_o_hat[i] = go[i] * cache.z_o[i];
        d_op[i] += go[i] * (1.0 - cache.z_o[i]);
    }

    // a' = (1 - z_a) o ap + z_a o a_hat
    let mut d_z_a = vec![0.0; n_a];
    let mut d_a_hat = vec![0.0; n_a];
    for i in 0..n_a {
        d_z_a[i] = ga[i] * (cache.a_hat[i] - ap[i]);
        d_a_hat[i] = ga[i] * cache.z_a[i];
        d_ap[i] += ga[i] * (1.0 - cache.z_a[i]);
    }

    // o_hat = tanh(W_o o_in + U_o (r_o o op) + I_o (r_i o a_hat))
    let mut pre_o_hat = vec![0.0; n_o];
    for i in 0..n_o {
        pre_o_hat[i] = d_o_hat[i] * (1.0 - cache.o_hat[i] * cache.o_hat[i]);
    }
    let mut gated_op = vec![0.0; n_o];
    hadamard(&cache.r_o, op, &mut gated_op);
    let mut gated_ahat = vec![0.0; n_a];
    hadamard(&cache.r_i, &cache.a_hat, &mut gated_ahat);
    grads.w_o.add_outer(&pre_o_hat, &cache.o_in, 1.0);
    grads.u_o.add_outer(&pre_o_hat, &gated_op, 1.0);
    grads.i_o.add_outer(&pre_o_hat, &gated_ahat, 1.0);
    cell.w_o.matvec_t_add(&pre_o_hat, &mut d_o_in);
    let mut d_gated_op = vec![0.0; n_o];
    cell.u_o.matvec_t_add(&pre_o_hat, &mut d_gated_op);
    let mut d_r_o = vec![0.0; n_o];
    for i in 0..n_o {
        d_r_o[i] = d_gated_op[i] * op[i];
        d_op[i] += d_gated_op[i] * cache.r_o[i];
    }
    let mut d_gated_ahat = vec![0.0; n_a];
    cell.i_o.matvec_t_add(&pre_o_hat, &mut d_gated_ahat);
    let mut d_r_i = vec![0.0; n_a];
    for i in 0..n_a {
        d_r_i[i] = d_gated_ahat[i] * cache.a_hat[i];
        // a_hat feeds both the action memory update and the interaction
        // term; its total gradient accumulates here.
        d_a_hat[i] += d_gated_ahat[i] * cache.r_i[i];
    }

    // a_hat = tanh(W_a a_in + U_a (r_a o ap))
    let mut pre_a_hat = vec![0.0; n_a];
    for i in 0..n_a {
        pre_a_hat[i] = d_a_hat[i] * (1.0 - cache.a_hat[i] * cache.a_hat[i]);
    }
    let mut gated_ap = vec![0.0; n_a];
    hadamard(&cache.r_a, ap, &mut gated_ap);
    grads.w_a.add_outer(&pre_a_hat, &cache.a_in, 1.0);
    grads.u_a.add_outer(&pre_a_hat, &gated_ap, 1.0);
    cell.w_a.matvec_t_add(&pre_a_hat, &mut d_a_in);
    let mut d_gated_ap = vec![0.0; n_a];
    cell.u_a.matvec_t_add(&pre_a_hat, &mut d_gated_ap);
    let mut d_r_a = vec![0.0; n_a];
    for i in 0..n_a {
        d_r_a[i] = d_gated_ap[i] * ap[i];
        d_ap[i] += d_gated_ap[i] * cache.r_a[i];
    }

    // r_i = sigma(W_i a_in + U_i op)
    let mut pre = vec![0.0; n_a];
    for i in 0..n_a {
        pre[i] = d_r_i[i] * cache.r_i[i] * (1.0 - cache.r_i[i]);
    }
    grads.w_i.add_outer(&pre, &cache.a_in, 1.0);
    grads.u_i.add_outer(&pre, op, 1.0);
    cell.w_i.matvec_t_add(&pre, &mut d_a_in);
    cell.u_i.matvec_t_add(&pre, &mut d_op);

    // r_o, z_o = sigma(W o_in + U op)
    let mut pre_o = vec![0.0; n_o];
    for i in 0..n_o {
        pre_o[i] = d_r_o[i] * cache.r_o[i] * (1.0 - cache.r_o[i]);
    }
    grads.w_ro.add_outer(&pre_o, &cache.o_in, 1.0);
    grads.u_ro.add_outer(&pre_o, op, 1.0);
    cell.w_ro.matvec_t_add(&pre_o, &mut d_o_in);
    cell.u_ro.matvec_t_add(&pre_o, &mut d_op);

    for i in 0..n_o {
        pre_o[i] = d_z_o[i] * cache.z_o[i] * (1.0 - cache.z_o[i]);
    }
    grads.w_zo.add_outer(&pre_o, &cache.o_in, 1.0);
    grads.u_zo.add_outer(&pre_o, op, 1.0);
    cell.w_zo.matvec_t_add(&pre_o, &mut d_o_in);
    cell.u_zo.matvec_t_add(&pre_o, &mut d_op);

    // r_a, z_a = sigma(W a_in + U ap)
    for i in 0..n_a {
        pre[i] = d_r_a[i] * cache.r_a[i] * (1.0 - cache.r_a[i]);
    }
    grads.w_ra.add_outer(&pre, &cache.a_in, 1.0);
    grads.u_ra.add_outer(&pre, ap, 1.0);
    cell.w_ra.matvec_t_add(&pre, &mut d_a_in);
    cell.u_ra.matvec_t_add(&pre, &mut d_ap);

    for i in 0..n_a {
        pre[i] = d_z_a[i] * cache.z_a[i] * (1.0 - cache.z_a[i]);
    }
    grads.w_za.add_outer(&pre, &cache.a_in, 1.0);
    grads.u_za.add_outer(&pre, ap, 1.0);
    cell.w_za.matvec_t_add(&pre, &mut d_a_in);
    cell.u_za.matvec_t_add(&pre, &mut d_ap);

    Ok(StepInputGrads {
        a_in: d_a_in,
        o_in: d_o_in,
        prev: CruState { action: d_ap, response: d_op },
    })
}

/// Folds cru_step left to right. An empty input list returns the initial
/// state unchanged.
pub fn unroll(
    cell: &CruCell,
    inputs: &[(Vec<f64>, Vec<f64>)],
    init: &CruState,
) -> Result<(CruState, Vec<StepCache>)> {
    let mut state = init.clone();
    let mut caches = Vec::with_capacity(inputs.len());
    for (a_in, o_in) in inputs {
        let (next, cache) = cru_step(cell, a_in, o_in, &state)?;
        caches.push(cache);
        state = next;
    }
    Ok((state, caches))
}

/// Backward through a full unroll given the gradient at the final state.
/// Returns per-step input gradients (aligned with `caches`) and the
/// gradient at the initial state.
pub fn unroll_backward(
    cell: &CruCell,
    caches: &[StepCache],
    grad_final: &CruState,
    grads: &mut CruGrads,
) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, CruState)> {
    let mut grad_state = grad_final.clone();
    let mut input_grads = vec![(Vec::new(), Vec::new()); caches.len()];
    for (i, cache) in caches.iter().enumerate().rev() {
        let step = cru_backward(cell, cache, &grad_state, grads)?;
        input_grads[i] = (step.a_in, step.o_in);
        grad_state = step.prev;
    }
    Ok((input_grads, grad_state))
}

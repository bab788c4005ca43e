//! Numerical check that the gated logit anchor splits into a regularizer plus a constant.
//!
//! For a buffer whose observations are aliased (one `s`, several planner logits), the anchor
//! loss equals the gate-weighted pull of `μ_θ(s)` toward the gate-weighted mean logit plus a
//! gate-weighted variance that does not depend on `θ`. The two sides are computed by separate
//! code paths: the anchor through the training loss on one column per buffer entry, the
//! regularizer from per-observation statistics on one column per observation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nav_env::{ACT_DIM, OBS_DIM};
use crate::nn::SquashedGaussianPolicy;
use crate::p2p_sac::{anchor_terms, planner_logit, LOGIT_MARGIN};

/// One observation with the planner logits the buffer holds for it.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasedBufferSlice {
    pub s: [f64; OBS_DIM],
    /// `ξ†_k`, one per stored pair.
    pub xi: Vec<DVector<f64>>,
    pub u_dagger: Vec<DVector<f64>>,
    /// Detached gate weights `m_k`.
    pub gate: Vec<f64>,
}

impl AliasedBufferSlice {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.xi.is_empty() || self.gate.len() != self.xi.len() || self.u_dagger.len() != self.xi.len() {
            return Err(Error::ShapeMismatch("slice pairs and gates".into()));
        }
        if self.xi.iter().any(|x| x.len() != p) {
            return Err(Error::ShapeMismatch(format!("logits must have {p} entries")));
        }
        if self.gate.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::InvalidParameter("gate weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-observation statistics under the uniform empirical measure over the slice's pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerStats {
    pub m_bar: f64,
    pub xi_tilde: DVector<f64>,
    pub v_tilde: f64,
}

pub fn stats(slice: &AliasedBufferSlice) -> RegularizerStats {
    let p = slice.xi.first().map_or(ACT_DIM, |x| x.len());
    let k = slice.len() as f64;
    let m_bar = slice.gate.iter().sum::<f64>() / k;
    if m_bar == 0.0 {
        return RegularizerStats { m_bar: 0.0, xi_tilde: DVector::zeros(p), v_tilde: 0.0 };
    }
    let mut weighted = DVector::zeros(p);
    let mut second = 0.0;
    for (x, &m) in slice.xi.iter().zip(&slice.gate) {
        weighted += x * (m / k);
        second += m / k * x.norm_squared();
    }
    let xi_tilde = weighted / m_bar;
    let v_tilde = (second - m_bar * xi_tilde.norm_squared()) / p as f64;
    RegularizerStats { m_bar, xi_tilde, v_tilde }
}

/// Both sides of `E[w‖a − X‖²] = w̄‖a − X̃‖² + E[w‖X‖²] − w̄‖X̃‖²` under uniform weights.
pub fn weighted_bias_variance(w: &[f64], xs: &[DVector<f64>], a: &DVector<f64>) -> (f64, f64) {
    let k = xs.len() as f64;
    let lhs = w.iter().zip(xs).map(|(wi, x)| wi * (a - x).norm_squared()).sum::<f64>() / k;
    let w_bar = w.iter().sum::<f64>() / k;
    let mean_wx = xs.iter().zip(w).fold(DVector::zeros(a.len()), |acc, (x, wi)| acc + x * *wi) / k;
    let x_tilde = mean_wx / w_bar;
    let second = w.iter().zip(xs).map(|(wi, x)| wi * x.norm_squared()).sum::<f64>() / k;
    let rhs = w_bar * (a - &x_tilde).norm_squared() + second - w_bar * x_tilde.norm_squared();
    (lhs, rhs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub anchor: f64,
    pub regularizer: f64,
    /// `β_f E_s[Ṽ]` from the statistics.
    pub constant: f64,
    /// `|L_anchor − R − C|`.
    pub loss_gap: f64,
    /// `‖∇L_anchor − ∇R‖∞`.
    pub grad_gap: f64,
}

/// Weighted observation columns and logits for every buffer entry.
fn entry_batch(slices: &[AliasedBufferSlice], p: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n: usize = slices.iter().map(|s| s.len()).sum();
    let mut s = DMatrix::zeros(OBS_DIM, n);
    let mut xi = DMatrix::zeros(p, n);
    let mut m = DVector::zeros(n);
    let mut j = 0;
    for sl in slices {
        for (x, &g) in sl.xi.iter().zip(&sl.gate) {
            s.set_column(j, &DVector::from_column_slice(&sl.s));
            xi.set_column(j, x);
            m[j] = g;
            j += 1;
        }
    }
    (s, xi, m)
}

/// Mature-phase anchor (`β_t = β_f`, `h = 1`) over the whole buffer and its parameter gradient,
/// through the training loss.
pub fn anchor_and_grad(policy: &SquashedGaussianPolicy<f64>, slices: &[AliasedBufferSlice], beta_f: f64) -> (f64, Vec<f64>) {
    let (s, xi, m) = entry_batch(slices, policy.act_dim);
    let mu = policy.logits(&s);
    let (loss, d_mu) = anchor_terms(&mu, &xi, &(m * beta_f));
    (loss, policy.logit_backward(&s, &d_mu).flat())
}

/// `R = (β_f/p) E_s[m̄(s)‖μ(s) − ξ̃(s)‖²]` with `s` weighted by its share of buffer entries,
/// and its gradient `(2β_f/p) E_s[m̄(s) (μ(s) − ξ̃(s))ᵀ ∂μ/∂θ]`.
pub fn regularizer_and_grad(policy: &SquashedGaussianPolicy<f64>, slices: &[AliasedBufferSlice], beta_f: f64) -> (f64, Vec<f64>, f64) {
    let p = policy.act_dim;
    let total: usize = slices.iter().map(|s| s.len()).sum();
    let s = DMatrix::from_fn(OBS_DIM, slices.len(), |i, j| slices[j].s[i]);
    let mu = policy.logits(&s);
    let mut d_mu = DMatrix::zeros(p, slices.len());
    let (mut r, mut c) = (0.0, 0.0);
    for (j, sl) in slices.iter().enumerate() {
        let st = stats(sl);
        let rho = sl.len() as f64 / total as f64;
        let diff = mu.column(j) - &st.xi_tilde;
        r += rho * beta_f / p as f64 * st.m_bar * diff.norm_squared();
        c += rho * beta_f * st.v_tilde;
        d_mu.set_column(j, &(diff * (rho * 2.0 * beta_f / p as f64 * st.m_bar)));
    }
    (r, policy.logit_backward(&s, &d_mu).flat(), c)
}

pub const GRAD_TOL: f64 = 1e-6;
pub const LOSS_TOL: f64 = 1e-9;

pub fn decomposition(policy: &SquashedGaussianPolicy<f64>, slices: &[AliasedBufferSlice], beta_f: f64) -> Result<DecompositionReport> {
    if slices.is_empty() {
        return Err(Error::InvalidParameter("no slices".into()));
    }
    for sl in slices {
        sl.validate(policy.act_dim)?;
    }
    let (anchor, g1) = anchor_and_grad(policy, slices, beta_f);
    let (regularizer, g2, constant) = regularizer_and_grad(policy, slices, beta_f);
    let grad_gap = g1.iter().zip(&g2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DecompositionReport { anchor, regularizer, constant, loss_gap: (anchor - regularizer - constant).abs(), grad_gap })
}

/// Checks the gradient identity and the constant offset within [`GRAD_TOL`] and [`LOSS_TOL`].
pub fn verify_decomposition(policy: &SquashedGaussianPolicy<f64>, slices: &[AliasedBufferSlice], beta_f: f64) -> Result<DecompositionReport> {
    let rep = decomposition(policy, slices, beta_f)?;
    if rep.grad_gap > GRAD_TOL || rep.loss_gap > LOSS_TOL {
        return Err(Error::DecompositionViolated(format!(
            "gradient gap {:.3e}, loss gap {:.3e}",
            rep.grad_gap, rep.loss_gap
        )));
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub regularizer: f64,
    pub bound: f64,
}

/// `R ≤ (β_f/p) max_s ‖μ(s) − ξ̃(s)‖²`.
pub fn bound_check(policy: &SquashedGaussianPolicy<f64>, slices: &[AliasedBufferSlice], beta_f: f64) -> Result<BoundReport> {
    for sl in slices {
        sl.validate(policy.act_dim)?;
    }
    let p = policy.act_dim as f64;
    let (regularizer, _, _) = regularizer_and_grad(policy, slices, beta_f);
    let s = DMatrix::from_fn(OBS_DIM, slices.len(), |i, j| slices[j].s[i]);
    let mu = policy.logits(&s);
    let sup = slices
        .iter()
        .enumerate()
        .map(|(j, sl)| (mu.column(j) - stats(sl).xi_tilde).norm_squared())
        .fold(0.0, f64::max);
    let bound = beta_f / p * sup;
    // Rounding slack relative to the bound's own magnitude.
    if regularizer > bound * (1.0 + 1e-12) {
        return Err(Error::BoundViolated(format!("R = {regularizer} exceeds {bound}")));
    }
    Ok(BoundReport { regularizer, bound })
}

/// Random aliased buffer: `n_slices` observations, each with 1 to `max_pairs` planner actions
/// drawn in the box and gates in `(0, 1)`.
pub fn random_slices<R: Rng + ?Sized>(rng: &mut R, n_slices: usize, max_pairs: usize, bound: f64) -> Vec<AliasedBufferSlice> {
    (0..n_slices)
        .map(|_| {
            let k = rng.random_range(1..=max_pairs.max(1));
            let s = [rng.random_range(-2.2..2.0), rng.random_range(-2.0..3.5), 0.0, 2.8];
            let u_dagger: Vec<DVector<f64>> =
                (0..k).map(|_| DVector::from_fn(ACT_DIM, |_, _| rng.random_range(-bound..=bound))).collect();
            let xi = u_dagger
                .iter()
                .map(|u| u.map(|v| planner_logit(v, -bound, bound, LOGIT_MARGIN).expect("bounds are valid")))
                .collect();
            let gate = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            AliasedBufferSlice { s, xi, u_dagger, gate }
        })
        .collect()
}

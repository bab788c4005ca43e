//! Planner-guided soft actor-critic.
//!
//! One training loop covers three learners. The guided learner substitutes planner actions
//! while immature, keeps those transitions in a write-once partition, and anchors the policy
//! logits to the planner's inverse-squashed action with an advantage gate after maturity.
//! Plain SAC turns all guidance off. The accelerated baseline regresses the deterministic
//! action onto the planner action with a weight that decays to zero, with no substitution
//! and no gate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nav_env::{episode_metrics, NavEnv, Observation, Terminal, Trajectory, ACT_DIM, OBS_DIM};
use crate::nn::{sigmoid, Adam, MlpCache, MlpGrad, PolicySample, Scalar, SquashedGaussianPolicy, TwinCritics};
use crate::reap::{NavPlanner, PlannerBudget, PrimalDualState};

pub const LOGIT_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    P2pSac,
    Sac,
    AccelSac,
    ReapOnly,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::P2pSac => "p2p-sac",
            Algorithm::Sac => "sac",
            Algorithm::AccelSac => "accel-sac",
            Algorithm::ReapOnly => "reap-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p2p-sac" => Ok(Algorithm::P2pSac),
            "sac" => Ok(Algorithm::Sac),
            "accel-sac" => Ok(Algorithm::AccelSac),
            "reap-only" => Ok(Algorithm::ReapOnly),
            _ => Err(Error::Config(format!("unknown algorithm {s:?}"))),
        }
    }

    /// Whether the loop needs `u†` while the guidance weight is nonzero.
    fn queries_planner(self) -> bool {
        matches!(self, Algorithm::P2pSac | Algorithm::AccelSac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub t_p: u64,
    pub t_d: u64,
    pub beta0: f64,
    pub beta_f: f64,
    pub tau_g: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_p: 100_000, t_d: 0, beta0: 10.0, beta_f: 10.0, tau_g: 1.0 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta0 >= 0.0 && self.beta_f >= 0.0 && self.beta_f <= self.beta0 && self.tau_g > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("schedule {self:?}")));
        }
        Ok(())
    }

    /// `(β_t, M_t)`: plateau, linear annealing from `β_0` to `β_f`, then absorbing maturity.
    pub fn tick(&self, t: u64) -> (f64, bool) {
        if t <= self.t_p {
            (self.beta0, false)
        } else if t <= self.t_p + self.t_d {
            let frac = (t - self.t_p) as f64 / self.t_d as f64;
            (self.beta0 - frac * (self.beta0 - self.beta_f), false)
        } else {
            (self.beta_f, true)
        }
    }

    /// Pseudo-label weight of the accelerated baseline: `β_0` on the plateau, then a linear
    /// decay that reaches exactly zero at `T_p + T_d` and stays there.
    pub fn decay_to_zero(&self, t: u64) -> f64 {
        if t <= self.t_p {
            self.beta0
        } else if t < self.t_p + self.t_d {
            self.beta0 * (1.0 - (t - self.t_p) as f64 / self.t_d as f64)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub batch_size: usize,
    pub init_alpha: f64,
    /// Defaults to `−p`.
    pub target_entropy: Option<f64>,
    pub logit_margin: f64,
    pub action_bound: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            lr: 3e-4,
            gamma: 0.99,
            polyak: 0.995,
            batch_size: 256,
            init_alpha: 0.2,
            target_entropy: None,
            logit_margin: LOGIT_MARGIN,
            action_bound: 0.7,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.hidden.is_empty()
            && self.hidden.iter().all(|&w| w > 0)
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.polyak)
            && self.batch_size > 0
            && self.init_alpha > 0.0
            && self.logit_margin > 0.0
            && self.logit_margin < 1.0
            && self.action_bound > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("agent {self:?}")));
        }
        Ok(())
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy.unwrap_or(-(ACT_DIM as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: Observation,
    /// Executed action.
    pub u: [f64; ACT_DIM],
    pub r: f64,
    pub s_next: Observation,
    /// Planner action; meaningless when `h` is false.
    pub u_dagger: [f64; ACT_DIM],
    pub h: bool,
    pub terminal: Terminal,
}

impl Transition {
    /// Bellman mask: goal and crash stop bootstrapping, a timeout does not.
    pub fn done(&self) -> bool {
        self.terminal.absorbing()
    }

    fn hash_into(&self, h: &mut Sha256) {
        let mut put = |v: f64| h.update(v.to_le_bytes());
        self.s.iter().chain(&self.u).chain(&[self.r]).chain(&self.s_next).chain(&self.u_dagger).for_each(|&v| put(v));
        h.update([self.h as u8, self.terminal as u8]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Planner,
    Online,
    Rejected,
}

/// Write-once planner partition plus a FIFO online partition.
#[derive(Debug, Clone)]
pub struct DualReplayBuffer {
    planner: Vec<Transition>,
    planner_cap: usize,
    online: Vec<Transition>,
    online_cap: usize,
    head: usize,
}

impl DualReplayBuffer {
    pub fn new(planner_cap: usize, online_cap: usize) -> Self {
        Self { planner: Vec::new(), planner_cap, online: Vec::new(), online_cap, head: 0 }
    }

    /// Routes by maturity: immature transitions go to the planner partition, which refuses
    /// writes once full; mature ones go to the online partition, which evicts the oldest.
    pub fn store(&mut self, tr: Transition, mature: bool) -> Route {
        if !mature {
            if self.planner.len() < self.planner_cap {
                self.planner.push(tr);
                return Route::Planner;
            }
            return Route::Rejected;
        }
        if self.online_cap == 0 {
            return Route::Rejected;
        }
        if self.online.len() < self.online_cap {
            self.online.push(tr);
        } else {
            self.online[self.head] = tr;
            self.head = (self.head + 1) % self.online_cap;
        }
        Route::Online
    }

    pub fn planner(&self) -> &[Transition] {
        &self.planner
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    /// Online transitions from oldest to newest.
    pub fn online_ordered(&self) -> impl Iterator<Item = &Transition> {
        self.online[self.head..].iter().chain(&self.online[..self.head])
    }

    pub fn planner_digest(&self) -> String {
        let mut h = Sha256::new();
        for tr in &self.planner {
            tr.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Draws `⌊B/2⌋` from the planner partition and the rest from the online one, uniformly
    /// with replacement; everything from whichever partition is nonempty if the other is empty.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
        let (np, no) = (self.planner.len(), self.online.len());
        let (bp, bo) = match (np, no) {
            (0, 0) => return Err(Error::EmptyBuffer),
            (0, _) => (0, batch),
            (_, 0) => (batch, 0),
            _ => (batch / 2, batch - batch / 2),
        };
        let p = (0..bp).map(|_| rng.random_range(0..np)).collect();
        let o = (0..bo).map(|_| rng.random_range(0..no)).collect();
        Ok((p, o))
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch<T>> {
        let (p, o) = self.sample_indices(batch, rng)?;
        let rows: Vec<&Transition> = p.iter().map(|&i| &self.planner[i]).chain(o.iter().map(|&i| &self.online[i])).collect();
        Ok(Batch::from_transitions(&rows))
    }
}

/// Column-per-sample view of a minibatch.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub s: DMatrix<T>,
    pub u: DMatrix<T>,
    pub r: DVector<T>,
    pub s_next: DMatrix<T>,
    pub u_dagger: DMatrix<T>,
    pub h: DVector<T>,
    pub done: DVector<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_transitions(rows: &[&Transition]) -> Self {
        let n = rows.len();
        let cast = |v: f64| T::lit(v);
        let flag = |b: bool| if b { T::one() } else { T::zero() };
        Self {
            s: DMatrix::from_fn(OBS_DIM, n, |i, j| cast(rows[j].s[i])),
            u: DMatrix::from_fn(ACT_DIM, n, |i, j| cast(rows[j].u[i])),
            r: DVector::from_fn(n, |j, _| cast(rows[j].r)),
            s_next: DMatrix::from_fn(OBS_DIM, n, |i, j| cast(rows[j].s_next[i])),
            u_dagger: DMatrix::from_fn(ACT_DIM, n, |i, j| cast(if rows[j].h { rows[j].u_dagger[i] } else { 0.0 })),
            h: DVector::from_fn(n, |j, _| flag(rows[j].h)),
            done: DVector::from_fn(n, |j, _| flag(rows[j].done())),
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Inverse squashing with a margin: `atanh(clip(2(u − low)/(high − low) − 1, −(1−ε), 1−ε))`.
pub fn planner_logit(u: f64, low: f64, high: f64, eps: f64) -> Result<f64> {
    if !(high > low) {
        return Err(Error::DegenerateBounds { low, high });
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("logit margin {eps}")));
    }
    let l = 1.0 - eps;
    Ok((2.0 * (u - low) / (high - low) - 1.0).clamp(-l, l).atanh())
}

pub fn planner_logits<T: Scalar>(u: &DMatrix<T>, low: f64, high: f64, eps: f64) -> Result<DMatrix<T>> {
    let mut out = DMatrix::zeros(u.nrows(), u.ncols());
    for (o, &v) in out.iter_mut().zip(u.iter()) {
        *o = T::lit(planner_logit(v.as_f64(), low, high, eps)?);
    }
    Ok(out)
}

/// Gate quantities per sample, all detached from the parameters.
#[derive(Debug, Clone)]
pub struct GateValues<T: Scalar> {
    pub v_hat: DVector<T>,
    pub advantage: DVector<T>,
    pub m: DVector<T>,
    pub g: DVector<T>,
}

/// Soft value from the policy sample, planner advantage, sigmoid weight and composite gate.
pub fn gate<T: Scalar>(
    critics: &TwinCritics<T>,
    alpha: T,
    s: &DMatrix<T>,
    u_dagger: &DMatrix<T>,
    sample: &PolicySample<T>,
    critique: &Critique<T>,
    mature: bool,
    tau_g: f64,
) -> GateValues<T> {
    let n = s.ncols();
    if !mature {
        let zeros = DVector::zeros(n);
        return GateValues { v_hat: zeros.clone(), advantage: zeros.clone(), m: zeros, g: DVector::from_element(n, T::one()) };
    }
    let v_hat = critique.min() - &sample.log_prob * alpha;
    let advantage = critics.min_q(s, u_dagger) - &v_hat;
    let tau = T::lit(tau_g);
    let m = advantage.map(|a| sigmoid(a / tau));
    let g = m.clone();
    GateValues { v_hat, advantage, m, g }
}

/// Soft Bellman targets with a fresh next action per sample.
pub fn bellman_targets<T: Scalar>(
    policy: &SquashedGaussianPolicy<T>,
    critics: &TwinCritics<T>,
    alpha: T,
    gamma: f64,
    batch: &Batch<T>,
    noise: &DMatrix<T>,
) -> DVector<T> {
    let next = policy.sample(&batch.s_next, noise);
    let soft = critics.min_target(&batch.s_next, &next.u) - &next.log_prob * alpha;
    let g = T::lit(gamma);
    DVector::from_fn(batch.len(), |j, _| batch.r[j] + g * (T::one() - batch.done[j]) * soft[j])
}

/// Mean squared Bellman residual of one critic and its gradient.
pub fn critic_loss<T: Scalar>(
    critics: &TwinCritics<T>,
    j: usize,
    batch: &Batch<T>,
    y: &DVector<T>,
) -> (T, MlpGrad<T>) {
    let critic = &critics.q[j];
    let (q, cache) = critic.q_cached(&batch.s, &batch.u);
    let n = T::lit(batch.len() as f64);
    let resid = q - y;
    let loss = resid.norm_squared() / n;
    let d_q = resid * (T::lit(2.0) / n);
    (loss, critic.backward(&cache, &d_q, OBS_DIM).0)
}

/// Imitation term added to the SAC actor objective.
#[derive(Debug, Clone)]
pub enum Guidance<T: Scalar> {
    None,
    /// `mean_i w_i (1/p)‖μ(s_i) − ξ†_i‖²` with detached weights `w_i = β_t G_i h_i`.
    Anchor { weights: DVector<T>, xi: DMatrix<T> },
    /// `β mean_i h_i ‖ū(s_i) − u†_i‖²` on the deterministic action `ū`.
    PseudoLabel { beta: f64, h: DVector<T>, u_dagger: DMatrix<T> },
}

#[derive(Debug, Clone)]
pub struct ActorLoss<T: Scalar> {
    pub sac: T,
    pub guidance: T,
    pub grad: MlpGrad<T>,
}

impl<T: Scalar> ActorLoss<T> {
    pub fn total(&self) -> T {
        self.sac + self.guidance
    }
}

/// Gated logit anchor `mean_j w_j (1/p)‖μ_j − ξ†_j‖²` and its gradient with respect to `μ`.
pub fn anchor_terms<T: Scalar>(mu: &DMatrix<T>, xi: &DMatrix<T>, weights: &DVector<T>) -> (T, DMatrix<T>) {
    let (p, n) = mu.shape();
    let inv_n = T::one() / T::lit(n as f64);
    let inv_p = T::one() / T::lit(p as f64);
    let mut loss = T::zero();
    let mut d_mu = DMatrix::zeros(p, n);
    for j in 0..n {
        let w = weights[j] * inv_n;
        if w == T::zero() {
            continue;
        }
        for i in 0..p {
            let diff = mu[(i, j)] - xi[(i, j)];
            loss += w * inv_p * diff * diff;
            d_mu[(i, j)] = w * inv_p * T::lit(2.0) * diff;
        }
    }
    (loss, d_mu)
}

/// Both online critics evaluated on one action batch, with caches for the action gradient.
pub struct Critique<T: Scalar> {
    pub q: [DVector<T>; 2],
    cache: [MlpCache<T>; 2],
}

impl<T: Scalar> Critique<T> {
    pub fn new(critics: &TwinCritics<T>, s: &DMatrix<T>, u: &DMatrix<T>) -> Self {
        let (q1, c1) = critics.q[0].q_cached(s, u);
        let (q2, c2) = critics.q[1].q_cached(s, u);
        Self { q: [q1, q2], cache: [c1, c2] }
    }

    pub fn min(&self) -> DVector<T> {
        self.q[0].zip_map(&self.q[1], |a, b| a.min(b))
    }
}

/// SAC actor loss plus guidance for an already drawn sample, with the critics held fixed.
pub fn actor_loss_from_sample<T: Scalar>(
    policy: &SquashedGaussianPolicy<T>,
    critics: &TwinCritics<T>,
    alpha: T,
    s: &DMatrix<T>,
    sample: &PolicySample<T>,
    critique: &Critique<T>,
    guidance: &Guidance<T>,
) -> ActorLoss<T> {
    let n = s.ncols();
    let inv_n = T::one() / T::lit(n as f64);
    let [q1, q2] = &critique.q;
    let [c1, c2] = &critique.cache;
    let mut sac = T::zero();
    let mut d1 = DVector::zeros(n);
    let mut d2 = DVector::zeros(n);
    for j in 0..n {
        // The smaller critic carries the gradient; ties go to the first.
        let q = if q1[j] <= q2[j] {
            d1[j] = -inv_n;
            q1[j]
        } else {
            d2[j] = -inv_n;
            q2[j]
        };
        sac += (alpha * sample.log_prob[j] - q) * inv_n;
    }
    let d_u = critics.q[0].action_gradient(c1, &d1, OBS_DIM) + critics.q[1].action_gradient(c2, &d2, OBS_DIM);
    let d_logp = DVector::from_element(n, alpha * inv_n);

    let p = policy.act_dim;
    let mut d_mu = DMatrix::zeros(p, n);
    let mut extra = T::zero();
    match guidance {
        Guidance::None => {}
        Guidance::Anchor { weights, xi } => {
            let (loss, d) = anchor_terms(&sample.mu, xi, weights);
            extra = loss;
            d_mu = d;
        }
        Guidance::PseudoLabel { beta, h, u_dagger } => {
            let (low, high) = (policy.low, policy.high);
            let half = (high - low) * T::lit(0.5);
            let mid = low + half;
            let b = T::lit(*beta);
            for j in 0..n {
                let w = b * h[j] * inv_n;
                if w == T::zero() {
                    continue;
                }
                for i in 0..p {
                    let a = sample.mu[(i, j)].tanh();
                    let diff = mid + half * a - u_dagger[(i, j)];
                    extra += w * diff * diff;
                    d_mu[(i, j)] = w * T::lit(2.0) * diff * half * (T::one() - a * a);
                }
            }
        }
    }
    let grad = policy.backward(sample, Some(&d_u), Some(&d_logp), Some(&d_mu));
    ActorLoss { sac, guidance: extra, grad }
}

pub fn actor_loss<T: Scalar>(
    policy: &SquashedGaussianPolicy<T>,
    critics: &TwinCritics<T>,
    alpha: T,
    s: &DMatrix<T>,
    noise: &DMatrix<T>,
    guidance: &Guidance<T>,
) -> ActorLoss<T> {
    let sample = policy.sample(s, noise);
    let critique = Critique::new(critics, s, &sample.u);
    actor_loss_from_sample(policy, critics, alpha, s, &sample, &critique, guidance)
}

/// `L_α = mean(−α (log π + H̄))` with `α = exp(log α)`; returns the loss and `dL/d log α`.
pub fn temperature_loss<T: Scalar>(log_alpha: T, log_probs: &DVector<T>, target_entropy: f64) -> (T, T) {
    let n = T::lit(log_probs.len() as f64);
    let mean = log_probs.sum() / n + T::lit(target_entropy);
    let alpha = log_alpha.exp();
    (-alpha * mean, -alpha * mean)
}

/// Learner state: networks, optimizers, and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent<T: Scalar> {
    pub cfg: AgentConfig,
    pub policy: SquashedGaussianPolicy<T>,
    pub critics: TwinCritics<T>,
    pub policy_opt: Adam<T>,
    pub critic_opt: [Adam<T>; 2],
    pub log_alpha: T,
    pub alpha_opt: Adam<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub sac_loss: f64,
    pub guidance_loss: f64,
    pub alpha: f64,
    /// Mean composite gate over samples with a planner action.
    pub gate_mean: Option<f64>,
}

/// How the actor is guided in one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceMode {
    None,
    Anchor { beta: f64, mature: bool, tau_g: f64 },
    PseudoLabel { beta: f64 },
}

impl<T: Scalar> Agent<T> {
    pub fn new<R: Rng + ?Sized>(cfg: AgentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.action_bound;
        let policy = SquashedGaussianPolicy::new(OBS_DIM, &cfg.hidden, ACT_DIM, -b, b, rng);
        let critics = TwinCritics::new(OBS_DIM, ACT_DIM, &cfg.hidden, rng);
        let policy_opt = Adam::for_mlp(cfg.lr, &policy.net);
        let critic_opt = [Adam::for_mlp(cfg.lr, &critics.q[0].net), Adam::for_mlp(cfg.lr, &critics.q[1].net)];
        let alpha_opt = Adam::new(cfg.lr, &[1]);
        let log_alpha = T::lit(cfg.init_alpha.ln());
        Ok(Self { cfg, policy, critics, policy_opt, critic_opt, log_alpha, alpha_opt })
    }

    pub fn alpha(&self) -> T {
        self.log_alpha.exp()
    }

    /// Deterministic action for one observation.
    pub fn act_deterministic(&self, s: &Observation) -> [f64; ACT_DIM] {
        let m = self.policy.mean_action(&obs_matrix(&[*s]));
        [m[(0, 0)].as_f64(), m[(1, 0)].as_f64()]
    }

    /// One gradient step on critics, actor, temperature, then target tracking.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch<T>, mode: GuidanceMode, rng: &mut R) -> Result<UpdateStats> {
        let n = batch.len();
        let alpha = self.alpha();

        let noise_next = standard_normal(ACT_DIM, n, rng);
        let y = bellman_targets(&self.policy, &self.critics, alpha, self.cfg.gamma, batch, &noise_next);
        let mut critic_total = 0.0;
        for j in 0..2 {
            let (loss, grad) = critic_loss(&self.critics, j, batch, &y);
            check_finite(loss, "critic")?;
            critic_total += loss.as_f64();
            self.critic_opt[j].step_mlp(&mut self.critics.q[j].net, &grad)?;
        }

        let noise = standard_normal(ACT_DIM, n, rng);
        let sample = self.policy.sample(&batch.s, &noise);
        let critique = Critique::new(&self.critics, &batch.s, &sample.u);
        let mut gate_mean = None;
        let guidance = match mode {
            GuidanceMode::None => Guidance::None,
            GuidanceMode::Anchor { beta, mature, tau_g } => {
                let xi = planner_logits(&batch.u_dagger, self.policy.low.as_f64(), self.policy.high.as_f64(), self.cfg.logit_margin)?;
                let gv = gate(&self.critics, alpha, &batch.s, &batch.u_dagger, &sample, &critique, mature, tau_g);
                let avail = batch.h.sum();
                if avail > T::zero() {
                    gate_mean = Some(gv.g.dot(&batch.h).as_f64() / avail.as_f64());
                }
                let b = T::lit(beta);
                let weights = DVector::from_fn(n, |j, _| b * gv.g[j] * batch.h[j]);
                Guidance::Anchor { weights, xi }
            }
            GuidanceMode::PseudoLabel { beta } => {
                Guidance::PseudoLabel { beta, h: batch.h.clone(), u_dagger: batch.u_dagger.clone() }
            }
        };
        let actor = actor_loss_from_sample(&self.policy, &self.critics, alpha, &batch.s, &sample, &critique, &guidance);
        check_finite(actor.total(), "actor")?;
        self.policy_opt.step_mlp(&mut self.policy.net, &actor.grad)?;

        let (alpha_loss, d_log_alpha) = temperature_loss(self.log_alpha, &sample.log_prob, self.cfg.target_entropy());
        check_finite(alpha_loss, "temperature")?;
        let mut la = [self.log_alpha];
        self.alpha_opt.update(vec![&mut la[..]], vec![&[d_log_alpha][..]])?;
        self.log_alpha = la[0];

        for j in 0..2 {
            crate::nn::polyak_update(&mut self.critics.target[j].net, &self.critics.q[j].net, self.cfg.polyak)?;
        }
        Ok(UpdateStats {
            critic_loss: critic_total / 2.0,
            sac_loss: actor.sac.as_f64(),
            guidance_loss: actor.guidance.as_f64(),
            alpha: self.alpha().as_f64(),
            gate_mean,
        })
    }
}

fn check_finite<T: Scalar>(v: T, what: &str) -> Result<()> {
    if v.as_f64().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(what.into()))
    }
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}

pub fn obs_matrix<T: Scalar>(obs: &[Observation]) -> DMatrix<T> {
    DMatrix::from_fn(OBS_DIM, obs.len(), |i, j| T::lit(obs[j][i]))
}

/// Outcome of one environment step's action choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionChoice {
    pub u: [f64; ACT_DIM],
    pub u_dagger: [f64; ACT_DIM],
    pub h: bool,
}

/// Behavioral substitution: while immature and with a planner action available the planner
/// acts; otherwise the policy sample does.
pub fn select_action(policy_sample: [f64; ACT_DIM], planner: Option<[f64; ACT_DIM]>, mature: bool, substitute: bool) -> ActionChoice {
    match planner {
        Some(u_dagger) if substitute && !mature => ActionChoice { u: u_dagger, u_dagger, h: true },
        Some(u_dagger) => ActionChoice { u: policy_sample, u_dagger, h: true },
        None => ActionChoice { u: policy_sample, u_dagger: [0.0; ACT_DIM], h: false },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub agent: AgentConfig,
    pub schedule: ScheduleConfig,
    pub planner_capacity: usize,
    pub online_capacity: usize,
    pub planner_budget: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::P2pSac,
            seed: 0,
            total_steps: 5_000_000,
            eval_every: 50_000,
            eval_episodes: 10,
            agent: AgentConfig::default(),
            schedule: ScheduleConfig::default(),
            planner_capacity: 1_000_000,
            online_capacity: 1_000_000,
            planner_budget: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.schedule.validate()?;
        if self.algorithm == Algorithm::ReapOnly {
            return Err(Error::Config("reap-only has no learner to train".into()));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("eval_every and eval_episodes must be positive".into()));
        }
        Ok(())
    }
}

/// One evaluation over a fixed set of episode seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub reward: f64,
    pub success: f64,
    pub crash: f64,
    /// Mean over successful episodes; NaN when none succeeded.
    pub path_optimality: f64,
    pub duration_s: f64,
    pub avg_velocity: f64,
}

/// Episode seeds used for evaluation, disjoint from the training stream.
pub fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| 0x5EED_0000_0000 + base * 1_000 + k).collect()
}

/// Runs the deterministic policy on every seed, stepping all episodes as one batch.
pub fn evaluate<T: Scalar>(policy: &SquashedGaussianPolicy<T>, env: &NavEnv, seeds: &[u64]) -> Result<(EvalSummary, Vec<Trajectory>)> {
    let mut states = Vec::with_capacity(seeds.len());
    let mut obs = Vec::with_capacity(seeds.len());
    let mut trajs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (st, s) = env.reset(seed)?;
        trajs.push(Trajectory::new(st.position));
        states.push(st);
        obs.push(s);
    }
    let mut active: Vec<usize> = (0..seeds.len()).collect();
    while !active.is_empty() {
        let batch: Vec<Observation> = active.iter().map(|&k| obs[k]).collect();
        let u = policy.mean_action(&obs_matrix(&batch));
        for (col, &k) in active.iter().enumerate() {
            let r = env.step(&mut states[k], [u[(0, col)].as_f64(), u[(1, col)].as_f64()])?;
            trajs[k].push(states[k].t, &r, states[k].position);
            obs[k] = r.s_next;
        }
        active.retain(|&k| !states[k].status.is_terminal());
    }
    Ok((summarize(&trajs, env)?, trajs))
}

pub fn summarize(trajs: &[Trajectory], env: &NavEnv) -> Result<EvalSummary> {
    let n = trajs.len() as f64;
    let (mut reward, mut succ, mut crash, mut opt, mut dur, mut vel) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for tr in trajs {
        let m = episode_metrics(tr, env.arena())?;
        reward += tr.total_reward();
        dur += m.duration_s;
        vel += m.avg_velocity;
        if m.success {
            succ += 1.0;
            opt += m.path_optimality;
        }
        if m.crash {
            crash += 1.0;
        }
    }
    Ok(EvalSummary {
        episodes: trajs.len(),
        reward: reward / n,
        success: succ / n,
        crash: crash / n,
        path_optimality: if succ > 0.0 { opt / succ } else { f64::NAN },
        duration_s: dur / n,
        avg_velocity: vel / n,
    })
}

/// One row of a single-seed training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub steps: u64,
    pub reward: f64,
    pub success: f64,
    pub crash: f64,
    /// Mean composite gate since the previous row; NaN for learners without a gate.
    pub gate_mean: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub episodes: u64,
    pub planner_calls: u64,
    pub planner_failures: u64,
    pub substituted: u64,
    pub routed_planner: u64,
    pub routed_online: u64,
    pub rejected: u64,
}

pub struct TrainOutcome<T: Scalar> {
    pub curve: Vec<CurvePoint>,
    pub agent: Agent<T>,
    /// Best evaluated snapshot by success, ties broken by reward.
    pub best: Option<(u64, EvalSummary, Agent<T>)>,
    pub counters: Counters,
    pub buffer: DualReplayBuffer,
}

/// RNG streams derived from the run seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_ACT: u64 = 1;
const STREAM_UPDATE: u64 = 2;
const STREAM_EPISODE: u64 = 3;

/// Training loop in the order: act and substitute, step, store and advance the schedule,
/// sample, critics, gate, actor, temperature, targets.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    env: &NavEnv,
    planner: &NavPlanner,
    mut on_eval: impl FnMut(&CurvePoint, &Agent<T>),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let algo = cfg.algorithm;
    let mut agent = Agent::<T>::new(cfg.agent.clone(), &mut stream(cfg.seed, STREAM_INIT))?;
    let mut act_rng = stream(cfg.seed, STREAM_ACT);
    let mut upd_rng = stream(cfg.seed, STREAM_UPDATE);
    let mut ep_rng = stream(cfg.seed, STREAM_EPISODE);
    let mut buffer = match algo {
        Algorithm::P2pSac => DualReplayBuffer::new(cfg.planner_capacity, cfg.online_capacity),
        _ => DualReplayBuffer::new(0, cfg.planner_capacity + cfg.online_capacity),
    };
    let seeds = eval_seeds(cfg.seed, cfg.eval_episodes);
    let mut counters = Counters::default();
    let mut curve = Vec::new();
    let mut best: Option<(u64, EvalSummary, Agent<T>)> = None;
    let (mut gate_sum, mut gate_n) = (0.0, 0u64);

    let mut eval_point = |t: u64, agent: &Agent<T>, gate_sum: f64, gate_n: u64, best: &mut Option<(u64, EvalSummary, Agent<T>)>| -> Result<CurvePoint> {
        let (summary, _) = evaluate(&agent.policy, env, &seeds)?;
        let gate_mean = if gate_n > 0 { gate_sum / gate_n as f64 } else { f64::NAN };
        let point = CurvePoint { steps: t, reward: summary.reward, success: summary.success, crash: summary.crash, gate_mean };
        let better = best.as_ref().is_none_or(|(_, b, _)| {
            summary.success > b.success || (summary.success == b.success && summary.reward > b.reward)
        });
        if better {
            *best = Some((t, summary, agent.clone()));
        }
        on_eval(&point, agent);
        Ok(point)
    };

    let mut episode = new_episode(env, &mut ep_rng, &mut counters)?;
    for t in 0..cfg.total_steps {
        let (beta, mature) = cfg.schedule.tick(t);
        let accel_beta = cfg.schedule.decay_to_zero(t);
        let wants_planner = match algo {
            Algorithm::P2pSac => true,
            Algorithm::AccelSac => accel_beta > 0.0,
            _ => false,
        } && algo.queries_planner();

        let noise = standard_normal::<T, _>(ACT_DIM, 1, &mut act_rng);
        let smp = agent.policy.sample(&obs_matrix(&[episode.obs]), &noise);
        let u_tilde = [smp.u[(0, 0)].as_f64(), smp.u[(1, 0)].as_f64()];
        let u_dagger = if wants_planner {
            counters.planner_calls += 1;
            match planner.plan(episode.state.position, episode.warm.as_ref(), PlannerBudget::iters(cfg.planner_budget)) {
                Ok(out) => {
                    episode.warm = Some(out.state);
                    Some(out.u)
                }
                Err(Error::InfeasibleState { .. }) => {
                    counters.planner_failures += 1;
                    episode.warm = None;
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let choice = select_action(u_tilde, u_dagger, mature, algo == Algorithm::P2pSac);
        if choice.h && choice.u == choice.u_dagger && !mature && algo == Algorithm::P2pSac {
            counters.substituted += 1;
        }
        let s = episode.obs;
        let step = env.step(&mut episode.state, choice.u)?;
        let tr = Transition {
            s,
            u: step.applied,
            r: step.reward,
            s_next: step.s_next,
            u_dagger: choice.u_dagger,
            h: choice.h,
            terminal: step.terminal,
        };
        let route_mature = algo != Algorithm::P2pSac || mature;
        match buffer.store(tr, route_mature) {
            Route::Planner => counters.routed_planner += 1,
            Route::Online => counters.routed_online += 1,
            Route::Rejected => counters.rejected += 1,
        }
        episode.obs = step.s_next;

        let batch = buffer.sample::<T, _>(cfg.agent.batch_size, &mut upd_rng)?;
        let mode = match algo {
            Algorithm::P2pSac => GuidanceMode::Anchor { beta, mature, tau_g: cfg.schedule.tau_g },
            Algorithm::AccelSac if accel_beta > 0.0 => GuidanceMode::PseudoLabel { beta: accel_beta },
            _ => GuidanceMode::None,
        };
        let stats = agent.update(&batch, mode, &mut upd_rng)?;
        if let Some(g) = stats.gate_mean {
            gate_sum += g;
            gate_n += 1;
        }

        if step.terminal.is_terminal() {
            episode = new_episode(env, &mut ep_rng, &mut counters)?;
        }
        let done_steps = t + 1;
        if done_steps % cfg.eval_every == 0 || done_steps == cfg.total_steps {
            curve.push(eval_point(done_steps, &agent, gate_sum, gate_n, &mut best)?);
            gate_sum = 0.0;
            gate_n = 0;
        }
    }
    Ok(TrainOutcome { curve, agent, best, counters, buffer })
}

struct Episode {
    state: crate::nav_env::FullState,
    obs: Observation,
    warm: Option<PrimalDualState>,
}

fn new_episode(env: &NavEnv, rng: &mut ChaCha8Rng, counters: &mut Counters) -> Result<Episode> {
    counters.episodes += 1;
    let (state, obs) = env.reset(rng.random())?;
    Ok(Episode { state, obs, warm: None })
}

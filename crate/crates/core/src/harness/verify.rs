//! Oracle suites behind the `verify` subcommand.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::lin_mpc::CondensedQP;
use crate::nav_env::{Terminal, ACT_DIM, OBS_DIM};
use crate::nn::{finite_difference, relative_error, SquashedGaussianPolicy};
use crate::p2p_sac::{
    actor_loss, bellman_targets, critic_loss, planner_logits, standard_normal, stream, temperature_loss, Agent,
    AgentConfig, Batch, Guidance, Transition,
};
use crate::qp_oracle::{gap_to, random_qp, solve_exact, RandomQpSpec};
use crate::reap::{feasible_init, solve, solve_observed, BarrierParams, PlannerBudget};
use crate::theorem_oracle::{bound_check, decomposition, random_slices};

pub const FEASIBILITY_SLACK: f64 = 1e-9;
pub const CONVERGENCE_TOL: f64 = 1e-4;
pub const LADDER_TOL: f64 = 1e-9;
pub const CONSTANT_TOL: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const CONVERGENCE_ITERS: usize = 10_000;

/// Budgets at which the convergence suite records the gap.
pub fn budget_ladder() -> Vec<usize> {
    let mut v: Vec<usize> = (0..14).map(|e| 1usize << e).collect();
    v.push(CONVERGENCE_ITERS);
    v
}

/// Certification family: even dimension in `[2, 30]`, 1 to 120 unit rows.
pub fn random_certification_qp<R: Rng + ?Sized>(rng: &mut R) -> CondensedQP {
    let spec = RandomQpSpec {
        dim: 2 * rng.random_range(1..=15),
        n_rows: rng.random_range(1..=120),
        input_dim: 2,
        max_eig: 4.0,
        linear_scale: 3.0,
    };
    random_qp(rng, spec)
}

/// The flow settles on the optimum of the QP tightened by `1/ω`, so that is the reference.
pub fn tightened(qp: &CondensedQP, params: &BarrierParams) -> CondensedQP {
    let mut t = qp.clone();
    t.g.add_scalar_mut(1.0 / params.omega);
    t
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub problems: usize,
    pub iterates: usize,
    /// Largest row value seen on any iterate.
    pub worst_row: f64,
}

impl FeasibilityReport {
    pub fn passed(&self) -> bool {
        self.worst_row <= FEASIBILITY_SLACK
    }
}

/// Runs the flow from the feasible start for a random budget in `[0, max_budget]` and checks
/// every iterate against every row.
pub fn feasibility_suite(problems: usize, max_budget: usize, seed: u64) -> Result<FeasibilityReport> {
    let params = BarrierParams::default();
    let mut rng = stream(seed, 11);
    let mut rep = FeasibilityReport { problems, iterates: 0, worst_row: f64::NEG_INFINITY };
    for _ in 0..problems {
        let qp = random_certification_qp(&mut rng);
        let budget = rng.random_range(0..=max_budget);
        solve_observed(&qp, &params, None, PlannerBudget::iters(budget), |st| {
            rep.iterates += 1;
            rep.worst_row = rep.worst_row.max(qp.max_row_value(&st.u_hat));
        })?;
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapRow {
    pub problem: usize,
    pub budget: usize,
    /// `‖û₀ − u*₀‖ / (1 + ‖u*₀‖)` against the tightened-QP oracle.
    pub first_rel: f64,
    /// Distance of `(û, λ̂)` to the flow's saddle point.
    pub joint: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<GapRow>,
    pub worst_final: f64,
    /// Ladder steps where the joint distance grew by more than [`LADDER_TOL`].
    pub ladder_violations: usize,
    /// Largest `‖u† − u*‖∞` between the flow's limit and the oracle optimum.
    pub worst_limit_offset: f64,
}

/// The flow's limit must reproduce the oracle optimum this closely.
pub const LIMIT_TOL: f64 = 1e-6;
/// Iteration cap when running the flow to its fixed point.
pub const LIMIT_ITERS: usize = 400_000;

impl ConvergenceReport {
    pub fn passed(&self) -> bool {
        self.worst_final <= CONVERGENCE_TOL && self.ladder_violations == 0 && self.worst_limit_offset <= LIMIT_TOL
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["problem", "budget", "gap"])?;
        for r in &self.rows {
            out.write_record([r.problem.to_string(), r.budget.to_string(), r.first_rel.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Continues one flow along the budget ladder and records the gaps at each rung.
///
/// The primal distance alone can rise while a row activates; the joint primal-dual distance
/// to the saddle point is the quantity that decays along the flow, so the ladder is checked
/// on it. The saddle point is the flow's own fixed point, cross-checked against the oracle.
pub fn convergence_suite(problems: usize, seed: u64) -> Result<ConvergenceReport> {
    let params = BarrierParams::default();
    let mut rng = stream(seed, 12);
    let ladder = budget_ladder();
    let mut rep = ConvergenceReport { rows: Vec::new(), worst_final: 0.0, ladder_violations: 0, worst_limit_offset: 0.0 };
    for id in 0..problems {
        let qp = random_certification_qp(&mut rng);
        let sol = solve_exact(&tightened(&qp, &params))?;
        let scale = 1.0 + sol.u_star.rows(0, qp.input_dim).norm();
        let init = feasible_init(&qp)?;
        let limit = solve(&qp, &params, Some(&init), PlannerBudget::iters(LIMIT_ITERS))?;
        rep.worst_limit_offset = rep.worst_limit_offset.max((&limit.u_hat - &sol.u_star).amax());
        let mut state = init;
        let mut done = 0;
        let mut prev = f64::INFINITY;
        for &b in &ladder {
            state = solve(&qp, &params, Some(&state), PlannerBudget::iters(b - done))?;
            done = b;
            let gap = gap_to(&qp, &sol, &state.u_hat)?;
            let joint =
                ((&state.u_hat - &limit.u_hat).norm_squared() + (&state.lambda_hat - &limit.lambda_hat).norm_squared()).sqrt();
            if joint > prev + LADDER_TOL {
                rep.ladder_violations += 1;
            }
            prev = joint;
            rep.rows.push(GapRow { problem: id, budget: b, first_rel: gap.first / scale, joint });
        }
        rep.worst_final = rep.worst_final.max(rep.rows.last().map_or(0.0, |r| r.first_rel));
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub instances: usize,
    pub worst_grad_gap: f64,
    pub worst_loss_gap: f64,
    /// Largest change of the constant term under a parameter perturbation.
    pub worst_constant_drift: f64,
    pub bound_failures: usize,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.worst_grad_gap <= crate::theorem_oracle::GRAD_TOL
            && self.worst_loss_gap <= crate::theorem_oracle::LOSS_TOL
            && self.worst_constant_drift <= CONSTANT_TOL
            && self.bound_failures == 0
    }
}

/// Width-8 policy whose output weights are large enough for the mean to vary across inputs.
pub fn spread_policy(seed: u64) -> SquashedGaussianPolicy<f64> {
    let mut p = SquashedGaussianPolicy::new(OBS_DIM, &[8, 8], ACT_DIM, -0.7, 0.7, &mut stream(seed, 0));
    let last = p.net.layers.len() - 1;
    p.net.layers[last].w *= 100.0;
    p
}

pub fn theorem_suite(instances: usize, seed: u64) -> Result<TheoremReport> {
    let beta_f = 10.0;
    let mut rng = stream(seed, 13);
    let mut rep =
        TheoremReport { instances, worst_grad_gap: 0.0, worst_loss_gap: 0.0, worst_constant_drift: 0.0, bound_failures: 0 };
    for k in 0..instances {
        let n_slices = rng.random_range(1..=8);
        let slices = random_slices(&mut rng, n_slices, 5, 0.7);
        let policy = spread_policy(seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let base = decomposition(&policy, &slices, beta_f)?;
        let mut moved = policy.clone();
        for t in moved.net.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let other = decomposition(&moved, &slices, beta_f)?;
        rep.worst_grad_gap = rep.worst_grad_gap.max(base.grad_gap).max(other.grad_gap);
        rep.worst_loss_gap = rep.worst_loss_gap.max(base.loss_gap).max(other.loss_gap);
        rep.worst_constant_drift = rep.worst_constant_drift.max((other.constant - base.constant).abs());
        if bound_check(&policy, &slices, beta_f).is_err() {
            rep.bound_failures += 1;
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub loss: &'static str,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub checks: Vec<GradientCheck>,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= FD_TOL
    }
}

fn random_batch<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Batch<f64> {
    let rows: Vec<Transition> = (0..n)
        .map(|k| {
            let s = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..3.0), 0.0, 2.8];
            Transition {
                s,
                u: [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)],
                r: rng.random_range(-3.0..1.0),
                s_next: [s[0] + 0.01, s[1] - 0.01, 0.0, 2.8],
                u_dagger: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
                h: k % 3 != 0,
                terminal: if k % 4 == 0 { Terminal::Crash } else { Terminal::None },
            }
        })
        .collect();
    let refs: Vec<&Transition> = rows.iter().collect();
    Batch::from_transitions(&refs)
}

/// Central differences against every analytic loss gradient on width-8 networks in `f64`.
pub fn gradient_suite(seed: u64) -> Result<GradientReport> {
    let cfg = AgentConfig { hidden: vec![8, 8], ..AgentConfig::default() };
    let agent = Agent::<f64>::new(cfg, &mut stream(seed, 0))?;
    let mut rng = stream(seed, 14);
    let n = 8;
    let batch = random_batch(&mut rng, n);
    let noise: DMatrix<f64> = standard_normal(ACT_DIM, n, &mut rng);
    let y = bellman_targets(&agent.policy, &agent.critics, agent.alpha(), agent.cfg.gamma, &batch, &noise);
    let mut checks = Vec::new();

    for (j, name) in [(0, "critic q1"), (1, "critic q2")] {
        let (_, g) = critic_loss(&agent.critics, j, &batch, &y);
        let fd = finite_difference(
            |p| {
                let mut c = agent.critics.clone();
                c.q[j].net.set_flat(p).expect("same length");
                critic_loss(&c, j, &batch, &y).0
            },
            &agent.critics.q[j].net.flat(),
            FD_STEP,
        );
        checks.push(GradientCheck { loss: name, rel_err: relative_error(&g.flat(), &fd) });
    }

    let xi = planner_logits(&batch.u_dagger, -0.7, 0.7, agent.cfg.logit_margin)?;
    let weights = DVector::from_fn(n, |j, _| 10.0 * batch.h[j] * rng.random_range(0.05..1.0));
    let guides = [
        ("sac actor", Guidance::None),
        ("anchor", Guidance::Anchor { weights, xi }),
        ("pseudo-label", Guidance::PseudoLabel { beta: 10.0, h: batch.h.clone(), u_dagger: batch.u_dagger.clone() }),
    ];
    for (name, guide) in &guides {
        let out = actor_loss(&agent.policy, &agent.critics, agent.alpha(), &batch.s, &noise, guide);
        let fd = finite_difference(
            |p| {
                let mut pol = agent.policy.clone();
                pol.net.set_flat(p).expect("same length");
                actor_loss(&pol, &agent.critics, agent.alpha(), &batch.s, &noise, guide).total()
            },
            &agent.policy.net.flat(),
            FD_STEP,
        );
        checks.push(GradientCheck { loss: name, rel_err: relative_error(&out.grad.flat(), &fd) });
    }

    let log_probs = agent.policy.sample(&batch.s, &noise).log_prob;
    let target = agent.cfg.target_entropy.unwrap_or(-(ACT_DIM as f64));
    let (_, d) = temperature_loss(agent.log_alpha, &log_probs, target);
    let fd = finite_difference(|p| temperature_loss(p[0], &log_probs, target).0, &[agent.log_alpha], FD_STEP);
    checks.push(GradientCheck { loss: "temperature", rel_err: relative_error(&[d], &fd) });
    Ok(GradientReport { checks })
}

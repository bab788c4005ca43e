//! Reference solver for strongly convex QPs with polyhedral constraints.
//!
//! Projected gradient descent with Dykstra projections onto the halfspace intersection,
//! followed by an equality-constrained polish on the detected active set. It shares no code
//! with the barrier flow in [`crate::reap`] and is only meant for small certification runs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lin_mpc::CondensedQP;

pub const KKT_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-10;
const MAX_PG_ITERS: usize = 20_000;
const POLISH_EVERY: usize = 10;
const DYKSTRA_TOL: f64 = 1e-13;
const DYKSTRA_MAX_SWEEPS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub u_star: DVector<f64>,
    pub active_rows: Vec<usize>,
    /// Nonnegative multipliers, zero off the active set.
    pub multipliers: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Gap between a candidate and the oracle optimum, on the first stage input and on the full
/// stacked sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub first: f64,
    pub full: f64,
}

/// Largest of stationarity, complementarity, primal and dual infeasibility.
pub fn kkt_residual(qp: &CondensedQP, u: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    let mut station = qp.gradient(u);
    if qp.n_rows() > 0 {
        station.gemv_tr(1.0, &qp.eta, mu, 1.0);
    }
    let s = qp.row_values(u);
    let mut r = station.amax();
    for i in 0..s.len() {
        r = r.max((mu[i] * s[i]).abs()).max(s[i]).max(-mu[i]);
    }
    r
}

/// Dykstra's alternating projection of `v` onto `{x : E x + g <= 0}`.
pub fn dykstra_project(
    eta: &DMatrix<f64>,
    g: &DVector<f64>,
    v: &DVector<f64>,
    tol: f64,
    max_sweeps: usize,
) -> DVector<f64> {
    let n_rows = eta.nrows();
    let n = eta.ncols();
    let norms2: Vec<f64> = (0..n_rows).map(|i| eta.row(i).norm_squared()).collect();
    let mut x = v.clone();
    let mut incr = DMatrix::<f64>::zeros(n, n_rows);
    for _ in 0..max_sweeps {
        let mut change: f64 = 0.0;
        for i in 0..n_rows {
            if norms2[i] == 0.0 {
                continue;
            }
            let row = eta.row(i);
            // y = x + p_i, then project y onto halfspace i.
            let mut y = x.clone();
            y += incr.column(i);
            let viol = row.dot(&y.transpose()) + g[i];
            let mut proj = y.clone();
            if viol > 0.0 {
                proj -= row.transpose() * (viol / norms2[i]);
            }
            incr.column_mut(i).copy_from(&(&y - &proj));
            change = change.max((&proj - &x).amax());
            x = proj;
        }
        if change <= tol {
            break;
        }
    }
    x
}

/// Solves the equality-constrained QP on `active`, dropping rows whose multiplier turns
/// negative. Returns the primal point and the full multiplier vector.
fn polish(qp: &CondensedQP, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>, Vec<usize>)> {
    let n = qp.dim();
    let mut set: Vec<usize> = active.to_vec();
    for _ in 0..=active.len() {
        let m = set.len();
        let mut kkt = DMatrix::<f64>::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        let mut rhs = DVector::<f64>::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&qp.f));
        for (k, &i) in set.iter().enumerate() {
            let row = qp.eta.row(i);
            kkt.view_mut((n + k, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + k), (n, 1)).copy_from(&row.transpose());
            rhs[n + k] = -qp.g[i];
        }
        let scale = kkt.amax().max(1.0);
        let sol = kkt.svd(true, true).solve(&rhs, 1e-13 * scale).ok()?;
        let u = sol.rows(0, n).into_owned();
        let mut mu = DVector::zeros(qp.n_rows());
        let mut most_negative: Option<(usize, f64)> = None;
        for (k, &i) in set.iter().enumerate() {
            let v = sol[n + k];
            mu[i] = v.max(0.0);
            if v < -1e-12 && most_negative.is_none_or(|(_, w)| v < w) {
                most_negative = Some((k, v));
            }
        }
        match most_negative {
            Some((k, _)) => {
                set.remove(k);
            }
            None => return Some((u, mu, set)),
        }
    }
    None
}

pub fn solve_exact(qp: &CondensedQP) -> Result<OracleSolution> {
    for i in 0..qp.n_rows() {
        if qp.eta.row(i).norm() == 0.0 && qp.g[i] > FEAS_TOL {
            return Err(Error::InfeasibleProblem(format!("constant row {i} is violated")));
        }
    }
    let chol = qp
        .h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("oracle Hessian".into()))?;
    let unconstrained = chol.solve(&(-&qp.f));
    if qp.n_rows() == 0 || qp.max_row_value(&unconstrained) <= 0.0 {
        let mu = DVector::zeros(qp.n_rows());
        let kkt = kkt_residual(qp, &unconstrained, &mu);
        return Ok(OracleSolution {
            u_star: unconstrained,
            active_rows: Vec::new(),
            multipliers: mu,
            kkt_residual: kkt,
            iterations: 0,
        });
    }

    let lipschitz = qp.h.clone().symmetric_eigenvalues().max();
    let step = 1.0 / lipschitz;
    let project = |v: &DVector<f64>| dykstra_project(&qp.eta, &qp.g, v, DYKSTRA_TOL, DYKSTRA_MAX_SWEEPS);
    let mut u = project(&unconstrained);
    if qp.max_row_value(&u) > 1e-6 {
        return Err(Error::InfeasibleProblem(
            "alternating projections did not reach the feasible set".into(),
        ));
    }
    for iter in 1..=MAX_PG_ITERS {
        let grad = qp.gradient(&u);
        u = project(&(&u - grad * step));
        if iter % POLISH_EVERY != 0 {
            continue;
        }
        let s = qp.row_values(&u);
        let scale = 1.0 + u.amax();
        for tol in [1e-9, 1e-7, 1e-5] {
            let active: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= -tol * scale).collect();
            if let Some((cand, mu, set)) = polish(qp, &active) {
                if qp.max_row_value(&cand) > FEAS_TOL {
                    continue;
                }
                let kkt = kkt_residual(qp, &cand, &mu);
                if kkt <= KKT_TOL {
                    return Ok(OracleSolution {
                        u_star: cand,
                        active_rows: set,
                        multipliers: mu,
                        kkt_residual: kkt,
                        iterations: iter,
                    });
                }
            }
        }
    }
    Err(Error::MaxIterations(MAX_PG_ITERS))
}

/// Gap of a feasible candidate to a precomputed oracle solution.
pub fn gap_to(qp: &CondensedQP, solution: &OracleSolution, candidate: &DVector<f64>) -> Result<GapReport> {
    if candidate.len() != qp.dim() {
        return Err(Error::DimensionMismatch("candidate length".into()));
    }
    let viol = qp.max_row_value(candidate);
    if viol > 1e-9 {
        return Err(Error::InfeasibleCandidate(viol));
    }
    let diff = candidate - &solution.u_star;
    let p = qp.input_dim;
    Ok(GapReport {
        first: diff.rows(0, p).norm(),
        full: diff.norm(),
    })
}

/// First-stage and full-sequence distance from `candidate` to the exact optimum.
pub fn suboptimality_gap(qp: &CondensedQP, candidate: &DVector<f64>) -> Result<GapReport> {
    let viol = qp.max_row_value(candidate);
    if candidate.len() == qp.dim() && viol > 1e-9 {
        return Err(Error::InfeasibleCandidate(viol));
    }
    let solution = solve_exact(qp)?;
    gap_to(qp, &solution, candidate)
}

/// Shape of a randomly generated certification problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomQpSpec {
    pub dim: usize,
    pub n_rows: usize,
    pub input_dim: usize,
    /// Hessian eigenvalues are drawn from `[1, max_eig]`.
    pub max_eig: f64,
    /// Scale of the linear term; larger values push the unconstrained optimum outside.
    pub linear_scale: f64,
}

/// Random strongly convex QP with unit-norm rows and a known interior point.
///
/// The interior point is random with every row cleared by a margin in `[0.05, 1]`; the
/// nominal input is left at zero so that feasibility search has work to do.
pub fn random_qp<R: Rng + ?Sized>(rng: &mut R, spec: RandomQpSpec) -> CondensedQP {
    let n = spec.dim;
    let gauss = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    let basis = DMatrix::from_fn(n, n, |_, _| gauss(rng)).qr().q();
    let eig = DVector::from_fn(n, |_, _| rng.random_range(1.0..spec.max_eig.max(1.0 + 1e-9)));
    let h = &basis * DMatrix::from_diagonal(&eig) * basis.transpose();
    let h = (&h + h.transpose()) * 0.5;
    let f = DVector::from_fn(n, |_, _| gauss(rng) * spec.linear_scale);
    let interior = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let mut eta = DMatrix::zeros(spec.n_rows, n);
    let mut g = DVector::zeros(spec.n_rows);
    for i in 0..spec.n_rows {
        let mut row = DVector::from_fn(n, |_, _| gauss(rng));
        row /= row.norm();
        let margin = rng.random_range(0.05..1.0);
        g[i] = -row.dot(&interior) - margin;
        eta.row_mut(i).copy_from(&row.transpose());
    }
    CondensedQP::new(h, f, 0.0, eta, g, spec.input_dim).expect("random QP is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unconstrained_is_newton_point() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = DVector::from_vec(vec![1.0, -1.0]);
        let qp = CondensedQP::new(h.clone(), f.clone(), 0.0, DMatrix::zeros(0, 2), DVector::zeros(0), 1)
            .unwrap();
        let sol = solve_exact(&qp).unwrap();
        let expected = h.lu().solve(&(-f)).unwrap();
        assert!((sol.u_star - expected).amax() < 1e-12);
    }

    #[test]
    fn one_dimensional_active_bound() {
        // min ½u² s.t. u <= -1
        let qp = CondensedQP::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            0.0,
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            1,
        )
        .unwrap();
        let sol = solve_exact(&qp).unwrap();
        assert!((sol.u_star[0] + 1.0).abs() < 1e-10);
        assert_eq!(sol.active_rows, vec![0]);
        assert!((sol.multipliers[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_instances_carry_kkt_certificates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let spec = RandomQpSpec {
                dim: rng.random_range(2..12),
                n_rows: rng.random_range(1..40),
                input_dim: 1,
                max_eig: 4.0,
                linear_scale: 3.0,
            };
            let qp = random_qp(&mut rng, spec);
            let sol = solve_exact(&qp).unwrap();
            assert!(sol.kkt_residual <= 1e-9, "kkt {}", sol.kkt_residual);
            assert!(qp.max_row_value(&sol.u_star) <= 1e-10);
            assert!(sol.multipliers.iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn gap_of_the_optimum_is_zero_and_infeasible_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qp = random_qp(
            &mut rng,
            RandomQpSpec {
                dim: 6,
                n_rows: 20,
                input_dim: 2,
                max_eig: 3.0,
                linear_scale: 3.0,
            },
        );
        let sol = solve_exact(&qp).unwrap();
        let gap = gap_to(&qp, &sol, &sol.u_star).unwrap();
        assert_eq!(gap.first, 0.0);
        assert_eq!(gap.full, 0.0);
        let far = DVector::from_element(6, 1e3);
        assert!(matches!(
            suboptimality_gap(&qp, &far),
            Err(Error::InfeasibleCandidate(_))
        ));
    }

    #[test]
    fn dykstra_lands_on_the_nearest_point_of_a_corner() {
        // Quadrant x <= 0, y <= 0: projection of (1, 2) is the origin.
        let eta = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let g = DVector::zeros(2);
        let x = dykstra_project(&eta, &g, &DVector::from_vec(vec![1.0, 2.0]), 1e-14, 100);
        assert!(x.amax() < 1e-14);
    }
}

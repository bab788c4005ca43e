use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Discrete-time linear model `z+ = A z + B u` used for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    dt: f64,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, expected square",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows, A has {}",
                b.nrows(),
                a.nrows()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        Ok(Self { a, b, dt })
    }

    /// `A = I`, `B = dt I`.
    pub fn single_integrator(dim: usize, dt: f64) -> Self {
        Self {
            a: DMatrix::identity(dim, dim),
            b: DMatrix::identity(dim, dim) * dt,
            dt,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * u
    }

    /// Rank of `[B, AB, ..., A^(n-1) B]`.
    pub fn controllability_rank(&self) -> usize {
        let n = self.state_dim();
        let p = self.input_dim();
        let mut ctrb = DMatrix::zeros(n, n * p);
        let mut block = self.b.clone();
        for k in 0..n {
            ctrb.view_mut((0, k * p), (n, p)).copy_from(&block);
            block = &self.a * block;
        }
        let scale = ctrb.amax().max(1.0);
        ctrb.svd(false, false).rank(1e-10 * scale)
    }

    /// Full controllability implies stabilizability; used as the precondition check.
    pub fn is_controllable(&self) -> bool {
        self.controllability_rank() == self.state_dim()
    }
}

/// Equilibrium pair satisfying `z = A z + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub state: DVector<f64>,
    pub input: DVector<f64>,
}

impl SteadyState {
    pub fn residual(&self, model: &LtiModel) -> f64 {
        (&self.state - model.step(&self.state, &self.input)).norm()
    }
}

/// Solves `[(I - A), -B; I, 0] [z; u] = [0; d]` for the equilibrium tracking the target state `d`.
///
/// The stacked matrix must have full column rank and the solution must satisfy the
/// equilibrium to 1e-9, otherwise the reference cannot be held.
pub fn steady_state(model: &LtiModel, target: &DVector<f64>) -> Result<SteadyState> {
    let n = model.state_dim();
    let p = model.input_dim();
    if target.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "reference has length {}, state has {n}",
            target.len()
        )));
    }
    let mut m = DMatrix::zeros(2 * n, n + p);
    let i_minus_a = DMatrix::identity(n, n) - model.a();
    m.view_mut((0, 0), (n, n)).copy_from(&i_minus_a);
    m.view_mut((0, n), (n, p)).copy_from(&(-model.b()));
    m.view_mut((n, 0), (n, n)).fill_with_identity();
    let mut rhs = DVector::zeros(2 * n);
    rhs.rows_mut(n, n).copy_from(target);

    let scale = m.amax().max(1.0);
    let svd = m.clone().svd(true, true);
    if svd.rank(1e-12 * scale) < n + p {
        return Err(Error::SingularSystem(
            "steady-state matrix is rank deficient".into(),
        ));
    }
    let sol = svd
        .solve(&rhs, 1e-14 * scale)
        .map_err(|e| Error::SingularSystem(e.to_string()))?;
    let ss = SteadyState {
        state: sol.rows(0, n).into_owned(),
        input: sol.rows(n, p).into_owned(),
    };
    let fit = (&m * sol - rhs).norm();
    if fit > 1e-9 || ss.residual(model) > 1e-9 {
        return Err(Error::SingularSystem(format!(
            "reference is not an equilibrium (residual {fit:e})"
        )));
    }
    Ok(ss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn integrator_equilibrium_has_zero_input() {
        let model = LtiModel::single_integrator(2, 0.02);
        let ss = steady_state(&model, &DVector::from_vec(vec![0.0, 2.8])).unwrap();
        assert!((&ss.state - DVector::from_vec(vec![0.0, 2.8])).amax() < 1e-12);
        assert!(ss.input.norm() < 1e-12);
    }

    #[test]
    fn zero_input_matrix_is_singular() {
        let model = LtiModel::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), 0.02).unwrap();
        let err = steady_state(&model, &DVector::from_vec(vec![0.3, -0.1])).unwrap_err();
        assert!(matches!(err, Error::SingularSystem(_)));
    }

    #[test]
    fn random_models_meet_the_equilibrium() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..5);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let model = LtiModel::new(a, b, 0.1).unwrap();
            if !model.is_controllable() {
                continue;
            }
            let d = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let ss = steady_state(&model, &d).unwrap();
            // Independent check by dense LU on B u = (I - A) d.
            let rhs = (DMatrix::identity(n, n) - model.a()) * &d;
            let u = model.b().clone().lu().solve(&rhs).unwrap();
            assert!((&u - &ss.input).norm() <= 1e-8 * (1.0 + u.norm()));
            assert!(ss.residual(&model) <= 1e-9);
        }
    }

    #[test]
    fn controllability_rank_detects_uncontrolled_axis() {
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let model = LtiModel::new(DMatrix::identity(2, 2), b, 0.1).unwrap();
        assert_eq!(model.controllability_rank(), 1);
        assert!(LtiModel::single_integrator(3, 0.02).is_controllable());
    }
}

use nalgebra::{DMatrix, DVector};
use pripg::lin_mpc::{
    condense, riccati_map, steady_state, terminal_ingredients, LtiModel, MpcProblem, Polytope, RowKind, SteadyState,
};
use pripg::nav_env::{Arena, NavEnv};
use pripg::reap::{NavPlanner, PlannerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Random controllable model with a box-constrained tracking problem around its equilibrium.
fn random_problem(rng: &mut ChaCha8Rng) -> MpcProblem {
    let n = rng.random_range(2..=4);
    // A square input matrix lets every target state be held.
    let p = n;
    let model = loop {
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.2..0.2));
        let b = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let m = LtiModel::new(a, b, 0.1).unwrap();
        if m.is_controllable() {
            break m;
        }
    };
    let target = DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
    let reference = steady_state(&model, &target).unwrap();
    let state_cost = spd(rng, n);
    let input_cost = spd(rng, p);
    let state_set = Polytope::symmetric_box(n, 5.0).unwrap();
    let bound = reference.input.amax() + 1.0;
    let input_set = Polytope::symmetric_box(p, bound).unwrap();
    let terminal = terminal_ingredients(&model, &state_cost, &input_cost, &state_set, &reference, 0.5).unwrap();
    MpcProblem {
        horizon: rng.random_range(1..=8),
        state_cost,
        input_cost,
        terminal_cost: terminal.cost,
        terminal_set: terminal.set,
        state_set,
        input_set,
        initial_state: DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
        reference,
        model,
    }
}

#[test]
fn condensed_cost_equals_simulated_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let problem = random_problem(&mut rng);
        let qp = condense(&problem).unwrap();
        for _ in 0..5 {
            let u = DVector::from_fn(qp.dim(), |_, _| rng.random_range(-2.0..2.0));
            let direct = problem.trajectory_cost(&u);
            assert!((qp.cost(&u) - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{} vs {direct}", qp.cost(&u));
        }
    }
}

#[test]
fn condensed_rows_match_simulated_constraints() {
    // Each row, rescaled by its stored factor, is the original halfspace on the rolled-out state.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let problem = random_problem(&mut rng);
        let qp = condense(&problem).unwrap();
        let u = DVector::from_fn(qp.dim(), |_, _| rng.random_range(-2.0..2.0));
        let traj = problem.rollout(&u);
        let p = problem.model.input_dim();
        let values = qp.row_values(&u);
        for (i, o) in qp.origins.iter().enumerate() {
            let direct = match o.kind {
                RowKind::State => problem.state_set.rows()[o.index].value(&traj[o.stage]),
                RowKind::Input => problem.input_set.rows()[o.index].value(&u.rows(o.stage * p, p).into_owned()),
                RowKind::Terminal => problem.terminal_set.rows()[o.index].value(&traj[problem.horizon]),
            };
            assert!((values[i] * o.scale - direct).abs() <= 1e-10 * direct.abs().max(1.0));
        }
    }
}

#[test]
fn row_count_is_stagewise() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let problem = random_problem(&mut rng);
        let qp = condense(&problem).unwrap();
        let n = problem.horizon;
        assert_eq!(qp.n_rows(), n * problem.state_set.len() + n * problem.input_set.len() + problem.terminal_set.len());
        let kinds: Vec<RowKind> = qp.origins.iter().map(|o| o.kind).collect();
        let mut sorted = kinds.clone();
        sorted.sort_by_key(|k| *k as u8);
        assert_eq!(kinds, sorted, "rows grouped as state, input, terminal");
    }
}

#[test]
fn input_box_only_integrator() {
    let model = LtiModel::single_integrator(2, 0.02);
    let reference = SteadyState { state: DVector::from_vec(vec![0.0, 2.8]), input: DVector::zeros(2) };
    let problem = MpcProblem {
        horizon: 2,
        state_cost: DMatrix::identity(2, 2),
        input_cost: DMatrix::identity(2, 2),
        terminal_cost: DMatrix::identity(2, 2),
        state_set: Polytope::unconstrained(2),
        input_set: Polytope::symmetric_box(2, 0.5).unwrap(),
        terminal_set: Polytope::unconstrained(2),
        reference,
        initial_state: DVector::from_vec(vec![0.3, -1.0]),
        model,
    };
    let qp = condense(&problem).unwrap();
    assert_eq!(qp.n_rows(), 8);
    for i in 0..8 {
        let (eta, g) = qp.row(i);
        assert_eq!(eta.iter().filter(|v| **v != 0.0).count(), 1);
        assert!((eta.norm() - 1.0).abs() < 1e-15 && eta.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        assert_eq!(g, -0.5);
    }
}

#[test]
fn terminal_weight_is_a_riccati_fixed_point() {
    let model = LtiModel::single_integrator(2, 0.02);
    let eye = DMatrix::identity(2, 2);
    let state_set = Polytope::symmetric_box(2, 3.0).unwrap();
    let reference = steady_state(&model, &DVector::from_vec(vec![0.0, 2.8])).unwrap();
    let t = terminal_ingredients(&model, &eye, &eye, &state_set, &reference, 0.5).unwrap();
    let next = riccati_map(&model, &eye, &eye, &t.cost).unwrap();
    assert!((&next - &t.cost).amax() <= 1e-12 * t.cost.amax());
    // Oracle: for A = I, B = bI, Q = R = I the map is scalar, p = 1 + p/(1 + b²p).
    let b2 = 0.02f64 * 0.02;
    let p = (b2 + (b2 * b2 + 4.0 * b2).sqrt()) / (2.0 * b2);
    assert!((t.cost[(0, 0)] - p).abs() <= 1e-9 * p && t.cost[(0, 1)].abs() <= 1e-9);
}

#[test]
fn zero_shrink_collapses_to_the_reference() {
    let model = LtiModel::single_integrator(2, 0.02);
    let eye = DMatrix::identity(2, 2);
    let state_set = Polytope::symmetric_box(2, 3.0).unwrap();
    let reference = steady_state(&model, &DVector::from_vec(vec![0.4, 2.8])).unwrap();
    let t = terminal_ingredients(&model, &eye, &eye, &state_set, &reference, 0.0).unwrap();
    assert!(t.set.contains(&reference.state, 1e-12));
    for d in [[1e-6, 0.0], [0.0, -1e-6]] {
        let off = &reference.state + DVector::from_row_slice(&d);
        assert!(!t.set.contains(&off, 1e-9));
    }
    assert!(state_set.contains_strictly(&reference.state));
}

#[test]
fn scenario_terminal_box_lies_inside_the_state_set() {
    let env = NavEnv::new(Arena::default()).unwrap();
    let planner = NavPlanner::new(PlannerConfig::default(), env.planner_view(&env.reset(0).unwrap().0).1, env.arena().robot_radius, env.arena().dt)
        .unwrap();
    let goal = env.arena().goal;
    let (state_set, _) = planner.state_set(goal).unwrap();
    let model = LtiModel::single_integrator(2, env.arena().dt);
    let reference = steady_state(&model, &DVector::from_row_slice(&goal)).unwrap();
    let eye = DMatrix::identity(2, 2);
    for shrink in [0.25, 0.5, 0.9, 1.0] {
        let t = terminal_ingredients(&model, &eye, &eye, &state_set, &reference, shrink).unwrap();
        assert!(t.set.contains_strictly(&reference.state) || shrink == 0.0);
        // The cube rows come first: upper bound z_j <= zr_j + w.
        let w = -t.set.rows()[0].offset - reference.state[0];
        assert!(w > 0.0);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                let v = &reference.state + DVector::from_vec(vec![sx * w, sy * w]);
                assert!(state_set.contains(&v, 1e-12), "vertex {v:?} outside");
                assert!(t.set.contains(&v, 1e-12));
            }
        }
    }
}

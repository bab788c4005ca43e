//! Point-mass navigation arena with blind observations.
//!
//! The learner sees only its own position and the goal. Obstacle and wall
//! geometry is available through [`NavEnv::planner_view`] and nowhere else.

use std::f64::consts::TAU;
use std::io::Write;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBS_DIM: usize = 4;
pub const ACT_DIM: usize = 2;
const MAX_SPAWN_DRAWS: usize = 100_000;
const SPAWN_GRID: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Wall row `normal · p ≤ offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub normal: [f64; 2],
    pub offset: f64,
}

impl Boundary {
    /// Signed distance from `p` to the wall, positive inside.
    pub fn clearance(&self, p: [f64; 2]) -> f64 {
        self.offset - (self.normal[0] * p[0] + self.normal[1] * p[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arena {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    pub goal: [f64; 2],
    pub goal_tol: f64,
    pub robot_radius: f64,
    pub max_steps: usize,
    pub dt: f64,
    /// Per-axis clip applied to commanded velocities.
    pub action_bound: f64,
    /// Spawns are drawn with `y < spawn_y_max`.
    pub spawn_y_max: f64,
    /// Extra clearance beyond the robot radius required at spawn.
    pub spawn_margin: f64,
    /// Per-axis amplitude of the model residual, meters per step.
    pub disturbance: f64,
}

impl Default for Arena {
    fn default() -> Self {
        let r = 0.23;
        let centers = [[0.0, 0.15], [0.0, 1.45], [1.3, 0.75], [-1.3, 0.75], [1.3, -0.45], [-1.3, -0.45]];
        Self {
            x_range: [-2.2, 2.0],
            y_range: [-2.0, 3.5],
            obstacles: centers.iter().map(|&center| Obstacle { center, radius: r }).collect(),
            goal: [0.0, 2.8],
            goal_tol: 0.3,
            robot_radius: 0.35,
            max_steps: 8000,
            dt: 0.02,
            action_bound: 0.7,
            spawn_y_max: 0.75,
            spawn_margin: 0.1,
            disturbance: 0.002,
        }
    }
}

impl Arena {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        if !(self.x_range[0] < self.x_range[1]) || !(self.y_range[0] < self.y_range[1]) {
            return Err(Error::Config("arena ranges must be increasing".into()));
        }
        if !(self.goal_tol > 0.0) || !(self.robot_radius >= 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("goal_tol, robot_radius and dt must be positive".into()));
        }
        if !(self.action_bound > 0.0) || !(self.disturbance >= 0.0) || !(self.spawn_margin >= 0.0) {
            return Err(Error::Config("action_bound, disturbance and spawn_margin must be nonnegative".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        for o in &self.obstacles {
            if !finite(o.center[0]) || !finite(o.center[1]) || !(o.radius > 0.0) {
                return Err(Error::Config(format!("bad obstacle {o:?}")));
            }
        }
        if self.collides(self.goal) {
            return Err(Error::Config("goal is not collision-free".into()));
        }
        Ok(())
    }

    /// The four walls in the order right, left, top, bottom.
    pub fn boundaries(&self) -> [Boundary; 4] {
        [
            Boundary { normal: [1.0, 0.0], offset: self.x_range[1] },
            Boundary { normal: [-1.0, 0.0], offset: -self.x_range[0] },
            Boundary { normal: [0.0, 1.0], offset: self.y_range[1] },
            Boundary { normal: [0.0, -1.0], offset: -self.y_range[0] },
        ]
    }

    /// Smallest distance from the robot body to any obstacle or wall. Negative
    /// values mean contact.
    pub fn clearance(&self, p: [f64; 2]) -> f64 {
        let obs = self
            .obstacles
            .iter()
            .map(|o| dist(p, o.center) - o.radius - self.robot_radius);
        let walls = self.boundaries().into_iter().map(|b| b.clearance(p) - self.robot_radius);
        obs.chain(walls).fold(f64::INFINITY, f64::min)
    }

    pub fn collides(&self, p: [f64; 2]) -> bool {
        self.clearance(p) < 0.0
    }

    pub fn goal_distance(&self, p: [f64; 2]) -> f64 {
        dist(p, self.goal)
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terminal {
    None,
    Goal,
    Crash,
    Timeout,
}

impl Terminal {
    pub fn is_terminal(self) -> bool {
        self != Terminal::None
    }

    /// Goal and crash end the process; a timeout only truncates it.
    pub fn absorbing(self) -> bool {
        matches!(self, Terminal::Goal | Terminal::Crash)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::None => "none",
            Terminal::Goal => "goal",
            Terminal::Crash => "crash",
            Terminal::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub position: [f64; 2],
    pub t: usize,
    /// Disturbance phases, drawn per episode.
    pub phase: [f64; 2],
    pub status: Terminal,
}

pub type Observation = [f64; OBS_DIM];

/// What the planner may see besides the robot position.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivilegedInfo {
    pub obstacles: Vec<Obstacle>,
    pub boundaries: [Boundary; 4],
    pub goal: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub s_next: Observation,
    pub reward: f64,
    pub terminal: Terminal,
    /// Action after clipping, as actually applied.
    pub applied: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct NavEnv {
    arena: Arena,
    reach: DistanceField,
}

pub const STEP_COST: f64 = 1.0;
pub const EFFORT_WEIGHT: f64 = 0.02;
pub const GOAL_BONUS: f64 = 100.0;
pub const CRASH_PENALTY: f64 = 200.0;

impl NavEnv {
    pub fn new(arena: Arena) -> Result<Self> {
        arena.validate()?;
        let info = PrivilegedInfo {
            obstacles: arena.obstacles.clone(),
            boundaries: arena.boundaries(),
            goal: arena.goal,
        };
        let reach = DistanceField::new(&info, arena.robot_radius, arena.spawn_margin, SPAWN_GRID)?;
        Ok(Self { arena, reach })
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    /// Draws a spawn uniformly below `spawn_y_max`, rejecting positions that are not clear by
    /// `spawn_margin` or from which the goal cannot be reached at that clearance.
    pub fn reset(&self, seed: u64) -> Result<(FullState, Observation)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
        let a = &self.arena;
        let y_hi = a.spawn_y_max.min(a.y_range[1]);
        if !(y_hi > a.y_range[0]) {
            return Err(Error::RejectionExhausted(0));
        }
        for _ in 0..MAX_SPAWN_DRAWS {
            let p = [rng.random_range(a.x_range[0]..a.x_range[1]), rng.random_range(a.y_range[0]..y_hi)];
            let clear = a.clearance(p) >= a.spawn_margin && a.goal_distance(p) >= a.goal_tol;
            if clear && self.reach.reachable(p) {
                let state = FullState { position: p, t: 0, phase, status: Terminal::None };
                let s = self.observe(&state);
                return Ok((state, s));
            }
        }
        Err(Error::RejectionExhausted(MAX_SPAWN_DRAWS))
    }

    pub fn clip_action(&self, u: [f64; 2]) -> [f64; 2] {
        let b = self.arena.action_bound;
        [u[0].clamp(-b, b), u[1].clamp(-b, b)]
    }

    /// Residual added on top of the single-integrator model at step `t`.
    pub fn disturbance(&self, state: &FullState) -> [f64; 2] {
        let d = self.arena.disturbance;
        let t = state.t as f64;
        [d * (state.phase[0] + 0.013 * t).sin(), d * (state.phase[1] + 0.017 * t).cos()]
    }

    pub fn step(&self, state: &mut FullState, u: [f64; 2]) -> Result<StepResult> {
        if state.status.is_terminal() {
            return Err(Error::StepAfterTerminal);
        }
        if !u[0].is_finite() || !u[1].is_finite() {
            return Err(Error::InvalidParameter(format!("non-finite action {u:?}")));
        }
        let a = &self.arena;
        let u = self.clip_action(u);
        let w = self.disturbance(state);
        state.position = [
            state.position[0] + a.dt * u[0] + w[0],
            state.position[1] + a.dt * u[1] + w[1],
        ];
        state.t += 1;
        let mut reward = -STEP_COST - EFFORT_WEIGHT * (u[0] * u[0] + u[1] * u[1]);
        let terminal = if a.goal_distance(state.position) < a.goal_tol {
            reward += GOAL_BONUS;
            Terminal::Goal
        } else if a.collides(state.position) {
            reward -= CRASH_PENALTY;
            Terminal::Crash
        } else if state.t >= a.max_steps {
            Terminal::Timeout
        } else {
            Terminal::None
        };
        state.status = terminal;
        Ok(StepResult { s_next: self.observe(state), reward, terminal, applied: u })
    }

    pub fn observe(&self, state: &FullState) -> Observation {
        [state.position[0], state.position[1], self.arena.goal[0], self.arena.goal[1]]
    }

    pub fn planner_view(&self, state: &FullState) -> ([f64; 2], PrivilegedInfo) {
        let info = PrivilegedInfo {
            obstacles: self.arena.obstacles.clone(),
            boundaries: self.arena.boundaries(),
            goal: self.arena.goal,
        };
        (state.position, info)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub position: [f64; 2],
    pub action: [f64; 2],
    pub reward: f64,
    pub terminal: Terminal,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub spawn: [f64; 2],
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn new(spawn: [f64; 2]) -> Self {
        Self { spawn, steps: Vec::new() }
    }

    pub fn push(&mut self, t: usize, r: &StepResult, position: [f64; 2]) {
        self.steps.push(StepRecord { t, position, action: r.applied, reward: r.reward, terminal: r.terminal });
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn outcome(&self) -> Terminal {
        self.steps.last().map_or(Terminal::None, |s| s.terminal)
    }

    /// Writes `t,x,y,u_x,u_y,reward,terminal`, one row per step.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "x", "y", "u_x", "u_y", "reward", "terminal"])?;
        for s in &self.steps {
            out.write_record([
                s.t.to_string(),
                s.position[0].to_string(),
                s.position[1].to_string(),
                s.action[0].to_string(),
                s.action[1].to_string(),
                s.reward.to_string(),
                s.terminal.as_str().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub crash: bool,
    pub path_length: f64,
    pub path_optimality: f64,
    pub duration_s: f64,
    pub avg_velocity: f64,
    /// Set when the optimality figure comes from an episode that did not
    /// reach the goal.
    pub optimality_flagged: bool,
}

pub fn episode_metrics(traj: &Trajectory, arena: &Arena) -> Result<EpisodeMetrics> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let mut prev = traj.spawn;
    let mut length = 0.0;
    for s in &traj.steps {
        length += dist(prev, s.position);
        prev = s.position;
    }
    let outcome = traj.outcome();
    let straight = dist(traj.spawn, arena.goal);
    let duration = traj.steps.len() as f64 * arena.dt;
    Ok(EpisodeMetrics {
        success: outcome == Terminal::Goal,
        crash: outcome == Terminal::Crash,
        path_length: length,
        path_optimality: if straight > 0.0 { length / straight } else { f64::NAN },
        duration_s: duration,
        avg_velocity: length / duration,
        optimality_flagged: outcome != Terminal::Goal,
    })
}


/// Geodesic distance to the goal over a grid of body positions.
///
/// A cell is free when the robot body centred there keeps at least `clearance` from every
/// obstacle and wall. Distances come from a shortest-path search on the 8-connected grid;
/// diagonal moves require both adjacent orthogonal cells to be free.
#[derive(Debug, Clone)]
pub struct DistanceField {
    origin: [f64; 2],
    resolution: f64,
    nx: usize,
    ny: usize,
    dist: Vec<f64>,
    goal: [f64; 2],
    goal_cell: usize,
}

impl DistanceField {
    pub fn new(info: &PrivilegedInfo, robot_radius: f64, clearance: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::InvalidParameter(format!("resolution {resolution}")));
        }
        let b = &info.boundaries;
        let x_lo = -b.iter().find(|w| w.normal == [-1.0, 0.0]).map_or(f64::NAN, |w| w.offset);
        let y_lo = -b.iter().find(|w| w.normal == [0.0, -1.0]).map_or(f64::NAN, |w| w.offset);
        let x_hi = b.iter().find(|w| w.normal == [1.0, 0.0]).map_or(f64::NAN, |w| w.offset);
        let y_hi = b.iter().find(|w| w.normal == [0.0, 1.0]).map_or(f64::NAN, |w| w.offset);
        if !(x_lo < x_hi) || !(y_lo < y_hi) {
            return Err(Error::InvalidParameter("boundaries must form an axis-aligned box".into()));
        }
        let nx = ((x_hi - x_lo) / resolution).ceil() as usize;
        let ny = ((y_hi - y_lo) / resolution).ceil() as usize;
        let origin = [x_lo, y_lo];
        let body = |p: [f64; 2]| {
            let obs = info.obstacles.iter().map(|o| dist(p, o.center) - o.radius - robot_radius);
            let walls = b.iter().map(|w| w.clearance(p) - robot_radius);
            obs.chain(walls).fold(f64::INFINITY, f64::min)
        };
        let center = |i: usize, j: usize| [x_lo + (i as f64 + 0.5) * resolution, y_lo + (j as f64 + 0.5) * resolution];
        let free: Vec<bool> = (0..nx * ny).map(|c| body(center(c % nx, c / nx)) >= clearance).collect();

        let mut graph = UnGraph::<(), f64>::with_capacity(nx * ny, 4 * nx * ny);
        let nodes: Vec<NodeIndex> = (0..nx * ny).map(|_| graph.add_node(())).collect();
        let diag = resolution * std::f64::consts::SQRT_2;
        for j in 0..ny {
            for i in 0..nx {
                let c = j * nx + i;
                if !free[c] {
                    continue;
                }
                if i + 1 < nx && free[c + 1] {
                    graph.add_edge(nodes[c], nodes[c + 1], resolution);
                }
                if j + 1 < ny && free[c + nx] {
                    graph.add_edge(nodes[c], nodes[c + nx], resolution);
                }
                if i + 1 < nx && j + 1 < ny && free[c + nx + 1] && free[c + 1] && free[c + nx] {
                    graph.add_edge(nodes[c], nodes[c + nx + 1], diag);
                }
                if i > 0 && j + 1 < ny && free[c + nx - 1] && free[c - 1] && free[c + nx] {
                    graph.add_edge(nodes[c], nodes[c + nx - 1], diag);
                }
            }
        }
        let goal_cell = (0..nx * ny)
            .filter(|&c| free[c])
            .min_by(|&a, &b| {
                let da = dist(center(a % nx, a / nx), info.goal);
                let db = dist(center(b % nx, b / nx), info.goal);
                da.total_cmp(&db)
            })
            .ok_or_else(|| Error::InfeasibleProblem("no free cell in the arena".into()))?;
        let reached = dijkstra(&graph, nodes[goal_cell], None, |e| *e.weight());
        let mut d = vec![f64::INFINITY; nx * ny];
        for (node, v) in reached {
            d[node.index()] = v;
        }
        Ok(Self { origin, resolution, nx, ny, dist: d, goal: info.goal, goal_cell })
    }

    fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let i = ((p[0] - self.origin[0]) / self.resolution).floor();
        let j = ((p[1] - self.origin[1]) / self.resolution).floor();
        if i < 0.0 || j < 0.0 || i as usize >= self.nx || j as usize >= self.ny {
            return None;
        }
        Some((i as usize, j as usize))
    }

    fn center(&self, c: usize) -> [f64; 2] {
        [
            self.origin[0] + ((c % self.nx) as f64 + 0.5) * self.resolution,
            self.origin[1] + ((c / self.nx) as f64 + 0.5) * self.resolution,
        ]
    }

    /// Grid distance to the goal from the cell containing `p`; infinite when unreachable.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        self.cell_of(p).map_or(f64::INFINITY, |(i, j)| self.dist[j * self.nx + i])
    }

    pub fn reachable(&self, p: [f64; 2]) -> bool {
        self.distance(p).is_finite()
    }

    /// Reachable cell near `p` minimizing straight-line distance plus distance-to-go.
    fn entry(&self, p: [f64; 2], radius: f64) -> Option<usize> {
        let (ci, cj) = self.cell_of(p)?;
        let k = (radius / self.resolution).ceil() as isize;
        let mut best: Option<(f64, usize)> = None;
        for dj in -k..=k {
            for di in -k..=k {
                let (i, j) = (ci as isize + di, cj as isize + dj);
                if i < 0 || j < 0 || i as usize >= self.nx || j as usize >= self.ny {
                    continue;
                }
                let c = j as usize * self.nx + i as usize;
                let hop = dist(p, self.center(c));
                if !self.dist[c].is_finite() || hop > radius {
                    continue;
                }
                let score = hop + self.dist[c];
                if best.is_none_or(|(s, _)| score < s) {
                    best = Some((score, c));
                }
            }
        }
        best.map(|(_, c)| c)
    }

    /// Point about `lookahead` meters down the shortest route from `p`. Returns the goal
    /// itself once it is within reach, and `None` when no route is found near `p`.
    pub fn carrot(&self, p: [f64; 2], lookahead: f64) -> Option<[f64; 2]> {
        if dist(p, self.goal) <= lookahead {
            return Some(self.goal);
        }
        let mut c = self.entry(p, 0.3)?;
        let mut travelled = dist(p, self.center(c));
        while travelled < lookahead {
            if c == self.goal_cell {
                return Some(self.goal);
            }
            let (i, j) = ((c % self.nx) as isize, (c / self.nx) as isize);
            let mut next: Option<(f64, usize)> = None;
            for (di, dj) in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
                let (a, b) = (i + di, j + dj);
                if a < 0 || b < 0 || a as usize >= self.nx || b as usize >= self.ny {
                    continue;
                }
                let n = b as usize * self.nx + a as usize;
                let step = if di != 0 && dj != 0 { self.resolution * std::f64::consts::SQRT_2 } else { self.resolution };
                let score = step + self.dist[n];
                if self.dist[n] < self.dist[c] && next.is_none_or(|(s, _)| score < s) {
                    next = Some((score, n));
                }
            }
            let Some((_, n)) = next else { break };
            travelled += dist(self.center(c), self.center(n));
            c = n;
        }
        Some(self.center(c))
    }
}

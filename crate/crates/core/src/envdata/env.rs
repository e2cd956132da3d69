use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PointMaze,
    Pendulum,
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvName::PointMaze => "point_maze",
            EnvName::Pendulum => "pendulum",
        })
    }
}

impl FromStr for EnvName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_maze" => Ok(EnvName::PointMaze),
            "pendulum" => Ok(EnvName::Pendulum),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// Environment description with the random and expert reference returns
/// used for score normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub random_return: f64,
    pub expert_return: f64,
}

const REFERENCE_EPISODES: usize = 20;
const REFERENCE_SEED: u64 = 0x5eed_0f_ae;

impl EnvSpec {
    /// Spec with reference returns measured once per process: mean return of
    /// 20 uniform-random episodes and of 20 expert-controller episodes.
    pub fn new(name: EnvName) -> Self {
        static MAZE: OnceLock<EnvSpec> = OnceLock::new();
        static PENDULUM: OnceLock<EnvSpec> = OnceLock::new();
        let cell = match name {
            EnvName::PointMaze => &MAZE,
            EnvName::Pendulum => &PENDULUM,
        };
        *cell.get_or_init(|| {
            let mut spec = EnvSpec::unreferenced(name);
            let mut r = rng::stream(REFERENCE_SEED);
            let mean = |spec: &EnvSpec, p: &dyn Fn(&[f64], &mut rng::Stream) -> Vec<f64>, r: &mut rng::Stream| {
                (0..REFERENCE_EPISODES)
                    .map(|_| run_episode(spec, |s, r| p(s, r), r).0)
                    .sum::<f64>()
                    / REFERENCE_EPISODES as f64
            };
            let expert = ExpertController::new(name);
            spec.random_return = mean(&spec, &|_, r| UniformPolicy.sample(spec.action_dim, r), &mut r);
            spec.expert_return = mean(&spec, &|s, _| expert.act(s), &mut r);
            spec
        })
    }

    pub fn point_maze() -> Self {
        EnvSpec::new(EnvName::PointMaze)
    }

    pub fn pendulum() -> Self {
        EnvSpec::new(EnvName::Pendulum)
    }

    /// Dimensions and horizon only; reference returns are zero.
    pub fn unreferenced(name: EnvName) -> Self {
        let (state_dim, action_dim, horizon) = match name {
            EnvName::PointMaze => (4, 2, 150),
            EnvName::Pendulum => (3, 1, 200),
        };
        EnvSpec {
            name,
            state_dim,
            action_dim,
            horizon,
            random_return: 0.0,
            expert_return: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub s_next: Vec<f64>,
    pub r: f64,
    pub done: bool,
}

// Point maze: arena [0, 3]^2, one wall attached to the left boundary.
const ARENA: f64 = 3.0;
/// Wall boxes `(x_lo, x_hi, y_lo, y_hi)`; interiors are open sets.
pub const MAZE_WALLS: [(f64, f64, f64, f64); 1] = [(0.0, 2.0, 1.25, 1.75)];
pub const MAZE_GOAL: [f64; 2] = [0.5, 2.5];
pub const GOAL_RADIUS: f64 = 0.1;
const MAZE_DT: f64 = 0.1;
const MAZE_MAX_SPEED: f64 = 1.0;

// Pendulum: angle 0 is upright.
const PEND_DT: f64 = 0.05;
const PEND_G: f64 = 10.0;
const PEND_MAX_TORQUE: f64 = 2.0;
const PEND_MAX_SPEED: f64 = 8.0;

/// Deterministic environment transition. Actions are clipped to `[-1, 1]`.
pub fn env_step(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<StepOutcome> {
    if s.len() != spec.state_dim || a.len() != spec.action_dim {
        return Err(Error::Shape(format!(
            "{} expects state {} / action {}, got {} / {}",
            spec.name,
            spec.state_dim,
            spec.action_dim,
            s.len(),
            a.len()
        )));
    }
    if !s.iter().chain(a).all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("{} state or action", spec.name)));
    }
    let a: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(match spec.name {
        EnvName::PointMaze => maze_step(s, &a),
        EnvName::Pendulum => pendulum_step(s, a[0]),
    })
}

fn inside(v: f64, lo: f64, hi: f64) -> bool {
    v > lo && v < hi
}

/// Double integrator with per-axis swept collision against the walls.
fn maze_step(s: &[f64], a: &[f64]) -> StepOutcome {
    let (mut x, mut y, mut vx, mut vy) = (s[0], s[1], s[2], s[3]);

    // A state inside a wall (only reachable through model predictions) is
    // first pushed out through the nearest face.
    for &(xl, xh, yl, yh) in &MAZE_WALLS {
        if inside(x, xl, xh) && inside(y, yl, yh) {
            let faces = [(x - xl, 0), (xh - x, 1), (y - yl, 2), (yh - y, 3)];
            let (_, face) = faces.iter().copied().fold((f64::INFINITY, 0), |m, f| if f.0 < m.0 { f } else { m });
            match face {
                0 => (x, vx) = (xl, 0.0),
                1 => (x, vx) = (xh, 0.0),
                2 => (y, vy) = (yl, 0.0),
                _ => (y, vy) = (yh, 0.0),
            }
        }
    }
    x = x.clamp(0.0, ARENA);
    y = y.clamp(0.0, ARENA);

    let nvx = (vx + a[0] * MAZE_DT).clamp(-MAZE_MAX_SPEED, MAZE_MAX_SPEED);
    let nvy = (vy + a[1] * MAZE_DT).clamp(-MAZE_MAX_SPEED, MAZE_MAX_SPEED);
    let (mut nx, mut nvx) = (x + 0.5 * (vx + nvx) * MAZE_DT, nvx);
    for &(xl, xh, yl, yh) in &MAZE_WALLS {
        if inside(y, yl, yh) {
            if nx > x && x <= xl && nx > xl {
                (nx, nvx) = (xl, 0.0);
            } else if nx < x && x >= xh && nx < xh {
                (nx, nvx) = (xh, 0.0);
            }
        }
    }
    if !(0.0..=ARENA).contains(&nx) {
        (nx, nvx) = (nx.clamp(0.0, ARENA), 0.0);
    }
    let (mut ny, mut nvy) = (y + 0.5 * (vy + nvy) * MAZE_DT, nvy);
    for &(xl, xh, yl, yh) in &MAZE_WALLS {
        if inside(nx, xl, xh) {
            if ny > y && y <= yl && ny > yl {
                (ny, nvy) = (yl, 0.0);
            } else if ny < y && y >= yh && ny < yh {
                (ny, nvy) = (yh, 0.0);
            }
        }
    }
    if !(0.0..=ARENA).contains(&ny) {
        (ny, nvy) = (ny.clamp(0.0, ARENA), 0.0);
    }
    let dist = ((nx - MAZE_GOAL[0]).powi(2) + (ny - MAZE_GOAL[1]).powi(2)).sqrt();
    StepOutcome {
        s_next: vec![nx, ny, nvx, nvy],
        r: -dist,
        done: dist <= GOAL_RADIUS,
    }
}

fn wrap_angle(th: f64) -> f64 {
    (th + PI).rem_euclid(2.0 * PI) - PI
}

fn pendulum_step(s: &[f64], a: f64) -> StepOutcome {
    let th = s[1].atan2(s[0]);
    let w = s[2];
    let u = PEND_MAX_TORQUE * a;
    let r = -(wrap_angle(th).powi(2) + 0.1 * w * w + 0.001 * a * a);
    let nw = (w + (1.5 * PEND_G * th.sin() + 3.0 * u) * PEND_DT).clamp(-PEND_MAX_SPEED, PEND_MAX_SPEED);
    let nth = th + nw * PEND_DT;
    StepOutcome {
        s_next: vec![nth.cos(), nth.sin(), nw],
        r,
        done: false,
    }
}

/// Episode start state.
pub fn reset<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Vec<f64> {
    match spec.name {
        EnvName::PointMaze => vec![
            0.5 + rng.random_range(-0.1..0.1),
            0.5 + rng.random_range(-0.1..0.1),
            0.0,
            0.0,
        ],
        EnvName::Pendulum => {
            let th = PI + rng.random_range(-0.3..0.3);
            vec![th.cos(), th.sin(), rng.random_range(-0.5..0.5)]
        }
    }
}

/// Run one episode with a (possibly stochastic) policy; returns the total
/// reward and the visited transitions as `(s, a, r, s_next, done)`.
pub fn run_episode<R, F>(spec: &EnvSpec, mut policy: F, rng: &mut R) -> (f64, Vec<(Vec<f64>, Vec<f64>, StepOutcome)>)
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], &mut R) -> Vec<f64>,
{
    let mut s = reset(spec, rng);
    let mut total = 0.0;
    let mut steps = Vec::with_capacity(spec.horizon);
    for _ in 0..spec.horizon {
        let a: Vec<f64> = policy(&s, rng).into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let out = env_step(spec, &s, &a).expect("finite rollout");
        total += out.r;
        let done = out.done;
        let next = out.s_next.clone();
        steps.push((s, a, out));
        s = next;
        if done {
            break;
        }
    }
    (total, steps)
}

/// Deterministic state-feedback policy.
pub trait Policy {
    fn act(&self, s: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy;

impl UniformPolicy {
    pub fn sample<R: Rng + ?Sized>(&self, action_dim: usize, rng: &mut R) -> Vec<f64> {
        (0..action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

/// Built-in proportional controllers. Point maze: PD control toward the
/// first unobstructed target among goal and two corridor waypoints.
/// Pendulum: energy pumping, then PD stabilisation near upright.
#[derive(Debug, Clone, Copy)]
pub struct ExpertController {
    env: EnvName,
}

const MAZE_WAYPOINTS: [[f64; 2]; 3] = [MAZE_GOAL, [2.5, 2.0], [2.5, 1.0]];
const WALL_MARGIN: f64 = 0.15;

fn segment_hits_box(p: [f64; 2], q: [f64; 2], b: (f64, f64, f64, f64)) -> bool {
    // Slab test on the open box.
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for (o, e, lo, hi) in [(p[0], q[0] - p[0], b.0, b.1), (p[1], q[1] - p[1], b.2, b.3)] {
        if e.abs() < 1e-12 {
            if o <= lo || o >= hi {
                return false;
            }
        } else {
            let (a, c) = ((lo - o) / e, (hi - o) / e);
            t0 = t0.max(a.min(c));
            t1 = t1.min(a.max(c));
        }
    }
    t0 < t1
}

impl ExpertController {
    pub fn new(env: EnvName) -> Self {
        ExpertController { env }
    }

    /// Expert action with Gaussian action noise, clipped to bounds.
    pub fn noisy<R: Rng + ?Sized>(&self, s: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
        let n = Normal::new(0.0, sigma).expect("sigma >= 0");
        self.act(s)
            .into_iter()
            .map(|a| (a + n.sample(rng)).clamp(-1.0, 1.0))
            .collect()
    }
}

impl Policy for ExpertController {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        match self.env {
            EnvName::PointMaze => {
                let p = [s[0], s[1]];
                let target = MAZE_WAYPOINTS
                    .iter()
                    .copied()
                    .find(|&t| {
                        MAZE_WALLS.iter().all(|&(xl, xh, yl, yh)| {
                            !segment_hits_box(p, t, (xl - WALL_MARGIN, xh + WALL_MARGIN, yl - WALL_MARGIN, yh + WALL_MARGIN))
                        })
                    })
                    .unwrap_or(MAZE_WAYPOINTS[2]);
                (0..2)
                    .map(|i| (3.0 * (target[i] - p[i]) - 2.0 * s[2 + i]).clamp(-1.0, 1.0))
                    .collect()
            }
            EnvName::Pendulum => {
                let th = wrap_angle(s[1].atan2(s[0]));
                let w = s[2];
                if th.cos() > 0.85 {
                    vec![(-(5.0 * th + w)).clamp(-1.0, 1.0)]
                } else {
                    let energy = 0.5 * w * w + 1.5 * PEND_G * th.cos();
                    let deficit = 1.5 * PEND_G - energy;
                    vec![(w * deficit).clamp(-1.0, 1.0)]
                }
            }
        }
    }
}

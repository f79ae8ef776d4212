//! Deterministic 2D point-gripper insert task.
//!
//! The gripper moves by at most [`MAX_STEP`] per axis per step, grasps the
//! object when the gripper command is closed inside [`GRASP_RADIUS`], carries
//! it, and succeeds by releasing it within `success_radius` of the target.
//! All randomness comes from the task seed, so `(TaskSpec, actions)` fully
//! determines the trace.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::FlatConfig;
use crate::error::{Error, Result};

pub const OBS_DIM: usize = 11;
pub const ACTION_DIMS: usize = 3;
pub const MAX_STEP: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.02;
/// Distance at which the expert commits to closing on the object.
pub const EXPERT_GRASP_TOL: f64 = 0.01;
/// Distance at which the expert releases the object over the target.
pub const EXPERT_PLACE_TOL: f64 = 0.01;
/// The expert saturates its command beyond this distance and scales it down
/// linearly inside.
pub const EXPERT_SATURATION_DIST: f64 = 0.1;
/// The gripper-to-object offset in the observation is divided by this length.
pub const OFFSET_UNIT: f64 = EXPERT_SATURATION_DIST;
/// Expert commands snap to multiples of `1 / EXPERT_LEVELS`.
pub const EXPERT_LEVELS: f64 = 8.0;

pub const NOMINAL_TARGET: [f64; 2] = [0.75, 0.55];
/// Target rectangle under position disruption: `[x_lo, x_hi, y_lo, y_hi]`.
pub const POSITION_RECT: [f64; 4] = [0.62, 0.88, 0.38, 0.72];
pub const GRIPPER_RECT: [f64; 4] = [0.35, 0.65, 0.10, 0.30];
pub const OBJECT_RECT: [f64; 4] = [0.12, 0.32, 0.35, 0.70];
pub const NUISANCE_SPREAD: f64 = 0.1;
/// Offset added to nuisance dims 0..2 under background disruption.
pub const BACKGROUND_OFFSET: [f64; 2] = [0.6, -0.6];
/// Offset added to nuisance dims 2..4 under texture disruption.
pub const TEXTURE_OFFSET: [f64; 2] = [-0.6, 0.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Disruption {
    #[default]
    None,
    Position,
    Background,
    Texture,
}

impl Disruption {
    pub const ALL: [Disruption; 4] = [
        Disruption::None,
        Disruption::Position,
        Disruption::Background,
        Disruption::Texture,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Disruption::None => "none",
            Disruption::Position => "position",
            Disruption::Background => "background",
            Disruption::Texture => "texture",
        }
    }
}

impl fmt::Display for Disruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Disruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "nominal" => Ok(Disruption::None),
            "position" => Ok(Disruption::Position),
            "background" => Ok(Disruption::Background),
            "texture" => Ok(Disruption::Texture),
            other => Err(Error::Unknown {
                kind: "disruption",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub disruption: Disruption,
    pub seed: u64,
    #[serde(rename = "horizon")]
    pub episode_horizon: u32,
    pub success_radius: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            disruption: Disruption::None,
            seed: 0,
            episode_horizon: 200,
            success_radius: 0.03,
        }
    }
}

impl TaskSpec {
    pub fn new(disruption: Disruption, seed: u64) -> Self {
        Self {
            disruption,
            seed,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

impl FlatConfig for TaskSpec {
    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("disruption".into(), self.disruption.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("horizon".into(), self.episode_horizon.to_string()),
            ("success_radius".into(), self.success_radius.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::config::parse_value as p;
        match key {
            "disruption" => self.disruption = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            "horizon" => self.episode_horizon = p(key, value)?,
            "success_radius" => self.success_radius = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown task key `{key}`"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAction {
    pub delta: [f64; 2],
    /// `> 0` closes, `<= 0` opens.
    pub gripper: f64,
}

impl ContinuousAction {
    pub const ZERO: ContinuousAction = ContinuousAction {
        delta: [0.0, 0.0],
        gripper: 0.0,
    };

    pub fn new(dx: f64, dy: f64, gripper: f64) -> Self {
        Self {
            delta: [dx, dy],
            gripper,
        }
    }

    pub fn from_array(a: [f64; ACTION_DIMS]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(&self) -> [f64; ACTION_DIMS] {
        [self.delta[0], self.delta[1], self.gripper]
    }

    pub fn clamped(&self) -> Self {
        let c = |v: f64| v.clamp(-1.0, 1.0);
        Self::new(c(self.delta[0]), c(self.delta[1]), c(self.gripper))
    }

    pub fn l1_distance(&self, other: &ContinuousAction) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper_pos: [f64; 2],
    pub object_pos: [f64; 2],
    pub target_pos: [f64; 2],
    pub holding: bool,
    pub nuisance: [f64; 4],
    pub t: u32,
}

impl EnvState {
    /// Flat observation: gripper position, gripper-to-object offset in units
    /// of `OFFSET_UNIT`, object-to-target offset, the holding flag, then the
    /// nuisance dims.
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [
            self.gripper_pos[0],
            self.gripper_pos[1],
            (self.object_pos[0] - self.gripper_pos[0]) / OFFSET_UNIT,
            (self.object_pos[1] - self.gripper_pos[1]) / OFFSET_UNIT,
            self.target_pos[0] - self.object_pos[0],
            self.target_pos[1] - self.object_pos[1],
            if self.holding { 1.0 } else { 0.0 },
            self.nuisance[0],
            self.nuisance[1],
            self.nuisance[2],
            self.nuisance[3],
        ]
    }

    pub fn object_to_target(&self) -> f64 {
        dist(self.object_pos, self.target_pos)
    }

    pub fn is_success(&self, spec: &TaskSpec) -> bool {
        !self.holding && self.object_to_target() <= spec.success_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub done: bool,
    pub success: bool,
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn uniform_in(rng: &mut ChaCha8Rng, rect: [f64; 4]) -> [f64; 2] {
    [
        rng.random_range(rect[0]..rect[1]),
        rng.random_range(rect[2]..rect[3]),
    ]
}

/// Draws the initial state. The draw order is fixed for every disruption, so a
/// disruption only alters the fields it is meant to alter.
pub fn reset(spec: &TaskSpec) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gripper_pos = uniform_in(&mut rng, GRIPPER_RECT);
    let object_pos = uniform_in(&mut rng, OBJECT_RECT);
    let random_target = uniform_in(&mut rng, POSITION_RECT);
    let mut nuisance = [0.0; 4];
    for n in nuisance.iter_mut() {
        *n = rng.random_range(-NUISANCE_SPREAD..NUISANCE_SPREAD);
    }
    let target_pos = match spec.disruption {
        Disruption::Position => random_target,
        _ => NOMINAL_TARGET,
    };
    match spec.disruption {
        Disruption::Background => {
            nuisance[0] += BACKGROUND_OFFSET[0];
            nuisance[1] += BACKGROUND_OFFSET[1];
        }
        Disruption::Texture => {
            nuisance[2] += TEXTURE_OFFSET[0];
            nuisance[3] += TEXTURE_OFFSET[1];
        }
        _ => {}
    }
    EnvState {
        gripper_pos,
        object_pos,
        target_pos,
        holding: false,
        nuisance,
        t: 0,
    }
}

pub fn is_done(spec: &TaskSpec, state: &EnvState) -> bool {
    state.t >= spec.episode_horizon || state.is_success(spec)
}

#[allow(clippy::needless_range_loop)]
pub fn step(spec: &TaskSpec, state: &EnvState, action: &ContinuousAction) -> Result<StepOutcome> {
    if is_done(spec, state) {
        return Err(Error::EpisodeFinished);
    }
    let a = action.clamped();
    let mut next = *state;
    let mut moved = [0.0; 2];
    for k in 0..2 {
        let p = (state.gripper_pos[k] + MAX_STEP * a.delta[k]).clamp(0.0, 1.0);
        moved[k] = p - state.gripper_pos[k];
        next.gripper_pos[k] = p;
    }
    let closing = a.gripper > 0.0;
    if state.holding {
        for k in 0..2 {
            next.object_pos[k] = (state.object_pos[k] + moved[k]).clamp(0.0, 1.0);
        }
        next.holding = closing;
    } else {
        next.holding = closing && dist(next.gripper_pos, state.object_pos) <= GRASP_RADIUS;
    }
    next.t = state.t + 1;
    let success = next.is_success(spec);
    let done = success || next.t >= spec.episode_horizon;
    Ok(StepOutcome {
        state: next,
        done,
        success,
    })
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let cmd = |k: usize| {
        let raw = ((to[k] - from[k]) / EXPERT_SATURATION_DIST).clamp(-1.0, 1.0);
        // Rounding the magnitude up leaves no dead band short of the goal.
        raw.signum() * (raw.abs() * EXPERT_LEVELS).ceil() / EXPERT_LEVELS
    };
    [cmd(0), cmd(1)]
}

/// Scripted proportional expert: reach, close, carry, release.
pub fn expert_action(state: &EnvState, _spec: &TaskSpec) -> ContinuousAction {
    if state.holding {
        if state.object_to_target() <= EXPERT_PLACE_TOL {
            return ContinuousAction::new(0.0, 0.0, -1.0);
        }
        let d = toward(state.object_pos, state.target_pos);
        ContinuousAction::new(d[0], d[1], 1.0)
    } else {
        let d = toward(state.gripper_pos, state.object_pos);
        let grip = if dist(state.gripper_pos, state.object_pos) <= EXPERT_GRASP_TOL {
            1.0
        } else {
            -1.0
        };
        ContinuousAction::new(d[0], d[1], grip)
    }
}

/// Distance to the current subgoal: the object while empty-handed, the target while carrying.
pub fn subgoal_distance(state: &EnvState) -> f64 {
    if state.holding {
        state.object_to_target()
    } else {
        dist(state.gripper_pos, state.object_pos)
    }
}

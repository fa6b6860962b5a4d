//! Game scenarios and their TOML file form.
//!
//! A scenario file has the sections `[domain]`, `[[obstacles]]`, `[target]`,
//! `[players]`, `[sim]` and `[solver]`. Unknown keys are rejected and every
//! invariant is re-checked on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{GeometryError, ImplicitSet, Shape};
use crate::grid::{Axis, Grid, GridError};
use crate::hji::{HjiError, JointDynamics, SolverParams};

/// Bumped whenever the tube numerics change so stale caches are rejected.
pub const SCHEME_VERSION: &str = "lf1-euler-v2";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Players {
    pub attacker_speed: f64,
    pub defender_speed: f64,
    pub capture_radius: f64,
    pub attackers: Vec<[f64; 2]>,
    pub defenders: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Integer program allowing two attackers per defender.
    Mip,
    /// One-to-one maximum matching baseline.
    Matching,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mip" => Ok(Method::Mip),
            "matching" => Ok(Method::Matching),
            other => Err(format!("unknown method {other:?} (mip|matching)")),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_frame_stride() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub max_time: f64,
    pub method: Method,
    /// When a capture and an arrival happen in the same step, the capture
    /// wins.
    #[serde(default = "default_true")]
    pub capture_before_arrival: bool,
    /// Steps between exported animation frames.
    #[serde(default = "default_frame_stride")]
    pub frame_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub points_1v1: usize,
    pub points_2v1: usize,
    pub cfl: f64,
    pub epsilon: f64,
    pub checkpoint_stride: usize,
    pub max_steps: usize,
    /// Points per axis of the attackers' time-to-target grid.
    pub policy_points: usize,
    /// Threshold on the 1 vs. 1 value when it enters the 2 vs. 1 avoid set.
    #[serde(default)]
    pub tube_margin: f64,
}

impl SolverConfig {
    pub fn params(&self) -> SolverParams {
        SolverParams {
            cfl: self.cfl,
            epsilon: self.epsilon,
            horizon: f64::INFINITY,
            checkpoint_stride: self.checkpoint_stride,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub domain: Domain,
    pub target: Shape,
    pub players: Players,
    pub sim: SimConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub obstacles: Vec<Shape>,
}

/// The geometry, speeds and solver settings a tube depends on.
#[derive(Serialize)]
struct TubeKey<'a> {
    scheme: &'a str,
    domain: &'a Domain,
    obstacles: &'a [Shape],
    target: &'a Shape,
    attacker_speed: f64,
    defender_speed: f64,
    capture_radius: f64,
    points_1v1: usize,
    points_2v1: usize,
    cfl: f64,
    epsilon: f64,
    checkpoint_stride: usize,
    max_steps: usize,
    tube_margin: f64,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Scenario::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let d = &self.domain;
        for k in 0..2 {
            if !(d.lower[k].is_finite() && d.upper[k].is_finite() && d.lower[k] < d.upper[k]) {
                return bad(format!("domain axis {k} is degenerate"));
            }
        }
        self.target.validate()?;
        for o in &self.obstacles {
            o.validate()?;
        }
        let p = &self.players;
        for (name, v) in [
            ("attacker_speed", p.attacker_speed),
            ("defender_speed", p.defender_speed),
            ("capture_radius", p.capture_radius),
            ("dt", self.sim.dt),
            ("max_time", self.sim.max_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if p.attackers.is_empty() || p.defenders.is_empty() {
            return bad("at least one attacker and one defender are required".into());
        }
        for (role, list) in [("attacker", &p.attackers), ("defender", &p.defenders)] {
            for (i, x) in list.iter().enumerate() {
                if !self.in_free(*x) {
                    return bad(format!("{role} {i} at {x:?} is not in the free domain"));
                }
            }
        }
        if self.sim.frame_stride == 0 {
            return bad("frame_stride must be positive".into());
        }
        let s = &self.solver;
        if s.points_1v1 < 3 || s.points_2v1 < 3 || s.policy_points < 3 {
            return bad("grid resolutions must be at least 3".into());
        }
        if !s.tube_margin.is_finite() {
            return bad("tube_margin must be finite".into());
        }
        s.params()
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn in_domain(&self, x: [f64; 2]) -> bool {
        (0..2).all(|k| x[k] >= self.domain.lower[k] && x[k] <= self.domain.upper[k])
    }

    /// Signed distance to the obstacle union (`+inf` without obstacles).
    pub fn obstacle_distance(&self, x: [f64; 2]) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.sdf(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn in_obstacle(&self, x: [f64; 2]) -> bool {
        self.obstacle_distance(x) <= 0.0
    }

    pub fn in_free(&self, x: [f64; 2]) -> bool {
        self.in_domain(x) && !self.in_obstacle(x)
    }

    pub fn in_target(&self, x: [f64; 2]) -> bool {
        self.target.sdf(x) <= 0.0
    }

    pub fn target_set(&self) -> ImplicitSet {
        ImplicitSet::shape(self.target.clone())
    }

    pub fn obstacle_set(&self) -> ImplicitSet {
        let sets: Vec<ImplicitSet> = self
            .obstacles
            .iter()
            .cloned()
            .map(ImplicitSet::shape)
            .collect();
        ImplicitSet::union_all(&sets)
    }

    fn planar_axes(&self, points: usize) -> [Axis; 2] {
        [0, 1].map(|k| Axis {
            lower: self.domain.lower[k],
            upper: self.domain.upper[k],
            points,
        })
    }

    /// Joint grid for `players` planar players at `points` per axis.
    pub fn joint_grid(&self, players: usize, points: usize) -> Result<Grid, GridError> {
        let axes = self.planar_axes(points);
        Grid::new((0..players).flat_map(|_| axes).collect())
    }

    pub fn grid_1v1(&self) -> Result<Grid, GridError> {
        self.joint_grid(2, self.solver.points_1v1)
    }

    pub fn grid_2v1(&self) -> Result<Grid, GridError> {
        self.joint_grid(3, self.solver.points_2v1)
    }

    pub fn policy_grid(&self) -> Result<Grid, GridError> {
        self.joint_grid(1, self.solver.policy_points)
    }

    pub fn dynamics_1v1(&self) -> Result<JointDynamics, HjiError> {
        JointDynamics::one_vs_one(self.players.attacker_speed, self.players.defender_speed)
    }

    pub fn dynamics_2v1(&self) -> Result<JointDynamics, HjiError> {
        JointDynamics::two_vs_one(self.players.attacker_speed, self.players.defender_speed)
    }

    /// Stable digest binding tubes to this scenario's geometry, speeds,
    /// capture radius and solver settings. Player positions and simulation
    /// settings are excluded.
    pub fn tube_hash(&self) -> String {
        let key = TubeKey {
            scheme: SCHEME_VERSION,
            domain: &self.domain,
            obstacles: &self.obstacles,
            target: &self.target,
            attacker_speed: self.players.attacker_speed,
            defender_speed: self.players.defender_speed,
            capture_radius: self.players.capture_radius,
            points_1v1: self.solver.points_1v1,
            points_2v1: self.solver.points_2v1,
            cfl: self.solver.cfl,
            epsilon: self.solver.epsilon,
            checkpoint_stride: self.solver.checkpoint_stride,
            max_steps: self.solver.max_steps,
            tube_margin: self.solver.tube_margin,
        };
        let bytes = serde_json::to_vec(&key).expect("tube key serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The shipped default environment: the square `[-1, 1]^2`, two wall
    /// segments on `x in [-0.1, 0.1]` leaving a gap on `y in (-0.3, 0.3)`, and
    /// a rectangular target right of the gap. The layout is an approximation
    /// read off plotted results, not measured coordinates.
    pub fn default_environment() -> Scenario {
        Scenario {
            domain: Domain {
                lower: [-1.0, -1.0],
                upper: [1.0, 1.0],
            },
            obstacles: vec![
                Shape::Rectangle {
                    min: [-0.1, 0.3],
                    max: [0.1, 0.6],
                },
                Shape::Rectangle {
                    min: [-0.1, -1.0],
                    max: [0.1, -0.3],
                },
            ],
            target: Shape::Rectangle {
                min: [0.6, 0.1],
                max: [0.8, 0.3],
            },
            players: Players {
                attacker_speed: 1.0,
                defender_speed: 1.5,
                capture_radius: 0.1,
                attackers: vec![[-0.5, 0.0], [0.0, 0.8]],
                defenders: vec![[0.3, -0.3]],
            },
            sim: SimConfig {
                dt: 0.005,
                max_time: 5.0,
                method: Method::Mip,
                capture_before_arrival: true,
                frame_stride: 8,
            },
            solver: SolverConfig {
                points_1v1: 45,
                points_2v1: 25,
                cfl: 0.5,
                epsilon: 1e-3,
                checkpoint_stride: 20,
                max_steps: 20_000,
                policy_points: 201,
                tube_margin: 0.0,
            },
        }
    }
}

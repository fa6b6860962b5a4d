//! The multi-agent game loop: per step, rebuild the assignment from tube
//! membership, steer defenders with the tube controllers and attackers
//! along shortest paths, integrate, then adjudicate captures and arrivals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{
    build_instance, max_matching_baseline, solve_mip, AssignmentError, AssignmentResult,
};
use crate::eikonal::{attacker_policy, eikonal_field, EikonalError, TimeToTarget};
use crate::games::{defender_control_1v1, defender_control_2v1, GameError, GameTubes};
use crate::grid::GridError;
use crate::scenario::{Method, Scenario};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Eikonal(#[from] EikonalError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Captured,
    Arrived,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Captured {
        time: f64,
        attacker: usize,
        defender: usize,
    },
    Arrived {
        time: f64,
        attacker: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub time: f64,
    pub step: usize,
    pub attackers: Vec<[f64; 2]>,
    pub defenders: Vec<[f64; 2]>,
    pub status: Vec<Status>,
    /// Assignment used for the motion that led to this state.
    pub assignment: AssignmentResult,
    pub events: Vec<Event>,
}

impl SimState {
    pub fn active(&self) -> Vec<bool> {
        self.status.iter().map(|s| *s == Status::Active).collect()
    }

    pub fn count(&self, status: Status) -> usize {
        self.status.iter().filter(|s| **s == status).count()
    }

    pub fn finished(&self) -> bool {
        self.count(Status::Active) == 0
    }
}

/// Worst observed guarantee margin for one assignment kind: the tube value
/// after a step, measured against the cell spread `delta` at that state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub checks: usize,
    /// Smallest `value + delta` seen; negative means a violation.
    pub worst_slack: Option<f64>,
    pub violations: usize,
}

impl MarginStats {
    fn record(&mut self, value: f64, delta: f64) {
        self.checks += 1;
        let slack = value + delta;
        self.worst_slack = Some(self.worst_slack.map_or(slack, |w| w.min(slack)));
        if slack < 0.0 {
            self.violations += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub single: MarginStats,
    pub pair: MarginStats,
    /// Steps in which some defender used the degenerate-gradient fallback.
    pub fallback_steps: usize,
    /// Motions shortened or deflected by an obstacle.
    pub clamped_moves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub attackers: usize,
    pub defenders: usize,
    pub captured: usize,
    pub arrived: usize,
    pub active: usize,
    /// Horizon reached with attackers still active.
    pub timed_out: bool,
    pub final_time: f64,
    pub steps: usize,
    pub capture_times: Vec<Option<f64>>,
    pub captured_by: Vec<Option<usize>>,
    pub arrival_times: Vec<Option<f64>>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// State at t = 0 followed by one state per step.
    pub states: Vec<SimState>,
    pub summary: Summary,
}

/// Truncates the motion `from -> to` at the first obstacle contact and
/// slides the remainder along the contact tangent. Returns the end point
/// and whether the motion was altered.
pub fn clamp_motion(scenario: &Scenario, from: [f64; 2], to: [f64; 2]) -> ([f64; 2], bool) {
    let to = clamp_domain(scenario, to);
    let hits = |p: [f64; 2], q: [f64; 2]| scenario.obstacles.iter().any(|o| o.segment_intersects(p, q));
    if !hits(from, to) {
        return (to, false);
    }
    let d = [to[0] - from[0], to[1] - from[1]];
    let at = |t: f64| [from[0] + t * d[0], from[1] + t * d[1]];
    let (mut lo, mut hi) = (0.0, 1.0);
    if hits(from, from) {
        return (from, true);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if hits(from, at(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let contact = at(lo);
    let nearest = scenario
        .obstacles
        .iter()
        .min_by(|a, b| a.sdf(contact).total_cmp(&b.sdf(contact)))
        .expect("a hit implies an obstacle");
    let n = nearest.sdf_gradient(contact);
    let rest = [(1.0 - lo) * d[0], (1.0 - lo) * d[1]];
    let into = rest[0] * n[0] + rest[1] * n[1];
    let slide = [rest[0] - into * n[0], rest[1] - into * n[1]];
    let end = clamp_domain(scenario, [contact[0] + slide[0], contact[1] + slide[1]]);
    if hits(contact, end) {
        (contact, true)
    } else {
        (end, true)
    }
}

fn clamp_domain(scenario: &Scenario, x: [f64; 2]) -> [f64; 2] {
    let lo = scenario.domain.lower;
    let hi = scenario.domain.upper;
    [x[0].clamp(lo[0], hi[0]), x[1].clamp(lo[1], hi[1])]
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub struct Simulator<'a> {
    scenario: &'a Scenario,
    tubes: &'a GameTubes,
    policy: TimeToTarget,
    method: Method,
}

impl<'a> Simulator<'a> {
    /// Fails when the tubes were built for a different scenario.
    pub fn new(scenario: &'a Scenario, tubes: &'a GameTubes) -> Result<Self, EngineError> {
        tubes.check_scenario(scenario)?;
        Self::unchecked(scenario, tubes)
    }

    /// Skips the scenario-hash check.
    pub fn unchecked(scenario: &'a Scenario, tubes: &'a GameTubes) -> Result<Self, EngineError> {
        let policy = eikonal_field(scenario, &scenario.policy_grid()?)?;
        Ok(Simulator {
            scenario,
            tubes,
            policy,
            method: scenario.sim.method,
        })
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn policy(&self) -> &TimeToTarget {
        &self.policy
    }

    /// Initial positions with captures and arrivals at t = 0 already
    /// adjudicated.
    pub fn initial_state(&self) -> SimState {
        let p = &self.scenario.players;
        let mut state = SimState {
            time: 0.0,
            step: 0,
            attackers: p.attackers.clone(),
            defenders: p.defenders.clone(),
            status: vec![Status::Active; p.attackers.len()],
            assignment: AssignmentResult::empty(p.attackers.len(), p.defenders.len()),
            events: Vec::new(),
        };
        self.adjudicate(&mut state);
        state
    }

    fn adjudicate(&self, state: &mut SimState) {
        let rc = self.scenario.players.capture_radius;
        let capture_first = self.scenario.sim.capture_before_arrival;
        for i in 0..state.attackers.len() {
            if state.status[i] != Status::Active {
                continue;
            }
            let a = state.attackers[i];
            let captor = state
                .defenders
                .iter()
                .enumerate()
                .map(|(j, d)| (j, distance(a, *d)))
                .filter(|&(_, dist)| dist <= rc)
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(j, _)| j);
            let arrived = self.scenario.in_target(a);
            let capture = |state: &mut SimState, j: usize| {
                state.status[i] = Status::Captured;
                state.events.push(Event::Captured {
                    time: state.time,
                    attacker: i,
                    defender: j,
                });
            };
            let arrive = |state: &mut SimState| {
                state.status[i] = Status::Arrived;
                state.events.push(Event::Arrived {
                    time: state.time,
                    attacker: i,
                });
            };
            match (captor, arrived, capture_first) {
                (Some(j), _, true) | (Some(j), false, false) => capture(state, j),
                (_, true, _) => arrive(state),
                (None, false, _) => {}
            }
        }
    }

    pub fn assign(&self, state: &SimState) -> Result<AssignmentResult, EngineError> {
        let inst = build_instance(self.tubes, &state.attackers, &state.defenders, &state.active())?;
        Ok(match self.method {
            Method::Mip => solve_mip(&inst),
            Method::Matching => max_matching_baseline(&inst),
        })
    }

    /// Advances one step. `diagnostics` accumulates guarantee margins and
    /// motion statistics.
    pub fn step(&self, state: &SimState, diagnostics: &mut Diagnostics) -> Result<SimState, EngineError> {
        if state.finished() {
            return Ok(state.clone());
        }
        let sc = self.scenario;
        let dt = sc.sim.dt;
        let assignment = self.assign(state)?;
        let mut next = state.clone();
        next.assignment = assignment.clone();
        next.step += 1;
        next.time = (state.step + 1) as f64 * dt;

        let mut fallback = false;
        for (j, d) in state.defenders.iter().enumerate() {
            let assigned = assignment.assigned_to(j);
            let steer = match assigned[..] {
                [k, l] => Some(defender_control_2v1(
                    &self.tubes.tube21,
                    state.attackers[k],
                    state.attackers[l],
                    *d,
                )),
                [k] => Some(defender_control_1v1(&self.tubes.tube11, state.attackers[k], *d)),
                _ => None,
            };
            if let Some(s) = steer {
                fallback |= s.fallback;
                let v = sc.players.defender_speed * dt;
                let to = [d[0] + v * s.direction[0], d[1] + v * s.direction[1]];
                let (end, clamped) = clamp_motion(sc, *d, to);
                diagnostics.clamped_moves += clamped as usize;
                next.defenders[j] = end;
            }
        }
        if fallback {
            diagnostics.fallback_steps += 1;
        }
        for (i, a) in state.attackers.iter().enumerate() {
            if state.status[i] != Status::Active {
                continue;
            }
            if let Some(u) = attacker_policy(&self.policy, *a) {
                let v = sc.players.attacker_speed * dt;
                let to = [a[0] + v * u[0], a[1] + v * u[1]];
                let (end, clamped) = clamp_motion(sc, *a, to);
                diagnostics.clamped_moves += clamped as usize;
                next.attackers[i] = end;
            }
        }

        // Guarantee margins after the motion, before removals.
        for j in 0..next.defenders.len() {
            let d = next.defenders[j];
            match assignment.assigned_to(j)[..] {
                [k, l] => {
                    let (a, b) = (next.attackers[k], next.attackers[l]);
                    let x = [a[0], a[1], b[0], b[1], d[0], d[1]];
                    let t = &self.tubes.tube21;
                    diagnostics.pair.record(t.interpolate(&x), t.cell_spread(&x));
                }
                [k] => {
                    let a = next.attackers[k];
                    let x = [a[0], a[1], d[0], d[1]];
                    let t = &self.tubes.tube11;
                    diagnostics.single.record(t.interpolate(&x), t.cell_spread(&x));
                }
                _ => {}
            }
        }
        self.adjudicate(&mut next);
        Ok(next)
    }

    pub fn run(&self) -> Result<Trajectory, EngineError> {
        let mut diagnostics = Diagnostics {
            single: MarginStats::default(),
            pair: MarginStats::default(),
            fallback_steps: 0,
            clamped_moves: 0,
        };
        let mut states = vec![self.initial_state()];
        let max_steps = (self.scenario.sim.max_time / self.scenario.sim.dt).round() as usize;
        loop {
            let last = states.last().expect("initial state");
            if last.finished() || last.step >= max_steps {
                break;
            }
            let next = self.step(last, &mut diagnostics)?;
            states.push(next);
        }
        let summary = self.summarize(&states, diagnostics);
        Ok(Trajectory { states, summary })
    }

    fn summarize(&self, states: &[SimState], diagnostics: Diagnostics) -> Summary {
        let last = states.last().expect("initial state");
        let m = last.attackers.len();
        let mut capture_times = vec![None; m];
        let mut captured_by = vec![None; m];
        let mut arrival_times = vec![None; m];
        for e in &last.events {
            match *e {
                Event::Captured {
                    time,
                    attacker,
                    defender,
                } => {
                    capture_times[attacker] = Some(time);
                    captured_by[attacker] = Some(defender);
                }
                Event::Arrived { time, attacker } => arrival_times[attacker] = Some(time),
            }
        }
        Summary {
            method: self.method,
            attackers: m,
            defenders: last.defenders.len(),
            captured: last.count(Status::Captured),
            arrived: last.count(Status::Arrived),
            active: last.count(Status::Active),
            timed_out: !last.finished(),
            final_time: last.time,
            steps: last.step,
            capture_times,
            captured_by,
            arrival_times,
            diagnostics,
        }
    }
}

/// One step from `state` under the scenario's method.
pub fn step_game(
    state: &SimState,
    scenario: &Scenario,
    tubes: &GameTubes,
) -> Result<SimState, EngineError> {
    let sim = Simulator::new(scenario, tubes)?;
    let mut diagnostics = Diagnostics {
        single: MarginStats::default(),
        pair: MarginStats::default(),
        fallback_steps: 0,
        clamped_moves: 0,
    };
    sim.step(state, &mut diagnostics)
}

pub fn run_game(scenario: &Scenario, tubes: &GameTubes) -> Result<Trajectory, EngineError> {
    Simulator::new(scenario, tubes)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;
    use crate::grid::Field;

    /// Tubes from closed-form stand-ins on small grids: the attacker wins
    /// one-on-one when strictly closer (in time) to the target.
    fn toy_tubes(s: &Scenario) -> GameTubes {
        let va = s.players.attacker_speed;
        let vd = s.players.defender_speed;
        let t = s.target.clone();
        let adv = move |a: [f64; 2], d: [f64; 2]| t.sdf(d).max(0.0) / vd - t.sdf(a).max(0.0) / va;
        let g4 = s.joint_grid(2, 15).unwrap();
        let phi11 = Field::<f64>::from_fn(g4, |x| -adv([x[0], x[1]], [x[2], x[3]]) + 0.2)
            .unwrap()
            .convert();
        let g6 = s.joint_grid(3, 7).unwrap();
        let phi21 = Field::<f64>::from_fn(g6, |x| {
            let d = [x[4], x[5]];
            let a1 = -adv([x[0], x[1]], d) + 0.2;
            let a2 = -adv([x[2], x[3]], d) + 0.2;
            a1.min(a2) - 0.1
        })
        .unwrap()
        .convert();
        GameTubes::new(phi11, phi21, s.tube_hash()).unwrap()
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let s = Scenario::default_environment();
        let mut tubes = toy_tubes(&s);
        tubes.hash = "0".repeat(64);
        assert!(matches!(Simulator::new(&s, &tubes), Err(EngineError::Game(_))));
        assert!(Simulator::unchecked(&s, &tubes).is_ok());
    }

    #[test]
    fn attackers_in_target_arrive_at_time_zero() {
        let mut s = Scenario::default_environment();
        s.players.attackers = vec![[0.7, 0.2], [0.65, 0.15]];
        let tubes = toy_tubes(&s);
        let traj = run_game(&s, &tubes).unwrap();
        assert_eq!(traj.summary.arrived, 2);
        assert_eq!(traj.summary.arrival_times, vec![Some(0.0), Some(0.0)]);
        assert_eq!(traj.states.len(), 1);
    }

    #[test]
    fn capture_is_adjudicated_before_arrival() {
        let mut s = Scenario::default_environment();
        s.players.attackers = vec![[0.7, 0.2]];
        s.players.defenders = vec![[0.72, 0.2]];
        let tubes = toy_tubes(&s);
        let sim = Simulator::new(&s, &tubes).unwrap();
        assert_eq!(sim.initial_state().status, vec![Status::Captured]);
        s.sim.capture_before_arrival = false;
        let sim = Simulator::new(&s, &tubes).unwrap();
        assert_eq!(sim.initial_state().status, vec![Status::Arrived]);
    }

    #[test]
    fn finished_state_is_a_fixed_point() {
        let mut s = Scenario::default_environment();
        s.players.attackers = vec![[0.7, 0.2]];
        let tubes = toy_tubes(&s);
        let sim = Simulator::new(&s, &tubes).unwrap();
        let st = sim.initial_state();
        let mut diag = Diagnostics {
            single: MarginStats::default(),
            pair: MarginStats::default(),
            fallback_steps: 0,
            clamped_moves: 0,
        };
        assert_eq!(sim.step(&st, &mut diag).unwrap(), st);
    }

    #[test]
    fn runs_conserve_counts_and_are_deterministic() {
        let s = Scenario::default_environment();
        let tubes = toy_tubes(&s);
        let a = run_game(&s, &tubes).unwrap();
        let b = run_game(&s, &tubes).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.summary, b.summary);
        let m = s.players.attackers.len();
        let mut prev: Option<&SimState> = None;
        for st in &a.states {
            assert_eq!(
                st.count(Status::Active) + st.count(Status::Captured) + st.count(Status::Arrived),
                m
            );
            for d in &st.defenders {
                assert!(!s.in_obstacle(*d));
            }
            for (i, x) in st.attackers.iter().enumerate() {
                if st.status[i] == Status::Active {
                    assert!(s.in_free(*x));
                }
            }
            if let Some(p) = prev {
                assert!(st.time > p.time);
                for i in 0..m {
                    if p.status[i] != Status::Active {
                        assert_eq!(st.status[i], p.status[i]);
                    }
                }
                for (x, y) in p.attackers.iter().zip(&st.attackers) {
                    assert!(s.obstacles.iter().all(|o| !o.segment_intersects(*x, *y)));
                }
            }
            prev = Some(st);
        }
    }

    #[test]
    fn timeout_is_reported() {
        let mut s = Scenario::default_environment();
        s.sim.max_time = 0.05;
        let tubes = toy_tubes(&s);
        let t = run_game(&s, &tubes).unwrap();
        assert!(t.summary.timed_out);
        assert_eq!(t.summary.steps, 10);
        assert_eq!(t.summary.active, 2);
    }

    #[test]
    fn unassigned_defenders_hold_position() {
        let mut s = Scenario::default_environment();
        s.players.defenders = vec![[0.3, -0.3], [-0.8, -0.8]];
        let tubes = toy_tubes(&s);
        let sim = Simulator::new(&s, &tubes).unwrap().with_method(Method::Matching);
        let st = sim.initial_state();
        let mut diag = Diagnostics {
            single: MarginStats::default(),
            pair: MarginStats::default(),
            fallback_steps: 0,
            clamped_moves: 0,
        };
        let next = sim.step(&st, &mut diag).unwrap();
        for j in 0..2 {
            if next.assignment.assigned_to(j).is_empty() {
                assert_eq!(next.defenders[j], st.defenders[j]);
            }
        }
    }

    #[test]
    fn clamping_truncates_and_slides() {
        let mut s = Scenario::default_environment();
        s.obstacles = vec![Shape::Rectangle {
            min: [0.0, -1.0],
            max: [0.2, 1.0],
        }];
        // Straight into the wall: stops at the face.
        let (end, clamped) = clamp_motion(&s, [-0.1, 0.0], [0.1, 0.0]);
        assert!(clamped);
        assert!(end[0] < 0.0 && end[0] > -1e-9 && end[1].abs() < 1e-12);
        // Oblique: slides along the face.
        let (end, clamped) = clamp_motion(&s, [-0.05, 0.0], [0.05, 0.1]);
        assert!(clamped);
        assert!(end[0] < 0.0 && (end[1] - 0.1).abs() < 1e-9, "{end:?}");
        assert!(!s.obstacles[0].segment_intersects([-0.05, 0.0], end));
        // Free motion is untouched; the domain edge clamps.
        assert_eq!(clamp_motion(&s, [-0.5, 0.0], [-0.4, 0.0]), ([-0.4, 0.0], false));
        assert_eq!(clamp_motion(&s, [-0.99, 0.0], [-1.1, 0.0]).0, [-1.0, 0.0]);
    }
}

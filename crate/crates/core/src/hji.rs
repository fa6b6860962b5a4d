//! Reach-avoid tubes from the Hamilton-Jacobi-Isaacs variational inequality.
//!
//! The value function is marched backward in time with a first-order
//! Lax-Friedrichs scheme and forward Euler steps, and after every step it is
//! clamped between the avoid function `g` and the target function `l`:
//!
//! ```text
//! phi' = max(min(phi + dt * H_lf(phi), l), g)
//! ```
//!
//! Starting from `phi_0 = max(l, g)` the iterates are pointwise
//! non-increasing, so the sub-zero region (the tube) only ever grows. The
//! infinite-horizon tube is the fixed point.
//!
//! All players are planar single integrators, so the Hamiltonian
//! `min_u max_d p . f` has the closed form
//! `-v_A * sum ||p_attacker|| + v_D * sum ||p_defender||`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Field, Grid, GridError, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum HjiError {
    #[error("time step {dt} exceeds the stability bound {bound}")]
    CflViolation { dt: f64, bound: f64 },
    #[error("dynamics do not cover the grid: {0}")]
    BadDynamics(String),
    #[error("all player speeds are zero")]
    NoMotion,
    #[error("solver produced a non-finite value at step {step}")]
    NonFinite { step: usize },
    #[error("invalid solver parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Minimizes the value (wants into the tube).
    Attacker,
    /// Maximizes the value.
    Defender,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Player {
    pub axes: (usize, usize),
    pub speed: f64,
    pub role: Role,
}

/// Planar single-integrator players whose position axes partition the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDynamics {
    players: Vec<Player>,
    dims: usize,
}

impl JointDynamics {
    pub fn new(players: Vec<Player>) -> Result<Self, HjiError> {
        let dims = 2 * players.len();
        let mut seen = vec![false; dims];
        for p in &players {
            if !(p.speed >= 0.0) || !p.speed.is_finite() {
                return Err(HjiError::BadDynamics(format!("speed {} is invalid", p.speed)));
            }
            for a in [p.axes.0, p.axes.1] {
                if a >= dims || seen[a] {
                    return Err(HjiError::BadDynamics(format!(
                        "axis {a} is out of range or used twice"
                    )));
                }
                seen[a] = true;
            }
        }
        if players.is_empty() {
            return Err(HjiError::BadDynamics("no players".into()));
        }
        Ok(JointDynamics { players, dims })
    }

    /// Attacker on axes 0-1 and defender on axes 2-3.
    pub fn one_vs_one(attacker_speed: f64, defender_speed: f64) -> Result<Self, HjiError> {
        JointDynamics::new(vec![
            Player {
                axes: (0, 1),
                speed: attacker_speed,
                role: Role::Attacker,
            },
            Player {
                axes: (2, 3),
                speed: defender_speed,
                role: Role::Defender,
            },
        ])
    }

    /// Attackers on axes 0-1 and 2-3, defender on axes 4-5.
    pub fn two_vs_one(attacker_speed: f64, defender_speed: f64) -> Result<Self, HjiError> {
        JointDynamics::new(vec![
            Player {
                axes: (0, 1),
                speed: attacker_speed,
                role: Role::Attacker,
            },
            Player {
                axes: (2, 3),
                speed: attacker_speed,
                role: Role::Attacker,
            },
            Player {
                axes: (4, 5),
                speed: defender_speed,
                role: Role::Defender,
            },
        ])
    }

    pub fn players(&self) -> &[Player] {
        &self.players
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Speed of the player owning each axis; these are also the exact bounds
    /// on `|dH/dp_axis|` used as dissipation coefficients.
    pub fn axis_speeds(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.dims];
        for p in &self.players {
            s[p.axes.0] = p.speed;
            s[p.axes.1] = p.speed;
        }
        s
    }

    /// Largest stable time step on `grid` for CFL number `cfl`.
    pub fn stable_dt(&self, grid: &Grid, cfl: f64) -> Result<f64, HjiError> {
        self.check_grid(grid)?;
        let rate: f64 = self
            .axis_speeds()
            .iter()
            .enumerate()
            .map(|(k, a)| a / grid.spacing(k))
            .sum();
        if rate == 0.0 {
            return Err(HjiError::NoMotion);
        }
        Ok(cfl / rate)
    }

    fn check_grid(&self, grid: &Grid) -> Result<(), HjiError> {
        if grid.dims() != self.dims {
            return Err(HjiError::BadDynamics(format!(
                "{}-D dynamics on a {}-D grid",
                self.dims,
                grid.dims()
            )));
        }
        Ok(())
    }
}

/// `min_u max_d p . f(x, u, d)` for single integrators with unit-disc
/// controls.
pub fn hamiltonian(p: &[f64], dynamics: &JointDynamics) -> f64 {
    dynamics
        .players
        .iter()
        .map(|pl| {
            let n = (p[pl.axes.0] * p[pl.axes.0] + p[pl.axes.1] * p[pl.axes.1]).sqrt();
            match pl.role {
                Role::Attacker => -pl.speed * n,
                Role::Defender => pl.speed * n,
            }
        })
        .sum()
}

/// Source of the target function `l` (tube contains `l <= 0`) and avoid
/// function `g` (states with `g > 0` are never in the tube).
pub trait Constraints: Sync {
    fn grid(&self) -> &Grid;

    /// Writes `l` and `g` for the `target.len()` consecutive nodes starting at
    /// flat index `start`. Runs never cross a row of the last axis.
    fn fill(&self, start: usize, target: &mut [f64], avoid: &mut [f64]);

    /// Two players whose exchange leaves `l` and `g` unchanged. The solver
    /// then computes one state of each exchanged pair and mirrors it.
    fn exchange(&self) -> Option<Exchange> {
        None
    }
}

/// Axis pairs of two interchangeable players.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exchange {
    pub first: (usize, usize),
    pub second: (usize, usize),
}

/// Constraints held as two dense fields.
pub struct DenseConstraints<'a, T: Scalar = f64> {
    target: &'a Field<T>,
    avoid: &'a Field<T>,
}

impl<'a, T: Scalar> DenseConstraints<'a, T> {
    pub fn new(target: &'a Field<T>, avoid: &'a Field<T>) -> Result<Self, HjiError> {
        if target.grid() != avoid.grid() {
            return Err(GridError::GridMismatch.into());
        }
        Ok(DenseConstraints { target, avoid })
    }
}

impl<T: Scalar> Constraints for DenseConstraints<'_, T> {
    fn grid(&self) -> &Grid {
        self.target.grid()
    }

    fn fill(&self, start: usize, target: &mut [f64], avoid: &mut [f64]) {
        let n = target.len();
        for (o, v) in target.iter_mut().zip(&self.target.values()[start..start + n]) {
            *o = v.to_f64();
        }
        for (o, v) in avoid.iter_mut().zip(&self.avoid.values()[start..start + n]) {
            *o = v.to_f64();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub cfl: f64,
    /// Convergence threshold on the max-norm change per unit pseudo-time.
    pub epsilon: f64,
    /// Stop after this much pseudo-time; infinite for the limit tube.
    pub horizon: f64,
    pub checkpoint_stride: usize,
    pub max_steps: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            cfl: 0.5,
            epsilon: 1e-3,
            horizon: f64::INFINITY,
            checkpoint_stride: 20,
            max_steps: 20_000,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), HjiError> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(HjiError::BadParams(format!("cfl {} not in (0, 1]", self.cfl)));
        }
        if !(self.epsilon > 0.0) {
            return Err(HjiError::BadParams("epsilon must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(HjiError::BadParams("horizon must be positive".into()));
        }
        if self.checkpoint_stride == 0 || self.max_steps == 0 {
            return Err(HjiError::BadParams("stride and step budget must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step summary.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Largest decrease of any node value during the step.
    pub max_change: f64,
    /// Nodes with value `<= 0` after the step.
    pub inside: usize,
    pub non_finite: usize,
}

impl StepStats {
    fn merge(self, o: StepStats) -> StepStats {
        StepStats {
            max_change: self.max_change.max(o.max_change),
            inside: self.inside + o.inside,
            non_finite: self.non_finite + o.non_finite,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    /// The requested finite horizon was reached.
    Horizon,
    /// Step budget exhausted before convergence.
    StepBudget,
}

pub struct Checkpoint<'a, T> {
    pub step: usize,
    pub time: f64,
    /// Max change per unit time over the last stride.
    pub rate: f64,
    pub inside_fraction: f64,
    pub values: &'a [T],
}

#[derive(Debug, Clone)]
pub struct TubeSolution<T: Scalar> {
    pub phi: Field<T>,
    pub status: Termination,
    pub steps: usize,
    pub time: f64,
    pub dt: f64,
    pub final_rate: f64,
}

impl<T: Scalar> TubeSolution<T> {
    pub fn converged(&self) -> bool {
        self.status == Termination::Converged
    }
}

struct Stencil {
    inv_h: Vec<f64>,
    alpha: Vec<f64>,
    /// (axis x, axis y, signed speed) per player.
    blocks: Vec<(usize, usize, f64)>,
    exchange: Option<Exchange>,
}

impl Stencil {
    fn new(grid: &Grid, dynamics: &JointDynamics, exchange: Option<Exchange>) -> Result<Self, HjiError> {
        if let Some(ex) = exchange {
            check_exchange(grid, dynamics, ex)?;
        }
        Ok(Stencil {
            exchange,
            inv_h: (0..grid.dims()).map(|k| 1.0 / grid.spacing(k)).collect(),
            alpha: dynamics.axis_speeds(),
            blocks: dynamics
                .players()
                .iter()
                .map(|p| {
                    let s = match p.role {
                        Role::Attacker => -p.speed,
                        Role::Defender => p.speed,
                    };
                    (p.axes.0, p.axes.1, s)
                })
                .collect(),
        })
    }
}

fn check_exchange(grid: &Grid, dynamics: &JointDynamics, ex: Exchange) -> Result<(), HjiError> {
    let find = |axes: (usize, usize)| dynamics.players().iter().find(|p| p.axes == axes);
    let (Some(a), Some(b)) = (find(ex.first), find(ex.second)) else {
        return Err(HjiError::BadDynamics(format!(
            "exchange {:?} does not name two players",
            ex
        )));
    };
    let last = grid.dims() - 1;
    let same_axes = grid.axis(ex.first.0) == grid.axis(ex.second.0)
        && grid.axis(ex.first.1) == grid.axis(ex.second.1);
    let touches_last = [ex.first.0, ex.first.1, ex.second.0, ex.second.1].contains(&last);
    if a.speed != b.speed || a.role != b.role || !same_axes || touches_last || ex.first == ex.second {
        return Err(HjiError::BadDynamics(format!(
            "players on axes {:?} and {:?} are not interchangeable",
            ex.first, ex.second
        )));
    }
    Ok(())
}

/// Copies every contiguous block whose exchanged twin precedes it from that
/// twin. Blocks span the axes after the last exchanged one.
fn mirror_blocks<T: Scalar>(values: &mut [T], grid: &Grid, ex: Exchange) {
    let top = ex.first.0.max(ex.first.1).max(ex.second.0).max(ex.second.1);
    let strides = grid.strides();
    let block = strides[top];
    let mut index = vec![0usize; top + 1];
    let mut twin = vec![0usize; top + 1];
    for b in 0..values.len() / block {
        let mut rem = b * block;
        for k in 0..=top {
            index[k] = rem / strides[k];
            rem %= strides[k];
        }
        twin.copy_from_slice(&index);
        twin.swap(ex.first.0, ex.second.0);
        twin.swap(ex.first.1, ex.second.1);
        let t = (0..=top).map(|k| twin[k] * strides[k]).sum::<usize>() / block;
        if t < b {
            values.copy_within(t * block..(t + 1) * block, b * block);
        }
    }
}

struct RowBuffers {
    target: Vec<f64>,
    avoid: Vec<f64>,
    centre: Vec<f64>,
    /// Central gradient estimates, one row per axis.
    grad: Vec<f64>,
    /// Hamiltonian plus dissipation.
    acc: Vec<f64>,
}

impl RowBuffers {
    fn new(row_len: usize, dims: usize) -> Self {
        RowBuffers {
            target: vec![0.0; row_len],
            avoid: vec![0.0; row_len],
            centre: vec![0.0; row_len],
            grad: vec![0.0; row_len * dims],
            acc: vec![0.0; row_len],
        }
    }
}

// Plain comparisons; inputs are finite and non-finite candidates are
// counted separately.
#[inline(always)]
fn fmin(a: f64, b: f64) -> f64 {
    if a < b {
        a
    } else {
        b
    }
}

#[inline(always)]
fn fmax(a: f64, b: f64) -> f64 {
    if a > b {
        a
    } else {
        b
    }
}

/// One clamped Lax-Friedrichs step over the whole grid.
fn step_into<T: Scalar, C: Constraints + ?Sized, const D: usize>(
    phi: &[T],
    next: &mut [T],
    cons: &C,
    stencil: &Stencil,
    dt: f64,
) -> StepStats {
    let grid = cons.grid();
    let strides = grid.strides();
    let last = D - 1;
    let row_len = grid.axis(last).points;
    let mut inv_h = [0.0; D];
    let mut alpha = [0.0; D];
    let mut stride = [0usize; D];
    let mut points = [0usize; D];
    for k in 0..D {
        inv_h[k] = stencil.inv_h[k];
        alpha[k] = stencil.alpha[k];
        stride[k] = strides[k];
        points[k] = grid.axis(k).points;
    }
    let blocks = &stencil.blocks;
    let mirror_of = |index: &[usize; D]| -> usize {
        let ex = stencil.exchange.expect("mirror needs an exchange");
        let mut m = *index;
        m.swap(ex.first.0, ex.second.0);
        m.swap(ex.first.1, ex.second.1);
        (0..last).map(|k| m[k] * stride[k]).sum::<usize>() / row_len
    };

    let stats = next
        .par_chunks_mut(row_len)
        .enumerate()
        .map_init(
            || RowBuffers::new(row_len, D),
            |bufs, (row, out)| {
                let start = row * row_len;
                // Boundary status of the row along every axis but the last.
                let mut has_lo = [true; D];
                let mut has_hi = [true; D];
                let mut index = [0usize; D];
                let mut rem = start;
                for k in 0..last {
                    let i = rem / stride[k];
                    rem %= stride[k];
                    index[k] = i;
                    has_lo[k] = i > 0;
                    has_hi[k] = i + 1 < points[k];
                }
                // Rows with an exchanged twin earlier in memory are copied
                // from it afterwards; self-mirrored rows count once.
                let weight = match stencil.exchange {
                    None => 1,
                    Some(_) => match mirror_of(&index).cmp(&row) {
                        std::cmp::Ordering::Less => return StepStats::default(),
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Greater => 2,
                    },
                };
                let own = &phi[start..start + row_len];
                let RowBuffers {
                    target: lbuf,
                    avoid: gbuf,
                    centre,
                    grad,
                    acc,
                } = bufs;
                cons.fill(start, lbuf, gbuf);
                let n = row_len;
                let (centre, acc) = (&mut centre[..n], &mut acc[..n]);
                for (c, v) in centre.iter_mut().zip(own) {
                    *c = v.to_f64();
                }
                acc.fill(0.0);
                let centre = &*centre;
                for k in 0..last {
                    let s = stride[k];
                    let ih = inv_h[k];
                    let half_a = 0.5 * alpha[k];
                    let pk = &mut grad[k * n..(k + 1) * n];
                    match (has_lo[k], has_hi[k]) {
                        (true, true) => {
                            let lo = &phi[start - s..start - s + n];
                            let hi = &phi[start + s..start + s + n];
                            for ((((p, a), &c), l), h) in
                                pk.iter_mut().zip(acc.iter_mut()).zip(centre).zip(lo).zip(hi)
                            {
                                let dm = (c - l.to_f64()) * ih;
                                let dp = (h.to_f64() - c) * ih;
                                *p = 0.5 * (dm + dp);
                                *a += half_a * (dp - dm);
                            }
                        }
                        // Reflecting ghost nodes at the walls.
                        (false, _) => {
                            let hi = &phi[start + s..start + s + n];
                            for (((p, a), &c), h) in pk.iter_mut().zip(acc.iter_mut()).zip(centre).zip(hi) {
                                let dp = (h.to_f64() - c) * ih;
                                *p = 0.5 * dp;
                                *a += half_a * dp;
                            }
                        }
                        (true, false) => {
                            let lo = &phi[start - s..start - s + n];
                            for (((p, a), &c), l) in pk.iter_mut().zip(acc.iter_mut()).zip(centre).zip(lo) {
                                let dm = (c - l.to_f64()) * ih;
                                *p = 0.5 * dm;
                                *a -= half_a * dm;
                            }
                        }
                    }
                }
                {
                    let ih = inv_h[last];
                    let half_a = 0.5 * alpha[last];
                    let pk = &mut grad[last * n..(last + 1) * n];
                    let dp = (centre[1] - centre[0]) * ih;
                    pk[0] = 0.5 * dp;
                    acc[0] += half_a * dp;
                    let dm = (centre[n - 1] - centre[n - 2]) * ih;
                    pk[n - 1] = 0.5 * dm;
                    acc[n - 1] -= half_a * dm;
                    for ((p, a), w) in pk[1..n - 1]
                        .iter_mut()
                        .zip(acc[1..n - 1].iter_mut())
                        .zip(centre.windows(3))
                    {
                        let dm = (w[1] - w[0]) * ih;
                        let dp = (w[2] - w[1]) * ih;
                        *p = 0.5 * (dm + dp);
                        *a += half_a * (dp - dm);
                    }
                }
                for &(ax, ay, sp) in blocks {
                    let px = &grad[ax * n..(ax + 1) * n];
                    let py = &grad[ay * n..(ay + 1) * n];
                    for ((a, &x), &y) in acc.iter_mut().zip(px).zip(py) {
                        *a += sp * (x * x + y * y).sqrt();
                    }
                }
                let mut stats = StepStats::default();
                let mut max_change: f64 = 0.0;
                for (((o, &c), &a), (&l, &g)) in out
                    .iter_mut()
                    .zip(centre)
                    .zip(&*acc)
                    .zip(lbuf.iter().zip(gbuf.iter()))
                {
                    let candidate = c + dt * a;
                    stats.non_finite += !candidate.is_finite() as usize;
                    // Non-increasing in exact arithmetic; the final min
                    // absorbs rounding.
                    let v = fmin(fmax(fmin(candidate, l), g), c);
                    max_change = fmax(max_change, c - v);
                    stats.inside += (v <= 0.0) as usize;
                    *o = T::from_f64(v);
                }
                stats.max_change = max_change;
                stats.inside *= weight;
                stats.non_finite *= weight;
                stats
            },
        )
        .reduce(StepStats::default, StepStats::merge);

    if let Some(ex) = stencil.exchange {
        mirror_blocks(next, grid, ex);
    }
    stats
}

fn dispatch_step<T: Scalar, C: Constraints + ?Sized>(
    phi: &[T],
    next: &mut [T],
    cons: &C,
    stencil: &Stencil,
    dt: f64,
) -> StepStats {
    match cons.grid().dims() {
        2 => step_into::<T, C, 2>(phi, next, cons, stencil, dt),
        4 => step_into::<T, C, 4>(phi, next, cons, stencil, dt),
        6 => step_into::<T, C, 6>(phi, next, cons, stencil, dt),
        8 => step_into::<T, C, 8>(phi, next, cons, stencil, dt),
        d => unreachable!("player dynamics always have an even dimension count, got {d}"),
    }
}

/// `max(l, g)`, the initial value.
pub fn initial_value<T: Scalar, C: Constraints + ?Sized>(cons: &C) -> Vec<T> {
    let grid = cons.grid();
    let row_len = grid.axis(grid.dims() - 1).points;
    let mut values = vec![T::default(); grid.len()];
    values
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each_init(
            || (vec![0.0; row_len], vec![0.0; row_len]),
            |(l, g), (row, out)| {
                cons.fill(row * row_len, l, g);
                for j in 0..row_len {
                    out[j] = T::from_f64(l[j].max(g[j]));
                }
            },
        );
    values
}

/// A single variational-inequality step. `dt` must not exceed the CFL-1
/// bound `1 / sum(alpha_k / h_k)`.
pub fn vi_step<T: Scalar, C: Constraints + ?Sized>(
    phi: &Field<T>,
    cons: &C,
    dynamics: &JointDynamics,
    dt: f64,
) -> Result<(Field<T>, StepStats), HjiError> {
    if phi.grid() != cons.grid() {
        return Err(GridError::GridMismatch.into());
    }
    let bound = dynamics.stable_dt(phi.grid(), 1.0)?;
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(HjiError::CflViolation { dt, bound });
    }
    let stencil = Stencil::new(phi.grid(), dynamics, cons.exchange())?;
    let mut next = vec![T::default(); phi.grid().len()];
    let stats = dispatch_step(phi.values(), &mut next, cons, &stencil, dt);
    if stats.non_finite > 0 {
        return Err(HjiError::NonFinite { step: 0 });
    }
    Ok((Field::from_parts_unchecked(phi.grid().clone(), next), stats))
}

/// Solves to convergence (or horizon), starting from `max(l, g)`.
pub fn solve_tube<T: Scalar, C: Constraints + ?Sized>(
    cons: &C,
    dynamics: &JointDynamics,
    params: &SolverParams,
) -> Result<TubeSolution<T>, HjiError> {
    solve_tube_observed(cons, dynamics, params, |_| {})
}

/// As [`solve_tube`], calling `observe` at every checkpoint (including the
/// initial value at step 0 and the final state).
pub fn solve_tube_observed<T: Scalar, C: Constraints + ?Sized>(
    cons: &C,
    dynamics: &JointDynamics,
    params: &SolverParams,
    mut observe: impl FnMut(&Checkpoint<'_, T>),
) -> Result<TubeSolution<T>, HjiError> {
    params.validate()?;
    let grid = cons.grid().clone();
    let dt_max = dynamics.stable_dt(&grid, params.cfl)?;
    let stencil = Stencil::new(&grid, dynamics, cons.exchange())?;
    let total = grid.len() as f64;

    let mut phi = initial_value::<T, C>(cons);
    let mut next = vec![T::default(); grid.len()];
    let inside0 = phi.iter().filter(|v| v.to_f64() <= 0.0).count();
    observe(&Checkpoint {
        step: 0,
        time: 0.0,
        rate: f64::INFINITY,
        inside_fraction: inside0 as f64 / total,
        values: &phi,
    });

    let mut time = 0.0;
    let mut step = 0;
    let mut window_rate: f64 = 0.0;
    let mut last_rate = f64::INFINITY;
    let status = loop {
        if time >= params.horizon {
            break Termination::Horizon;
        }
        if step >= params.max_steps {
            break Termination::StepBudget;
        }
        let dt = dt_max.min(params.horizon - time);
        let stats = dispatch_step(&phi, &mut next, cons, &stencil, dt);
        std::mem::swap(&mut phi, &mut next);
        step += 1;
        time += dt;
        if stats.non_finite > 0 {
            return Err(HjiError::NonFinite { step });
        }
        window_rate = window_rate.max(stats.max_change / dt);
        let at_checkpoint = step % params.checkpoint_stride == 0;
        if at_checkpoint || time >= params.horizon || step >= params.max_steps {
            last_rate = window_rate;
            let inside_fraction = stats.inside as f64 / total;
            log::info!(
                "step {step} t={time:.4} max-change/t={window_rate:.3e} tube-fraction={inside_fraction:.4}"
            );
            observe(&Checkpoint {
                step,
                time,
                rate: window_rate,
                inside_fraction,
                values: &phi,
            });
            if at_checkpoint && window_rate < params.epsilon {
                break Termination::Converged;
            }
            window_rate = 0.0;
        }
    };
    Ok(TubeSolution {
        phi: Field::from_parts_unchecked(grid, phi),
        status,
        steps: step,
        time,
        dt: dt_max,
        final_rate: last_rate,
    })
}

/// Tube membership of a single state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub inside: bool,
    /// Interpolated value; negative means inside.
    pub value: f64,
    pub clamped: bool,
}

pub fn in_tube<T: Scalar>(phi: &Field<T>, x: &[f64]) -> Membership {
    let s = phi.sample(x);
    Membership {
        inside: s.value <= 0.0,
        value: s.value,
        clamped: s.clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_hamiltonian() {
        let d = JointDynamics::one_vs_one(1.0, 1.5).unwrap();
        assert_eq!(hamiltonian(&[3.0, 4.0, 0.0, 0.0], &d), -5.0);
        let d2 = JointDynamics::two_vs_one(1.0, 1.5).unwrap();
        let h = hamiltonian(&[1.0, 0.0, 0.0, 1.0, 3.0, 4.0], &d2);
        assert!((h - 5.5).abs() < 1e-12);
    }

    #[test]
    fn dynamics_validation() {
        assert!(JointDynamics::new(vec![Player {
            axes: (0, 0),
            speed: 1.0,
            role: Role::Attacker
        }])
        .is_err());
        assert!(JointDynamics::new(vec![Player {
            axes: (0, 1),
            speed: -1.0,
            role: Role::Attacker
        }])
        .is_err());
        let d = JointDynamics::one_vs_one(1.0, 1.5).unwrap();
        assert_eq!(d.axis_speeds(), vec![1.0, 1.0, 1.5, 1.5]);
        let g = Grid::uniform(4, -1.0, 1.0, 45).unwrap();
        let dt = d.stable_dt(&g, 0.5).unwrap();
        assert!((dt - 0.5 / (5.0 * 22.0)).abs() < 1e-15);
        assert!(d.stable_dt(&Grid::uniform(2, -1.0, 1.0, 5).unwrap(), 0.5).is_err());
    }

    fn single(speed: f64) -> JointDynamics {
        JointDynamics::new(vec![Player {
            axes: (0, 1),
            speed,
            role: Role::Attacker,
        }])
        .unwrap()
    }

    #[test]
    fn cfl_violation_rejected() {
        let g = Grid::uniform(2, -1.0, 1.0, 11).unwrap();
        let l = Field::<f64>::from_fn(g.clone(), |x| x[0].hypot(x[1]) - 0.2).unwrap();
        let a = Field::<f64>::constant(g, -10.0).unwrap();
        let c = DenseConstraints::new(&l, &a).unwrap();
        let d = single(1.0);
        let bound = d.stable_dt(l.grid(), 1.0).unwrap();
        assert!(matches!(
            vi_step(&l, &c, &d, bound * 1.5),
            Err(HjiError::CflViolation { .. })
        ));
        assert!(vi_step(&l, &c, &d, bound).is_ok());
    }

    #[test]
    fn clamps_hold_per_node() {
        let g = Grid::uniform(2, -1.0, 1.0, 21).unwrap();
        let target = Shape::Circle {
            center: [0.0, 0.0],
            radius: 0.3,
        };
        let l = Field::<f64>::from_fn(g.clone(), |x| target.sdf([x[0], x[1]])).unwrap();
        // Avoid a vertical strip at x > 0.6.
        let av = Field::<f64>::from_fn(g.clone(), |x| x[0] - 0.6).unwrap();
        let c = DenseConstraints::new(&l, &av).unwrap();
        let d = single(1.0);
        let sol: TubeSolution<f64> = solve_tube(&c, &d, &SolverParams::default()).unwrap();
        for i in 0..g.len() {
            let (li, gi, pi) = (l.get(i), av.get(i), sol.phi.get(i));
            if li <= 0.0 && gi <= li {
                assert!(pi <= li);
            }
            if gi > 0.0 {
                assert!(pi >= gi);
            }
            assert!(pi >= gi && pi <= li.max(gi));
        }
    }

    #[test]
    fn empty_target_never_grows() {
        let g = Grid::uniform(2, -1.0, 1.0, 15).unwrap();
        let l = Field::<f64>::constant(g.clone(), 1.0).unwrap();
        let av = Field::<f64>::constant(g, -1.0).unwrap();
        let c = DenseConstraints::new(&l, &av).unwrap();
        let sol: TubeSolution<f64> = solve_tube(&c, &single(1.0), &SolverParams::default()).unwrap();
        assert!(sol.converged());
        assert!(sol.phi.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn horizon_limits_growth_and_steps_are_monotone() {
        let g = Grid::uniform(2, -1.0, 1.0, 41).unwrap();
        let l = Field::<f64>::from_fn(g.clone(), |x| x[0].hypot(x[1]) - 0.2).unwrap();
        let av = Field::<f64>::constant(g, -10.0).unwrap();
        let c = DenseConstraints::new(&l, &av).unwrap();
        let params = SolverParams {
            horizon: 0.3,
            checkpoint_stride: 1,
            ..SolverParams::default()
        };
        let mut prev: Option<Vec<f64>> = None;
        let mut volumes = Vec::new();
        let sol: TubeSolution<f64> = solve_tube_observed(&c, &single(1.0), &params, |cp| {
            if let Some(p) = &prev {
                assert!(cp.values.iter().zip(p).all(|(a, b)| a <= b));
            }
            volumes.push(cp.inside_fraction);
            prev = Some(cp.values.to_vec());
        })
        .unwrap();
        assert_eq!(sol.status, Termination::Horizon);
        assert!((sol.time - 0.3).abs() < 1e-12);
        assert!(volumes.windows(2).all(|w| w[1] >= w[0]));
        // Reachable within 0.3 from a disc of radius 0.2: radius ~0.5.
        assert!(in_tube(&sol.phi, &[0.4, 0.0]).inside);
        assert!(!in_tube(&sol.phi, &[0.65, 0.0]).inside);
    }

    #[test]
    fn sampled_controls_match_closed_form() {
        use std::f64::consts::PI;
        let d = JointDynamics::two_vs_one(1.0, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dirs: Vec<[f64; 2]> = (0..720)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / 720.0;
                [t.cos(), t.sin()]
            })
            .collect();
        for _ in 0..200 {
            let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            // Separable: each player optimizes its own block.
            let mut h = 0.0;
            for pl in d.players() {
                let vals = dirs
                    .iter()
                    .map(|u| pl.speed * (p[pl.axes.0] * u[0] + p[pl.axes.1] * u[1]));
                h += match pl.role {
                    Role::Attacker => vals.fold(f64::INFINITY, f64::min),
                    Role::Defender => vals.fold(f64::NEG_INFINITY, f64::max),
                };
            }
            assert!((h - hamiltonian(&p, &d)).abs() <= 1e-3);
        }
    }

    #[test]
    fn in_tube_reports_margin() {
        let g = Grid::uniform(2, -1.0, 1.0, 5).unwrap();
        let f = Field::<f64>::from_fn(g, |x| x[0]).unwrap();
        let m = in_tube(&f, &[-0.5, 0.0]);
        assert!(m.inside && (m.value + 0.5).abs() < 1e-12 && !m.clamped);
        assert!(!in_tube(&f, &[0.25, 0.0]).inside);
    }
}

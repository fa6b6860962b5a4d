//! Attacker time-to-target by fast marching, and the shortest-path policy
//! read off it.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::geometry::Shape;
use crate::grid::{Grid, GridError};
use crate::scenario::Scenario;

#[derive(Debug, Error)]
pub enum EikonalError {
    #[error("time-to-target needs a 2-D grid, got {0} axes")]
    NotPlanar(usize),
    #[error("speed {0} must be positive")]
    BadSpeed(f64),
    #[error("the target cannot be reached from any free grid node")]
    Unreachable,
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Copy, PartialEq)]
struct Key(f64, usize);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Fast marching, second order where the upwind data allow, for `|grad T| = 1 / speed` on a planar grid.
/// `seeds` fixes `T` at some nodes; `blocked` nodes stay at `+inf`.
pub fn fast_march(
    grid: &Grid,
    seeds: &[(usize, f64)],
    blocked: &[bool],
    speed: f64,
) -> Result<Vec<f64>, EikonalError> {
    if grid.dims() != 2 {
        return Err(EikonalError::NotPlanar(grid.dims()));
    }
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(EikonalError::BadSpeed(speed));
    }
    let (nx, ny) = (grid.axis(0).points, grid.axis(1).points);
    let (hx, hy) = (grid.spacing(0), grid.spacing(1));
    let mut t = vec![f64::INFINITY; grid.len()];
    let mut done = vec![false; grid.len()];
    let mut fixed = vec![false; grid.len()];
    let mut heap = BinaryHeap::new();
    for &(i, v) in seeds {
        if !blocked[i] && v < t[i] {
            t[i] = v;
            fixed[i] = true;
            heap.push(Reverse(Key(v, i)));
        }
    }
    let coords = |i: usize| (i / ny, i % ny);
    while let Some(Reverse(Key(v, i))) = heap.pop() {
        if done[i] || v > t[i] {
            continue;
        }
        done[i] = true;
        let (x, y) = coords(i);
        let around = [
            (x > 0).then(|| i - ny),
            (x + 1 < nx).then(|| i + ny),
            (y > 0).then(|| i - 1),
            (y + 1 < ny).then(|| i + 1),
        ];
        for n in around.into_iter().flatten() {
            if done[n] || blocked[n] || fixed[n] {
                continue;
            }
            let (nx_i, ny_i) = coords(n);
            let tx = axis_term(&t, &done, n, nx_i, nx, ny, hx);
            let ty = axis_term(&t, &done, n, ny_i, ny, 1, hy);
            let candidate = solve_update(tx, ty, 1.0 / speed);
            if candidate < t[n] {
                t[n] = candidate;
                heap.push(Reverse(Key(candidate, n)));
            }
        }
    }
    Ok(t)
}

/// Upwind term `w (T - c)^2` along one axis from the smaller accepted
/// neighbour, second order when the next node on that side is accepted and
/// not larger.
fn axis_term(
    t: &[f64],
    done: &[bool],
    n: usize,
    along: usize,
    points: usize,
    stride: usize,
    h: f64,
) -> Option<(f64, f64)> {
    let side = |dir: isize| -> Option<(f64, Option<f64>)> {
        let one = along as isize + dir;
        if one < 0 || one >= points as isize {
            return None;
        }
        let i1 = (n as isize + dir * stride as isize) as usize;
        if !done[i1] {
            return None;
        }
        let two = along as isize + 2 * dir;
        let second = (two >= 0 && two < points as isize)
            .then(|| (n as isize + 2 * dir * stride as isize) as usize)
            .filter(|&i2| done[i2] && t[i2] <= t[i1])
            .map(|i2| t[i2]);
        Some((t[i1], second))
    };
    let best = match (side(-1), side(1)) {
        (Some(a), Some(b)) => Some(if b.0 < a.0 { b } else { a }),
        (a, b) => a.or(b),
    }?;
    Some(match best {
        (a1, Some(a2)) => ((4.0 * a1 - a2) / 3.0, 9.0 / (4.0 * h * h)),
        (a1, None) => (a1, 1.0 / (h * h)),
    })
}

/// Solves `sum w_k (T - c_k)^2 = slowness^2` over the available terms,
/// dropping the larger term when it cannot be upwind.
fn solve_update(tx: Option<(f64, f64)>, ty: Option<(f64, f64)>, slowness: f64) -> f64 {
    let mut terms: Vec<(f64, f64)> = [tx, ty].into_iter().flatten().collect();
    terms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some(&(c0, w0)) = terms.first() else {
        return f64::INFINITY;
    };
    let single = c0 + slowness / w0.sqrt();
    let Some(&(c1, w1)) = terms.get(1) else {
        return single;
    };
    if single <= c1 {
        return single;
    }
    let qa = w0 + w1;
    let qb = -2.0 * (w0 * c0 + w1 * c1);
    let qc = w0 * c0 * c0 + w1 * c1 * c1 - slowness * slowness;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return single;
    }
    let root = (-qb + disc.sqrt()) / (2.0 * qa);
    if root >= c1 {
        root
    } else {
        single
    }
}

/// Attacker time-to-target over the free space; `+inf` inside obstacles and
/// where the target cannot be reached.
#[derive(Debug, Clone)]
pub struct TimeToTarget {
    grid: Grid,
    values: Vec<f64>,
    /// Upwind gradient per node.
    gradient: Vec<[f64; 2]>,
    obstacles: Vec<Shape>,
}

impl TimeToTarget {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn corners(&self, x: [f64; 2]) -> [(usize, f64); 4] {
        let mut base = [0usize; 2];
        let mut frac = [0.0; 2];
        for k in 0..2 {
            let a = self.grid.axis(k);
            let s = ((x[k] - a.lower) / a.spacing()).clamp(0.0, (a.points - 1) as f64);
            let i = (s.floor() as usize).min(a.points - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        let ny = self.grid.axis(1).points;
        let i0 = base[0] * ny + base[1];
        [
            (i0, (1.0 - frac[0]) * (1.0 - frac[1])),
            (i0 + 1, (1.0 - frac[0]) * frac[1]),
            (i0 + ny, frac[0] * (1.0 - frac[1])),
            (i0 + ny + 1, frac[0] * frac[1]),
        ]
    }

    /// Bilinear time over the finite corners of the enclosing cell.
    pub fn time_at(&self, x: [f64; 2]) -> f64 {
        let (mut sum, mut weight) = (0.0, 0.0);
        for (i, w) in self.corners(x) {
            if self.values[i].is_finite() {
                sum += w * self.values[i];
                weight += w;
            }
        }
        if weight > 0.0 {
            sum / weight
        } else {
            f64::INFINITY
        }
    }

    /// Shortest-path heading at `x`, or `None` where the time field is flat
    /// or undefined.
    pub fn direction(&self, x: [f64; 2]) -> Option<[f64; 2]> {
        let mut g = [0.0; 2];
        let mut weight = 0.0;
        for (i, w) in self.corners(x) {
            if self.values[i].is_finite() {
                g[0] += w * self.gradient[i][0];
                g[1] += w * self.gradient[i][1];
                weight += w;
            }
        }
        if weight == 0.0 {
            return None;
        }
        let n = g[0].hypot(g[1]);
        if !(n > 1e-12) {
            return None;
        }
        let mut d = [-g[0] / n, -g[1] / n];
        // Near an obstacle, drop any heading component into it.
        let h = self.grid.max_spacing();
        for o in &self.obstacles {
            if o.sdf(x) < h {
                let nrm = o.sdf_gradient(x);
                let into = d[0] * nrm[0] + d[1] * nrm[1];
                if into < 0.0 {
                    d = [d[0] - into * nrm[0], d[1] - into * nrm[1]];
                }
            }
        }
        let n = d[0].hypot(d[1]);
        (n > 1e-12).then(|| [d[0] / n, d[1] / n])
    }
}

fn upwind_gradient(grid: &Grid, t: &[f64]) -> Vec<[f64; 2]> {
    let (nx, ny) = (grid.axis(0).points, grid.axis(1).points);
    let h = [grid.spacing(0), grid.spacing(1)];
    (0..t.len())
        .map(|i| {
            if !t[i].is_finite() {
                return [0.0, 0.0];
            }
            let (x, y) = (i / ny, i % ny);
            let lo = [(x > 0).then(|| i - ny), (y > 0).then(|| i - 1)];
            let hi = [(x + 1 < nx).then(|| i + ny), (y + 1 < ny).then(|| i + 1)];
            let mut g = [0.0; 2];
            for k in 0..2 {
                let tl = lo[k].map_or(f64::INFINITY, |j| t[j]);
                let th = hi[k].map_or(f64::INFINITY, |j| t[j]);
                if tl < th && tl < t[i] {
                    g[k] = (t[i] - tl) / h[k];
                } else if th < t[i] {
                    g[k] = (th - t[i]) / h[k];
                }
            }
            g
        })
        .collect()
}

/// Time-to-target for the scenario's attackers on `grid`. Target nodes
/// start at zero and nodes within one cell of the target at their exact
/// distance.
pub fn eikonal_field(scenario: &Scenario, grid: &Grid) -> Result<TimeToTarget, EikonalError> {
    if grid.dims() != 2 {
        return Err(EikonalError::NotPlanar(grid.dims()));
    }
    let speed = scenario.players.attacker_speed;
    let h = grid.max_spacing();
    let mut blocked = vec![false; grid.len()];
    let mut seeds = Vec::new();
    grid.for_each_state(|i, x| {
        let p = [x[0], x[1]];
        blocked[i] = scenario.in_obstacle(p);
        let d = scenario.target.sdf(p);
        if d <= h {
            seeds.push((i, d.max(0.0) / speed));
        }
    });
    let values = fast_march(grid, &seeds, &blocked, speed)?;
    let reached_outside = grid
        .nodes()
        .any(|(i, x)| values[i].is_finite() && scenario.target.sdf([x[0], x[1]]) > h);
    if !reached_outside {
        return Err(EikonalError::Unreachable);
    }
    let gradient = upwind_gradient(grid, &values);
    Ok(TimeToTarget {
        grid: grid.clone(),
        values,
        gradient,
        obstacles: scenario.obstacles.clone(),
    })
}

/// Heading of an attacker at `x`; `None` means hold position.
pub fn attacker_policy(field: &TimeToTarget, x: [f64; 2]) -> Option<[f64; 2]> {
    field.direction(x)
}

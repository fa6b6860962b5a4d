//! The 1 vs. 1 and 2 vs. 1 games: target/avoid sets, tube solves and the
//! optimal feedback controllers read off the converged value functions.
//!
//! Axis layouts are fixed: the 1 vs. 1 joint state is
//! `(attacker x, attacker y, defender x, defender y)` and the 2 vs. 1 joint
//! state is `(attacker1 x, y, attacker2 x, y, defender x, y)`.
//!
//! Avoid functions follow the solver convention: `g > 0` on avoid states.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::{pairwise_distance_set, GeometryError, ImplicitSet};
use crate::grid::{Field, Grid, GridError, Scalar};
use crate::hji::{
    solve_tube_observed, Checkpoint, Constraints, DenseConstraints, Exchange, HjiError,
    TubeSolution,
};
use crate::scenario::Scenario;

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Hji(#[from] HjiError),
    #[error("{0}")]
    Mismatch(String),
}

/// Converged 1 vs. 1 and 2 vs. 1 value functions bound to a scenario.
#[derive(Debug, Clone)]
pub struct GameTubes {
    pub tube11: Field<f32>,
    pub tube21: Field<f32>,
    pub hash: String,
}

impl GameTubes {
    pub fn new(tube11: Field<f32>, tube21: Field<f32>, hash: String) -> Result<Self, GameError> {
        if tube11.grid().dims() != 4 || tube21.grid().dims() != 6 {
            return Err(GameError::Mismatch(format!(
                "tube dimensions {} and {} (expected 4 and 6)",
                tube11.grid().dims(),
                tube21.grid().dims()
            )));
        }
        Ok(GameTubes {
            tube11,
            tube21,
            hash,
        })
    }

    pub fn check_scenario(&self, scenario: &Scenario) -> Result<(), GameError> {
        let expected = scenario.tube_hash();
        if self.hash != expected {
            return Err(GameError::Mismatch(format!(
                "tubes were built for scenario hash {} but this scenario hashes to {}",
                &self.hash[..self.hash.len().min(16)],
                &expected[..16]
            )));
        }
        Ok(())
    }
}

/// Level-set pieces of the 1 vs. 1 game.
struct PairSets {
    /// Attacker reached the target uncaptured, or defender inside an
    /// obstacle.
    target: ImplicitSet,
    /// Captured, or attacker inside an obstacle (`<= 0` inside).
    lose: ImplicitSet,
}

fn pair_sets(
    scenario: &Scenario,
    attacker: (usize, usize),
    defender: (usize, usize),
    dims: usize,
) -> Result<PairSets, GameError> {
    let target = scenario.target_set();
    let obstacles = scenario.obstacle_set();
    let capture = pairwise_distance_set(attacker, defender, scenario.players.capture_radius, dims)?;
    let reached = target.lift(attacker, dims)?.intersect(&capture.complement());
    let lose = capture.union(&obstacles.lift(attacker, dims)?);
    Ok(PairSets {
        target: reached,
        lose,
    })
}

/// `(l, g)` of the 1 vs. 1 game as implicit functions on 4-D states.
pub fn sets_1v1(scenario: &Scenario) -> Result<(ImplicitSet, ImplicitSet), GameError> {
    let pair = pair_sets(scenario, (0, 1), (2, 3), 4)?;
    let defender_blocked = scenario.obstacle_set().lift((2, 3), 4)?;
    Ok((pair.target.union(&defender_blocked), pair.lose.complement()))
}

pub fn build_1v1_sets(scenario: &Scenario, grid4: &Grid) -> Result<(Field, Field), GameError> {
    if grid4.dims() != 4 {
        return Err(GameError::Mismatch("1 vs. 1 sets need a 4-D grid".into()));
    }
    let (l, g) = sets_1v1(scenario)?;
    Ok((
        Field::from_fn(grid4.clone(), |x| l.eval(x))?,
        Field::from_fn(grid4.clone(), |x| g.eval(x))?,
    ))
}

/// `(l, g)` of the 2 vs. 1 game. Both sets need the converged 1 vs. 1
/// value, read by interpolation at the projected `(attacker, defender)`
/// coordinates; `margin` shifts its zero level.
pub fn sets_2v1<T: Scalar>(
    scenario: &Scenario,
    tube11: &Field<T>,
    margin: f64,
) -> Result<(ImplicitSet, ImplicitSet), GameError> {
    if tube11.grid().dims() != 4 {
        return Err(GameError::Mismatch("1 vs. 1 tube must be 4-D".into()));
    }
    let first = pair_sets(scenario, (0, 1), (4, 5), 6)?;
    let second = pair_sets(scenario, (2, 3), (4, 5), 6)?;
    let defender_blocked = scenario.obstacle_set().lift((4, 5), 6)?;
    // "(x_a, x_D) is in the 1 vs. 1 tube", as an implicit set.
    let outside = |a: (usize, usize)| {
        let tube = tube11.clone();
        ImplicitSet::new(move |x| margin - tube.interpolate(&[x[a.0], x[a.1], x[4], x[5]]))
    };
    let l = first.target.union(&second.target).union(&defender_blocked);

    let l1 = first.lose.intersect(&outside((2, 3)));
    let l2 = second.lose.intersect(&outside((0, 1)));
    Ok((l, l1.union(&l2).complement()))
}

/// Dense 2 vs. 1 sets; memory grows with the full 6-D grid, so large solves
/// use [`PairwiseConstraints`] instead.
pub fn build_2v1_sets<T: Scalar>(
    scenario: &Scenario,
    grid6: &Grid,
    tube11: &Field<T>,
) -> Result<(Field, Field), GameError> {
    if grid6.dims() != 6 {
        return Err(GameError::Mismatch("2 vs. 1 sets need a 6-D grid".into()));
    }
    let (l, g) = sets_2v1(scenario, tube11, scenario.solver.tube_margin)?;
    Ok((
        Field::from_fn(grid6.clone(), |x| l.eval(x))?,
        Field::from_fn(grid6.clone(), |x| g.eval(x))?,
    ))
}

/// 2 vs. 1 constraints evaluated on the fly from three 4-D tables over the
/// `(attacker, defender)` sub-grid:
///
/// ```text
/// l(a1, a2, d) = min(l11(a1, d), l11(a2, d))
/// g(a1, a2, d) = max(min(g11(a1, d), phi11(a2, d) - m), min(g11(a2, d), phi11(a1, d) - m))
/// ```
///
/// which is the same set algebra as [`sets_2v1`] with every term depending on
/// one attacker only.
pub struct PairwiseConstraints {
    grid: Grid,
    n: usize,
    l11: Vec<f64>,
    g11: Vec<f64>,
    outside11: Vec<f64>,
}

impl PairwiseConstraints {
    pub fn new<T: Scalar>(
        scenario: &Scenario,
        grid6: &Grid,
        tube11: &Field<T>,
    ) -> Result<Self, GameError> {
        if grid6.dims() != 6 {
            return Err(GameError::Mismatch("2 vs. 1 constraints need a 6-D grid".into()));
        }
        let a = grid6.axes();
        let n = a[0].points;
        let same = a.iter().all(|ax| ax.points == n)
            && a[0] == a[2]
            && a[2] == a[4]
            && a[1] == a[3]
            && a[3] == a[5];
        if !same {
            return Err(GameError::Mismatch(
                "pairwise constraints need identical axes for all players".into(),
            ));
        }
        let sub = Grid::new(vec![a[0], a[1], a[4], a[5]])?;
        let (l, g) = sets_1v1(scenario)?;
        let margin = scenario.solver.tube_margin;
        let mut l11 = Vec::with_capacity(sub.len());
        let mut g11 = Vec::with_capacity(sub.len());
        let mut outside11 = Vec::with_capacity(sub.len());
        sub.for_each_state(|_, x| {
            l11.push(l.eval(x));
            g11.push(g.eval(x));
            outside11.push(tube11.interpolate(x) - margin);
        });
        Ok(PairwiseConstraints {
            grid: grid6.clone(),
            n,
            l11,
            g11,
            outside11,
        })
    }
}

impl Constraints for PairwiseConstraints {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn fill(&self, start: usize, target: &mut [f64], avoid: &mut [f64]) {
        let n = self.n;
        let n2 = n * n;
        // start = ((a1 * n2 + a2) * n + dx) * n + dy with a1, a2 in [0, n2)
        let dy0 = start % n;
        let dx = start / n % n;
        let a2 = start / n2 % n2;
        let a1 = start / (n2 * n2);
        let base1 = (a1 * n + dx) * n + dy0;
        let base2 = (a2 * n + dx) * n + dy0;
        let len = target.len();
        let (r1, r2) = (base1..base1 + len, base2..base2 + len);
        let (l1, l2) = (&self.l11[r1.clone()], &self.l11[r2.clone()]);
        let (g1, g2) = (&self.g11[r1.clone()], &self.g11[r2.clone()]);
        let (o1, o2) = (&self.outside11[r1], &self.outside11[r2]);
        for (j, (t, a)) in target.iter_mut().zip(avoid.iter_mut()).enumerate() {
            *t = min(l1[j], l2[j]);
            *a = max(min(g1[j], o2[j]), min(g2[j], o1[j]));
        }
    }

    fn exchange(&self) -> Option<Exchange> {
        Some(Exchange {
            first: (0, 1),
            second: (2, 3),
        })
    }
}

fn min(a: f64, b: f64) -> f64 {
    if a < b {
        a
    } else {
        b
    }
}

fn max(a: f64, b: f64) -> f64 {
    if a > b {
        a
    } else {
        b
    }
}

/// Solves the 1 vs. 1 tube on the scenario's 4-D grid.
pub fn solve_1v1(
    scenario: &Scenario,
    observe: impl FnMut(&Checkpoint<'_, f64>),
) -> Result<TubeSolution<f64>, GameError> {
    let grid = scenario.grid_1v1()?;
    let (l, g) = build_1v1_sets(scenario, &grid)?;
    let cons = DenseConstraints::new(&l, &g)?;
    Ok(solve_tube_observed(
        &cons,
        &scenario.dynamics_1v1()?,
        &scenario.solver.params(),
        observe,
    )?)
}

/// Solves the 2 vs. 1 tube on the scenario's 6-D grid, storing values as
/// `f32` to fit the 6-D arrays in memory.
pub fn solve_2v1<T: Scalar>(
    scenario: &Scenario,
    tube11: &Field<T>,
    observe: impl FnMut(&Checkpoint<'_, f32>),
) -> Result<TubeSolution<f32>, GameError> {
    let grid = scenario.grid_2v1()?;
    let cons = PairwiseConstraints::new(scenario, &grid, tube11)?;
    Ok(solve_tube_observed(
        &cons,
        &scenario.dynamics_2v1()?,
        &scenario.solver.params(),
        observe,
    )?)
}

/// Gradient norms at or below this are treated as critical points.
pub const DEGENERATE_GRADIENT: f64 = 1e-8;

/// A unit steering direction; `fallback` marks directions not taken from the
/// value gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Steering {
    pub direction: [f64; 2],
    pub fallback: bool,
}

/// `p / ||p||`, or `None` at a critical point.
pub fn normalize(p: [f64; 2]) -> Option<[f64; 2]> {
    let n = p[0].hypot(p[1]);
    (n > DEGENERATE_GRADIENT && n.is_finite()).then(|| [p[0] / n, p[1] / n])
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    normalize([to[0] - from[0], to[1] - from[1]]).unwrap_or([1.0, 0.0])
}

fn steer(block: [f64; 2], fallback: impl FnOnce() -> [f64; 2]) -> Steering {
    match normalize(block) {
        Some(direction) => Steering {
            direction,
            fallback: false,
        },
        None => Steering {
            direction: fallback(),
            fallback: true,
        },
    }
}

/// Defender ascends the 1 vs. 1 value along its own coordinates.
pub fn defender_control_1v1<T: Scalar>(tube11: &Field<T>, xa: [f64; 2], xd: [f64; 2]) -> Steering {
    let p = tube11.gradient_at(&[xa[0], xa[1], xd[0], xd[1]]);
    steer([p[2], p[3]], || toward(xd, xa))
}

/// Attacker descends the 1 vs. 1 value along its own coordinates.
pub fn attacker_control_1v1<T: Scalar>(tube11: &Field<T>, xa: [f64; 2], xd: [f64; 2]) -> Steering {
    let p = tube11.gradient_at(&[xa[0], xa[1], xd[0], xd[1]]);
    steer([-p[0], -p[1]], || toward(xd, xa))
}

/// Defender ascends the 2 vs. 1 value; the fallback pursues the nearer
/// attacker.
pub fn defender_control_2v1<T: Scalar>(
    tube21: &Field<T>,
    xa1: [f64; 2],
    xa2: [f64; 2],
    xd: [f64; 2],
) -> Steering {
    let p = tube21.gradient_at(&[xa1[0], xa1[1], xa2[0], xa2[1], xd[0], xd[1]]);
    steer([p[4], p[5]], || {
        let d1 = (xa1[0] - xd[0]).hypot(xa1[1] - xd[1]);
        let d2 = (xa2[0] - xd[0]).hypot(xa2[1] - xd[1]);
        toward(xd, if d1 <= d2 { xa1 } else { xa2 })
    })
}

/// A planar cut through a value function with its zero contour.
#[derive(Debug, Clone)]
pub struct Slice {
    pub axes: (usize, usize),
    pub field: Field,
    /// Zero-level polylines; closed loops repeat their first point.
    pub contour: Vec<Vec<[f64; 2]>>,
}

/// Samples `tube` on the plane spanned by `free` axes, holding the other
/// coordinates at their values in `template`.
pub fn tube_slice<T: Scalar>(
    tube: &Field<T>,
    template: &[f64],
    free: (usize, usize),
) -> Result<Slice, GameError> {
    let dims = tube.grid().dims();
    if template.len() != dims {
        return Err(GameError::Mismatch(format!(
            "slice template has {} coordinates for a {dims}-D tube",
            template.len()
        )));
    }
    if free.0 == free.1 || free.0 >= dims || free.1 >= dims {
        return Err(GameError::Geometry(GeometryError::BadAxisPair(
            free.0, free.1, dims,
        )));
    }
    let grid = Grid::new(vec![*tube.grid().axis(free.0), *tube.grid().axis(free.1)])?;
    let field = Field::from_fn(grid, |s| {
        let mut x = template.to_vec();
        x[free.0] = s[0];
        x[free.1] = s[1];
        tube.interpolate(&x)
    })?;
    let contour = zero_contour(&field);
    Ok(Slice {
        axes: free,
        field,
        contour,
    })
}

/// Edge identifiers for contour stitching: horizontal edges from node
/// (i, j) to (i + 1, j) and vertical edges from (i, j) to (i, j + 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Edge {
    H(usize, usize),
    V(usize, usize),
}

/// Marching squares on the `<= 0` region of a 2-D field.
pub fn zero_contour(field: &Field) -> Vec<Vec<[f64; 2]>> {
    let g = field.grid();
    assert_eq!(g.dims(), 2, "contours are extracted from planar fields");
    let (nx, ny) = (g.axis(0).points, g.axis(1).points);
    let v = |i: usize, j: usize| field.at(&[i, j]);
    let point = |e: Edge| -> [f64; 2] {
        let (a, b) = match e {
            Edge::H(i, j) => ((i, j), (i + 1, j)),
            Edge::V(i, j) => ((i, j), (i, j + 1)),
        };
        let (va, vb) = (v(a.0, a.1), v(b.0, b.1));
        let t = if va == vb { 0.5 } else { (va / (va - vb)).clamp(0.0, 1.0) };
        let pa = [g.axis(0).coord(a.0), g.axis(1).coord(a.1)];
        let pb = [g.axis(0).coord(b.0), g.axis(1).coord(b.1)];
        [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]
    };

    let mut segments: Vec<(Edge, Edge)> = Vec::new();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            let c = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            let inside = c.map(|x| x <= 0.0);
            let case = inside
                .iter()
                .enumerate()
                .fold(0u8, |acc, (k, &b)| acc | ((b as u8) << k));
            // Edges of the cell: bottom, right, top, left.
            let (bottom, right, top, left) =
                (Edge::H(i, j), Edge::V(i + 1, j), Edge::H(i, j + 1), Edge::V(i, j));
            let centre_inside = (c.iter().sum::<f64>() / 4.0) <= 0.0;
            match case {
                0 | 15 => {}
                1 | 14 => segments.push((left, bottom)),
                2 | 13 => segments.push((bottom, right)),
                3 | 12 => segments.push((left, right)),
                4 | 11 => segments.push((right, top)),
                6 | 9 => segments.push((bottom, top)),
                7 | 8 => segments.push((left, top)),
                5 => {
                    if centre_inside {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    } else {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    }
                }
                10 => {
                    if centre_inside {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    } else {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    // Stitch segments sharing edge crossings into polylines.
    let mut by_edge: BTreeMap<Edge, Vec<usize>> = BTreeMap::new();
    for (s, (a, b)) in segments.iter().enumerate() {
        by_edge.entry(*a).or_default().push(s);
        by_edge.entry(*b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let other = |s: usize, e: Edge| if segments[s].0 == e { segments[s].1 } else { segments[s].0 };
    let extend = |start: Edge, first: usize, used: &mut Vec<bool>| -> Vec<Edge> {
        let mut chain = vec![start];
        let mut seg = first;
        let mut at = start;
        loop {
            used[seg] = true;
            at = other(seg, at);
            chain.push(at);
            match by_edge[&at].iter().find(|&&t| !used[t]) {
                Some(&t) => seg = t,
                None => break,
            }
        }
        chain
    };
    // Open chains start at edges touched by a single segment.
    for (e, segs) in &by_edge {
        if segs.len() == 1 && !used[segs[0]] {
            lines.push(extend(*e, segs[0], &mut used));
        }
    }
    for s in 0..segments.len() {
        if !used[s] {
            lines.push(extend(segments[s].0, s, &mut used));
        }
    }
    lines
        .into_iter()
        .map(|chain| chain.into_iter().map(point).collect())
        .collect()
}

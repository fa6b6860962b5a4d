//! Dense rectilinear N-dimensional grids.
//!
//! Values are stored row-major (the last axis varies fastest). A [`Field`]
//! pairs a [`Grid`] with one finite scalar per node and provides multilinear
//! interpolation and finite-difference gradients at arbitrary states.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("axis {axis}: lower bound {lower} is not below upper bound {upper}")]
    DegenerateAxis { axis: usize, lower: f64, upper: f64 },
    #[error("axis {axis}: bounds must be finite")]
    NonFiniteBounds { axis: usize },
    #[error("axis {axis}: {points} points given, at least 3 are required")]
    TooFewPoints { axis: usize, points: usize },
    #[error("{bounds} bound pairs but {points} point counts")]
    AxisCountMismatch { bounds: usize, points: usize },
    #[error("grid needs at least one axis")]
    NoAxes,
    #[error("expected {expected} values, got {actual}")]
    ValueCount { expected: usize, actual: usize },
    #[error("non-finite value {value} at node {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("state has {actual} coordinates, grid has {expected} axes")]
    StateDims { expected: usize, actual: usize },
    #[error("grids differ")]
    GridMismatch,
}

/// One axis of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.spacing()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    len: usize,
}

/// Builds a grid from per-axis `(lower, upper)` bounds and point counts.
pub fn make_grid(bounds: &[(f64, f64)], points: &[usize]) -> Result<Grid, GridError> {
    if bounds.len() != points.len() {
        return Err(GridError::AxisCountMismatch {
            bounds: bounds.len(),
            points: points.len(),
        });
    }
    let axes = bounds
        .iter()
        .zip(points)
        .map(|(&(lower, upper), &points)| Axis {
            lower,
            upper,
            points,
        })
        .collect();
    Grid::new(axes)
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, GridError> {
        if axes.is_empty() {
            return Err(GridError::NoAxes);
        }
        for (axis, a) in axes.iter().enumerate() {
            if !a.lower.is_finite() || !a.upper.is_finite() {
                return Err(GridError::NonFiniteBounds { axis });
            }
            if a.lower >= a.upper {
                return Err(GridError::DegenerateAxis {
                    axis,
                    lower: a.lower,
                    upper: a.upper,
                });
            }
            if a.points < 3 {
                return Err(GridError::TooFewPoints {
                    axis,
                    points: a.points,
                });
            }
        }
        let mut strides = vec![1; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].points;
        }
        let len = strides[0] * axes[0].points;
        Ok(Grid { axes, strides, len })
    }

    /// The same axis definition repeated `dims` times.
    pub fn uniform(dims: usize, lower: f64, upper: f64, points: usize) -> Result<Self, GridError> {
        Grid::new(vec![
            Axis {
                lower,
                upper,
                points
            };
            dims
        ])
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &Axis {
        &self.axes[k]
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spacing(&self, k: usize) -> f64 {
        self.axes[k].spacing()
    }

    pub fn max_spacing(&self) -> f64 {
        self.axes
            .iter()
            .map(Axis::spacing)
            .fold(0.0, f64::max)
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dims());
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn unravel(&self, mut flat: usize, multi: &mut [usize]) {
        debug_assert!(flat < self.len);
        for (k, s) in self.strides.iter().enumerate() {
            multi[k] = flat / s;
            flat %= s;
        }
    }

    pub fn node_state(&self, multi: &[usize], state: &mut [f64]) {
        for k in 0..self.dims() {
            state[k] = self.axes[k].coord(multi[k]);
        }
    }

    /// Visits every node once in row-major (flat storage) order.
    pub fn nodes(&self) -> Nodes<'_> {
        Nodes {
            grid: self,
            next: 0,
            multi: vec![0; self.dims()],
        }
    }

    /// Calls `f(flat, state)` for every node in storage order without
    /// allocating per node.
    pub fn for_each_state(&self, mut f: impl FnMut(usize, &[f64])) {
        let mut multi = vec![0usize; self.dims()];
        let mut state: Vec<f64> = self.axes.iter().map(|a| a.lower).collect();
        for flat in 0..self.len {
            f(flat, &state);
            for k in (0..self.dims()).rev() {
                multi[k] += 1;
                if multi[k] < self.axes[k].points {
                    state[k] = self.axes[k].coord(multi[k]);
                    break;
                }
                multi[k] = 0;
                state[k] = self.axes[k].lower;
            }
        }
    }

    /// Locates `x` within the grid: per axis the lower corner index and the
    /// fractional offset in `[0, 1]`. Returns whether any coordinate was
    /// clamped into bounds.
    fn locate(&self, x: &[f64], cell: &mut [usize], frac: &mut [f64]) -> bool {
        let mut clamped = false;
        for (k, a) in self.axes.iter().enumerate() {
            let mut xk = x[k];
            if xk < a.lower {
                xk = a.lower;
                clamped = true;
            } else if xk > a.upper {
                xk = a.upper;
                clamped = true;
            }
            let t = (xk - a.lower) / a.spacing();
            let i = (t.floor() as usize).min(a.points - 2);
            cell[k] = i;
            frac[k] = (t - i as f64).clamp(0.0, 1.0);
        }
        clamped
    }
}

pub struct Nodes<'a> {
    grid: &'a Grid,
    next: usize,
    multi: Vec<usize>,
}

impl Iterator for Nodes<'_> {
    type Item = (usize, Vec<f64>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.grid.len {
            return None;
        }
        let flat = self.next;
        self.grid.unravel(flat, &mut self.multi);
        let mut state = vec![0.0; self.grid.dims()];
        self.grid.node_state(&self.multi, &mut state);
        self.next += 1;
        Some((flat, state))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.grid.len - self.next;
        (rest, Some(rest))
    }
}

impl ExactSizeIterator for Nodes<'_> {}

/// Storage scalar for fields. Arithmetic is always done in `f64`.
pub trait Scalar: Copy + Send + Sync + PartialOrd + Debug + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// An interpolated value and whether the query had to be clamped into the
/// grid bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field<T = f64> {
    grid: Grid,
    values: Vec<T>,
}

impl<T: Scalar> Field<T> {
    pub fn new(grid: Grid, values: Vec<T>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::ValueCount {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        if let Some((index, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.to_f64().is_finite())
        {
            return Err(GridError::NonFinite {
                index,
                value: v.to_f64(),
            });
        }
        Ok(Field { grid, values })
    }

    /// Wraps values already known to be finite (solver output).
    pub(crate) fn from_parts_unchecked(grid: Grid, values: Vec<T>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Field { grid, values }
    }

    pub fn constant(grid: Grid, value: f64) -> Result<Self, GridError> {
        let n = grid.len();
        Field::new(grid, vec![T::from_f64(value); n])
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self, GridError> {
        let mut values = Vec::with_capacity(grid.len());
        grid.for_each_state(|_, x| values.push(T::from_f64(f(x))));
        Field::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, flat: usize) -> f64 {
        self.values[flat].to_f64()
    }

    pub fn at(&self, multi: &[usize]) -> f64 {
        self.get(self.grid.ravel(multi))
    }

    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn convert<U: Scalar>(&self) -> Field<U> {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    fn check_state(&self, x: &[f64]) {
        assert_eq!(
            x.len(),
            self.grid.dims(),
            "state of {} coordinates queried on a {}-D grid",
            x.len(),
            self.grid.dims()
        );
    }

    /// Multilinear interpolation at `x`; out-of-bounds coordinates are
    /// clamped to the boundary.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        self.sample(x).value
    }

    pub fn sample(&self, x: &[f64]) -> Sample {
        self.check_state(x);
        let n = self.grid.dims();
        let mut cell = vec![0usize; n];
        let mut frac = vec![0.0; n];
        let clamped = self.grid.locate(x, &mut cell, &mut frac);
        let base = self.grid.ravel(&cell);
        let strides = self.grid.strides();
        let mut value = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = base;
            for k in 0..n {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    idx += strides[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                value += w * self.values[idx].to_f64();
            }
        }
        Sample { value, clamped }
    }

    /// Finite-difference derivative along axis `k` at a node: central in the
    /// interior, one-sided at the boundary.
    #[inline]
    fn node_derivative(&self, flat: usize, index_k: usize, k: usize) -> f64 {
        let a = self.grid.axis(k);
        let s = self.grid.strides()[k];
        let h = a.spacing();
        if index_k == 0 {
            (self.get(flat + s) - self.get(flat)) / h
        } else if index_k == a.points - 1 {
            (self.get(flat) - self.get(flat - s)) / h
        } else {
            (self.get(flat + s) - self.get(flat - s)) / (2.0 * h)
        }
    }

    /// Gradient at `x`: node derivatives interpolated multilinearly.
    pub fn gradient_at(&self, x: &[f64]) -> Vec<f64> {
        self.check_state(x);
        let n = self.grid.dims();
        let mut cell = vec![0usize; n];
        let mut frac = vec![0.0; n];
        self.grid.locate(x, &mut cell, &mut frac);
        let base = self.grid.ravel(&cell);
        let strides = self.grid.strides();
        let mut grad = vec![0.0; n];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = base;
            for k in 0..n {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    idx += strides[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w == 0.0 {
                continue;
            }
            for (k, g) in grad.iter_mut().enumerate() {
                let ik = cell[k] + (corner >> k & 1);
                *g += w * self.node_derivative(idx, ik, k);
            }
        }
        grad
    }

    /// Node values of the `2^N` corners of the cell enclosing `x`.
    pub fn corner_values(&self, x: &[f64]) -> Vec<f64> {
        self.check_state(x);
        let n = self.grid.dims();
        let mut cell = vec![0usize; n];
        let mut frac = vec![0.0; n];
        self.grid.locate(x, &mut cell, &mut frac);
        let base = self.grid.ravel(&cell);
        let strides = self.grid.strides();
        (0..(1usize << n))
            .map(|corner| {
                let idx = (0..n)
                    .filter(|k| corner >> k & 1 == 1)
                    .fold(base, |acc, k| acc + strides[k]);
                self.get(idx)
            })
            .collect()
    }

    /// Largest minus smallest corner value of the cell enclosing `x`: the
    /// value change resolvable within one cell there.
    pub fn cell_spread(&self, x: &[f64]) -> f64 {
        let c = self.corner_values(x);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_grid_sizes() {
        let g = Grid::uniform(4, -1.0, 1.0, 45).unwrap();
        assert_eq!(g.len(), 4_100_625);
        for k in 0..4 {
            assert!((g.spacing(k) - 2.0 / 44.0).abs() < 1e-15);
        }
        let g6 = Grid::uniform(6, -1.0, 1.0, 30).unwrap();
        assert_eq!(g6.len(), 30usize.pow(6));
    }

    #[test]
    fn three_point_axis() {
        let g = make_grid(&[(0.0, 1.0)], &[3]).unwrap();
        let coords: Vec<f64> = g.nodes().map(|(_, s)| s[0]).collect();
        assert_eq!(coords, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_bad_axes() {
        assert_eq!(
            make_grid(&[(1.0, 1.0)], &[5]),
            Err(GridError::DegenerateAxis {
                axis: 0,
                lower: 1.0,
                upper: 1.0
            })
        );
        assert_eq!(
            make_grid(&[(0.0, 1.0), (0.0, 1.0)], &[5, 2]),
            Err(GridError::TooFewPoints { axis: 1, points: 2 })
        );
        assert!(make_grid(&[(0.0, f64::INFINITY)], &[5]).is_err());
        assert!(make_grid(&[(0.0, 1.0)], &[5, 5]).is_err());
    }

    #[test]
    fn rejects_non_finite_values() {
        let g = make_grid(&[(0.0, 1.0)], &[3]).unwrap();
        assert!(matches!(
            Field::new(g.clone(), vec![0.0, f64::NAN, 1.0]),
            Err(GridError::NonFinite { index: 1, .. })
        ));
        assert!(Field::<f64>::new(g, vec![0.0; 4]).is_err());
    }

    #[test]
    fn node_visits_match_storage_order() {
        let g = make_grid(&[(0.0, 1.0), (-2.0, 2.0), (5.0, 6.0)], &[3, 4, 5]).unwrap();
        let mut multi = vec![0; 3];
        let mut count = 0;
        for (expected, (flat, state)) in g.nodes().enumerate() {
            assert_eq!(flat, expected);
            g.unravel(flat, &mut multi);
            assert_eq!(g.ravel(&multi), flat);
            for k in 0..3 {
                assert_eq!(state[k], g.axis(k).coord(multi[k]));
            }
            count += 1;
        }
        assert_eq!(count, 60);
        let mut seen = Vec::new();
        g.for_each_state(|flat, s| seen.push((flat, s.to_vec())));
        let direct: Vec<_> = g.nodes().collect();
        assert_eq!(seen, direct);
    }

    #[test]
    fn constant_field_interpolates_and_has_zero_gradient() {
        let g = Grid::uniform(3, -1.0, 1.0, 7).unwrap();
        let f = Field::<f64>::constant(g, 2.5).unwrap();
        assert_eq!(f.interpolate(&[0.123, -0.77, 0.5]), 2.5);
        assert!(f.gradient_at(&[0.1, 0.2, 0.3]).iter().all(|&d| d.abs() < 1e-12));
    }

    #[test]
    fn clamps_out_of_bounds() {
        let g = make_grid(&[(0.0, 1.0), (0.0, 1.0)], &[5, 5]).unwrap();
        let f = Field::<f64>::from_fn(g, |x| x[0] + 10.0 * x[1]).unwrap();
        let s = f.sample(&[1.5, 0.5]);
        assert!(s.clamped);
        assert!((s.value - 6.0).abs() < 1e-12);
        assert!(!f.sample(&[1.0, 0.0]).clamped);
    }

    #[test]
    fn quadratic_gradient_within_truncation_bound() {
        let g = Grid::uniform(2, -1.0, 1.0, 21).unwrap();
        let h = g.max_spacing();
        let f = Field::<f64>::from_fn(g, |x| x[0] * x[0] + x[1] * x[1]).unwrap();
        let grad = f.gradient_at(&[0.3, -0.3]);
        assert!((grad[0] - 0.6).abs() <= 2.0 * h * h, "{grad:?}");
        assert!((grad[1] + 0.6).abs() <= 2.0 * h * h, "{grad:?}");
    }

    #[test]
    fn affine_gradient_exact() {
        let g = Grid::uniform(4, -1.0, 1.0, 6).unwrap();
        let f = Field::<f64>::from_fn(g, |x| 2.0 * x[0] + 3.0 * x[1]).unwrap();
        let grad = f.gradient_at(&[0.11, -0.52, 0.3, 0.9]);
        let expect = [2.0, 3.0, 0.0, 0.0];
        for k in 0..4 {
            assert!((grad[k] - expect[k]).abs() < 1e-9, "{grad:?}");
        }
    }

    #[test]
    fn f32_conversion_preserves_grid() {
        let g = Grid::uniform(2, 0.0, 1.0, 4).unwrap();
        let f = Field::<f64>::from_fn(g, |x| x[0] - x[1]).unwrap();
        let h: Field<f32> = f.convert();
        assert_eq!(h.grid(), f.grid());
        assert_eq!(h.get(5), f.get(5) as f32 as f64);
    }

    fn random_field_4d(seed: u64) -> Field<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = make_grid(&[(-1.0, 1.0), (0.0, 2.0), (-3.0, 1.0), (0.5, 1.5)], &[4, 5, 3, 6]).unwrap();
        let values = (0..g.len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        Field::new(g, values).unwrap()
    }

    #[test]
    fn interpolation_bounded_by_enumerated_corners() {
        use rand::{Rng, SeedableRng};
        let f = random_field_4d(7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: Vec<f64> = f
                .grid()
                .axes()
                .iter()
                .map(|a| rng.gen_range(a.lower..a.upper))
                .collect();
            // Enumerate the 16 enclosing corners directly from coordinates.
            let mut lo = Vec::new();
            for (k, a) in f.grid().axes().iter().enumerate() {
                let mut i = 0;
                while i + 2 < a.points && a.coord(i + 1) <= x[k] {
                    i += 1;
                }
                lo.push(i);
            }
            let mut corner_vals = Vec::new();
            for c in 0..16usize {
                let multi: Vec<usize> = (0..4).map(|k| lo[k] + (c >> k & 1)).collect();
                corner_vals.push(f.at(&multi));
            }
            let min = corner_vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = corner_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = f.interpolate(&x);
            assert!(v >= min - 1e-12 && v <= max + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn affine_fields_reproduced(
            c in prop::collection::vec(-3.0f64..3.0, 4),
            b in -2.0f64..2.0,
            x in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let g = Grid::uniform(3, -1.0, 1.0, 5).unwrap();
            let f = Field::<f64>::from_fn(g, |s| b + c[0] * s[0] + c[1] * s[1] + c[2] * s[2]).unwrap();
            let expect = b + c[0] * x[0] + c[1] * x[1] + c[2] * x[2];
            prop_assert!((f.interpolate(&x) - expect).abs() < 1e-9);
            let grad = f.gradient_at(&x);
            for k in 0..3 {
                prop_assert!((grad[k] - c[k]).abs() <= 1e-9 * (1.0 + c[k].abs()));
            }
        }

        #[test]
        fn exact_at_nodes(seed in 0u64..1000) {
            let f = random_field_4d(seed);
            for (flat, state) in f.grid().nodes().step_by(17) {
                prop_assert!((f.interpolate(&state) - f.get(flat)).abs() < 1e-12);
            }
        }
    }
}

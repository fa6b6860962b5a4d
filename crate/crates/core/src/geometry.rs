//! Implicit geometry: signed distances for planar shapes and a small
//! Boolean algebra over level-set functions.
//!
//! Convention throughout: a set is the region where its function is `<= 0`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("circle radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("rectangle min corner {min:?} must be below max corner {max:?}")]
    BadRectangle { min: [f64; 2], max: [f64; 2] },
    #[error("half-space normal must be non-zero and finite")]
    BadNormal,
    #[error("non-finite shape parameter")]
    NonFinite,
    #[error("axis pair ({0}, {1}) is invalid for a {2}-D space")]
    BadAxisPair(usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Circle { center: [f64; 2], radius: f64 },
    Rectangle { min: [f64; 2], max: [f64; 2] },
    /// `{x | normal . x <= offset}`.
    HalfSpace { normal: [f64; 2], offset: f64 },
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

impl Shape {
    pub fn validate(&self) -> Result<(), GeometryError> {
        match *self {
            Shape::Circle { center, radius } => {
                if !center.iter().all(|c| c.is_finite()) || !radius.is_finite() {
                    return Err(GeometryError::NonFinite);
                }
                if radius <= 0.0 {
                    return Err(GeometryError::BadRadius(radius));
                }
            }
            Shape::Rectangle { min, max } => {
                if !min.iter().chain(&max).all(|c| c.is_finite()) {
                    return Err(GeometryError::NonFinite);
                }
                if min[0] >= max[0] || min[1] >= max[1] {
                    return Err(GeometryError::BadRectangle { min, max });
                }
            }
            Shape::HalfSpace { normal, offset } => {
                let n = norm(normal);
                if !n.is_finite() || n == 0.0 || !offset.is_finite() {
                    return Err(GeometryError::BadNormal);
                }
            }
        }
        Ok(())
    }

    /// Signed distance: negative inside, zero on the boundary.
    pub fn sdf(&self, x: [f64; 2]) -> f64 {
        match *self {
            Shape::Circle { center, radius } => {
                norm([x[0] - center[0], x[1] - center[1]]) - radius
            }
            Shape::Rectangle { min, max } => {
                let cx = 0.5 * (min[0] + max[0]);
                let cy = 0.5 * (min[1] + max[1]);
                let qx = (x[0] - cx).abs() - 0.5 * (max[0] - min[0]);
                let qy = (x[1] - cy).abs() - 0.5 * (max[1] - min[1]);
                let outside = norm([qx.max(0.0), qy.max(0.0)]);
                outside + qx.max(qy).min(0.0)
            }
            Shape::HalfSpace { normal, offset } => {
                let n = norm(normal);
                (normal[0] * x[0] + normal[1] * x[1] - offset) / n
            }
        }
    }

    /// Outward unit normal of the distance field at `x`.
    pub fn sdf_gradient(&self, x: [f64; 2]) -> [f64; 2] {
        const H: f64 = 1e-6;
        let gx = (self.sdf([x[0] + H, x[1]]) - self.sdf([x[0] - H, x[1]])) / (2.0 * H);
        let gy = (self.sdf([x[0], x[1] + H]) - self.sdf([x[0], x[1] - H])) / (2.0 * H);
        let n = norm([gx, gy]);
        if n > 0.0 {
            [gx / n, gy / n]
        } else {
            [0.0, 0.0]
        }
    }

    /// Closed-set segment intersection test.
    pub fn segment_intersects(&self, p: [f64; 2], q: [f64; 2]) -> bool {
        let d = [q[0] - p[0], q[1] - p[1]];
        match *self {
            Shape::Circle { center, radius } => {
                // Closest point on the segment to the center.
                let len2 = d[0] * d[0] + d[1] * d[1];
                let t = if len2 > 0.0 {
                    (((center[0] - p[0]) * d[0] + (center[1] - p[1]) * d[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let c = [p[0] + t * d[0], p[1] + t * d[1]];
                norm([c[0] - center[0], c[1] - center[1]]) <= radius
            }
            Shape::Rectangle { min, max } => {
                // Liang-Barsky clipping.
                let mut t0: f64 = 0.0;
                let mut t1: f64 = 1.0;
                for k in 0..2 {
                    if d[k] == 0.0 {
                        if p[k] < min[k] || p[k] > max[k] {
                            return false;
                        }
                    } else {
                        let a = (min[k] - p[k]) / d[k];
                        let b = (max[k] - p[k]) / d[k];
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                        if t0 > t1 {
                            return false;
                        }
                    }
                }
                true
            }
            Shape::HalfSpace { .. } => self.sdf(p) <= 0.0 || self.sdf(q) <= 0.0,
        }
    }
}

type Eval = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A set given by a level-set function (`<= 0` inside).
#[derive(Clone)]
pub struct ImplicitSet {
    eval: Arc<Eval>,
}

impl fmt::Debug for ImplicitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ImplicitSet")
    }
}

impl ImplicitSet {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ImplicitSet { eval: Arc::new(f) }
    }

    /// A planar shape over 2-D states.
    pub fn shape(shape: Shape) -> Self {
        ImplicitSet::new(move |x| shape.sdf([x[0], x[1]]))
    }

    /// The set containing nothing.
    pub fn empty() -> Self {
        ImplicitSet::new(|_| f64::INFINITY)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.eval(x) <= 0.0
    }

    pub fn union(&self, other: &ImplicitSet) -> ImplicitSet {
        let (a, b) = (self.clone(), other.clone());
        ImplicitSet::new(move |x| a.eval(x).min(b.eval(x)))
    }

    pub fn intersect(&self, other: &ImplicitSet) -> ImplicitSet {
        let (a, b) = (self.clone(), other.clone());
        ImplicitSet::new(move |x| a.eval(x).max(b.eval(x)))
    }

    pub fn complement(&self) -> ImplicitSet {
        let a = self.clone();
        ImplicitSet::new(move |x| -a.eval(x))
    }

    /// Union of any number of sets; empty input gives the empty set.
    pub fn union_all<'a>(sets: impl IntoIterator<Item = &'a ImplicitSet>) -> ImplicitSet {
        sets.into_iter()
            .fold(ImplicitSet::empty(), |acc, s| acc.union(s))
    }

    /// Embeds this planar set into a `dims`-D space, reading the point from
    /// coordinates `axes.0` and `axes.1`.
    pub fn lift(&self, axes: (usize, usize), dims: usize) -> Result<ImplicitSet, GeometryError> {
        check_axis_pair(axes, dims)?;
        let inner = self.clone();
        Ok(ImplicitSet::new(move |x| inner.eval(&[x[axes.0], x[axes.1]])))
    }
}

fn check_axis_pair(axes: (usize, usize), dims: usize) -> Result<(), GeometryError> {
    if axes.0 == axes.1 || axes.0 >= dims || axes.1 >= dims {
        return Err(GeometryError::BadAxisPair(axes.0, axes.1, dims));
    }
    Ok(())
}

/// `||x_a - x_b|| - radius`: non-positive when the two planar points selected
/// by `axes_a` and `axes_b` are within `radius` of each other.
pub fn pairwise_distance_set(
    axes_a: (usize, usize),
    axes_b: (usize, usize),
    radius: f64,
    dims: usize,
) -> Result<ImplicitSet, GeometryError> {
    check_axis_pair(axes_a, dims)?;
    check_axis_pair(axes_b, dims)?;
    let shared = [axes_a.0, axes_a.1]
        .iter()
        .any(|a| *a == axes_b.0 || *a == axes_b.1);
    if shared {
        return Err(GeometryError::BadAxisPair(axes_b.0, axes_b.1, dims));
    }
    if !(radius > 0.0) {
        return Err(GeometryError::BadRadius(radius));
    }
    Ok(ImplicitSet::new(move |x| {
        (x[axes_a.0] - x[axes_b.0]).hypot(x[axes_a.1] - x[axes_b.1]) - radius
    }))
}

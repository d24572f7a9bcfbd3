//! Planar rigid-body primitives: rotations, poses, angle wrapping, and the
//! field-of-view polygon with its signed distance function.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Wrap an angle to `[-pi, pi)`.
#[inline]
pub fn wrap_angle<T: Real>(theta: T) -> T {
    let two_pi = T::two_pi();
    theta - two_pi * ((theta + T::pi()) / two_pi).floor()
}

/// 2-D rotation matrix `R(theta) = [[cos, -sin], [sin, cos]]`.
#[inline]
pub fn rotation_matrix<T: Real>(theta: T) -> Matrix2<T> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Derivative of the rotation matrix with respect to the angle,
/// `dR/dtheta = [[-sin, -cos], [cos, -sin]]`.
#[inline]
pub fn rotation_matrix_derivative<T: Real>(theta: T) -> Matrix2<T> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Planar robot pose: position in meters and heading in radians.
///
/// The heading is kept wrapped to `[-pi, pi)`. The homogeneous matrix
/// `[[R(theta), p], [0, 1]]` is a derived view, see [`Pose2::matrix`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2<T: Real> {
    pub position: Vector2<T>,
    pub heading: T,
}

impl<T: Real> Pose2<T> {
    pub fn new(x: T, y: T, heading: T) -> Self {
        Pose2 {
            position: Vector2::new(x, y),
            heading: wrap_angle(heading),
        }
    }

    pub fn from_vector(v: &Vector3<T>) -> Self {
        Pose2::new(v.x, v.y, v.z)
    }

    /// Pose as the vector `[x, y, theta]`.
    pub fn to_vector(&self) -> Vector3<T> {
        Vector3::new(self.position.x, self.position.y, self.heading)
    }

    pub fn rotation(&self) -> Matrix2<T> {
        rotation_matrix(self.heading)
    }

    /// Homogeneous SE(2) matrix view of the pose.
    pub fn matrix(&self) -> Matrix3<T> {
        let r = self.rotation();
        Matrix3::new(
            r[(0, 0)],
            r[(0, 1)],
            self.position.x,
            r[(1, 0)],
            r[(1, 1)],
            self.position.y,
            T::zero(),
            T::zero(),
            T::one(),
        )
    }
}

/// Result of the closest-boundary-point query on a polygon.
struct NearestBoundary<T: Real> {
    distance: T,
    point: Vector2<T>,
    /// Distance to the second-closest edge, used for kink detection.
    second_distance: T,
}

/// Convex field-of-view polygon in the robot body frame.
///
/// Vertices are counterclockwise; convexity and a nonempty interior are
/// enforced at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FovPolygon<T: Real> {
    vertices: Vec<Vector2<T>>,
}

impl<T: Real> FovPolygon<T> {
    pub fn new(vertices: Vec<Vector2<T>>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::invalid(
                "FovPolygon.vertices",
                format!("need at least 3 vertices, got {}", vertices.len()),
            ));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::invalid("FovPolygon.vertices", "non-finite vertex"));
        }
        let n = vertices.len();
        let mut twice_area = T::zero();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let cross = (b - a).perp(&(c - b));
            if cross < T::zero() {
                return Err(Error::invalid(
                    "FovPolygon.vertices",
                    "vertices must be counterclockwise and convex",
                ));
            }
            twice_area += a.perp(&b);
        }
        if twice_area <= T::zero() {
            return Err(Error::invalid(
                "FovPolygon.vertices",
                "polygon has empty interior",
            ));
        }
        Ok(FovPolygon { vertices })
    }

    pub fn vertices(&self) -> &[Vector2<T>] {
        &self.vertices
    }

    /// Half-plane containment test; boundary points count as inside.
    pub fn contains(&self, q: &Vector2<T>) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            (b - a).perp(&(*q - a)) >= T::zero()
        })
    }

    fn nearest_boundary(&self, q: &Vector2<T>) -> NearestBoundary<T> {
        let n = self.vertices.len();
        let mut best = T::max_value().unwrap();
        let mut second = best;
        let mut point = self.vertices[0];
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let ab = b - a;
            let len_sq = ab.norm_squared();
            let t = if len_sq > T::zero() {
                ((*q - a).dot(&ab) / len_sq).clamp(T::zero(), T::one())
            } else {
                T::zero()
            };
            let proj = a + ab * t;
            let dist = (*q - proj).norm();
            // Strict comparison keeps the lowest edge index on ties.
            if dist < best {
                second = best;
                best = dist;
                point = proj;
            } else if dist < second {
                second = dist;
            }
        }
        NearestBoundary {
            distance: best,
            point,
            second_distance: second,
        }
    }

    /// Signed distance of a body-frame point to the polygon: negative
    /// inside, positive outside, zero on the boundary.
    pub fn signed_distance(&self, q: &Vector2<T>) -> T {
        let nearest = self.nearest_boundary(q);
        if self.contains(q) {
            -nearest.distance
        } else {
            nearest.distance
        }
    }

    /// Gradient of the signed distance: the unit vector from the nearest
    /// boundary point, sign-adjusted so it points in the direction of
    /// increasing distance.
    ///
    /// Returns the one-sided gradient of the nearest-edge branch together
    /// with a flag marking kink points (interior medial-axis ties and points
    /// exactly on the boundary), where the signed distance is not
    /// differentiable.
    pub fn signed_distance_gradient(&self, q: &Vector2<T>) -> (Vector2<T>, bool) {
        let nearest = self.nearest_boundary(q);
        let inside = self.contains(q);
        if nearest.distance <= T::default_epsilon() * lit(16.0) {
            // On the boundary: fall back to the nearest edge's outward normal.
            return (self.boundary_normal(q), true);
        }
        let dir = (*q - nearest.point) / nearest.distance;
        let grad = if inside { -dir } else { dir };
        // Interior points equidistant from two edges sit on the medial axis,
        // where only a one-sided gradient exists. Outside, the projection
        // onto a convex set is unique, so ties at vertices are benign.
        let tie = nearest.second_distance - nearest.distance
            <= lit::<T>(1e-9) * (T::one() + nearest.distance);
        (grad, inside && tie)
    }

    /// Outward unit normal of the edge nearest to `q`.
    fn boundary_normal(&self, q: &Vector2<T>) -> Vector2<T> {
        let n = self.vertices.len();
        let mut best = T::max_value().unwrap();
        let mut normal = Vector2::zeros();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let ab = b - a;
            let len_sq = ab.norm_squared();
            let t = if len_sq > T::zero() {
                ((*q - a).dot(&ab) / len_sq).clamp(T::zero(), T::one())
            } else {
                T::zero()
            };
            let proj = a + ab * t;
            let dist = (*q - proj).norm();
            if dist < best {
                best = dist;
                // CCW edges: (dy, -dx) points out of the polygon.
                let edge = ab / len_sq.sqrt().max(T::default_epsilon());
                normal = Vector2::new(edge.y, -edge.x);
            }
        }
        normal
    }
}

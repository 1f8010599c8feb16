use num_traits::Float;

use super::vec3::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Orthonormal tangent / bitangent / normal basis at a surface point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryFrame<S> {
    pub t: Vec3<S>,
    pub b: Vec3<S>,
    pub n: Vec3<S>,
    /// Set when the radial tangent was undefined and the fallback was used.
    pub degenerate: bool,
}

impl<S: Float> GeometryFrame<S> {
    /// Rows `(t, b, n)`.
    pub fn matrix(&self) -> Mat3<S> {
        Mat3 {
            rows: [self.t, self.b, self.n],
        }
    }

    /// Worst deviation from orthonormality over the three rows.
    pub fn orthonormality_error(&self) -> S {
        let one = S::one();
        [
            (self.t.dot(self.t) - one).abs(),
            (self.b.dot(self.b) - one).abs(),
            (self.n.dot(self.n) - one).abs(),
            self.t.dot(self.b).abs(),
            self.t.dot(self.n).abs(),
            self.b.dot(self.n).abs(),
        ]
        .into_iter()
        .fold(S::zero(), S::max)
    }

    pub fn det(&self) -> S {
        self.matrix().det()
    }

    /// Expresses a tangent-space vector in the frame's space.
    pub fn to_outer(&self, v: Vec3<S>) -> Vec3<S> {
        self.t * v.x + self.b * v.y + self.n * v.z
    }

    /// Applies a rotation to all three axes.
    pub fn rotated(&self, r: &Mat3<S>) -> Self {
        Self {
            t: r.mul_vec(self.t),
            b: r.mul_vec(self.b),
            n: r.mul_vec(self.n),
            degenerate: self.degenerate,
        }
    }
}

/// Relative magnitude below which the projected radial direction counts as
/// vanished.
const DEGENERATE_TOL: f64 = 1e-9;

/// Geometry tangent frame whose tangent follows the circle about the z-axis
/// through `p`, projected into the tangent plane of `n`:
/// `t = n x ([-p_y, p_x, 0] x n)`, `b = n x t`.
///
/// Where that projection vanishes (p on the z-axis, or the radial direction
/// parallel to `n`) the tangent falls back to the projection of `e_x`, or of
/// `e_y` when `n` is parallel to `e_x`; the frame is then flagged degenerate.
pub fn radial_z_tangent<S: Float>(p: Vec3<S>, n: Vec3<S>) -> Result<GeometryFrame<S>> {
    let n = n.normalized().ok_or(Error::Degenerate("zero normal"))?;
    let tol = S::from(DEGENERATE_TOL).expect("tolerance");
    let radial = Vec3::new(-p.y, p.x, S::zero());
    let rn = radial.norm();
    let projected = n.cross(radial.cross(n));
    let (t, degenerate) = if rn > S::zero() && projected.norm() > tol * rn {
        (projected * (S::one() / projected.norm()), false)
    } else {
        (fallback_tangent(n), true)
    };
    Ok(GeometryFrame {
        t,
        b: n.cross(t),
        n,
        degenerate,
    })
}

fn fallback_tangent<S: Float>(n: Vec3<S>) -> Vec3<S> {
    let (o, z) = (S::one(), S::zero());
    let tol = S::from(DEGENERATE_TOL).expect("tolerance");
    let ex = Vec3::new(o, z, z);
    let t = n.cross(ex.cross(n));
    if t.norm() > tol {
        return t * (o / t.norm());
    }
    let ey = Vec3::new(z, o, z);
    let t = n.cross(ey.cross(n));
    t * (o / t.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    #[test]
    fn normal_along_x_at_unit_x() {
        let f = radial_z_tangent(v(1.0, 0.0, 0.0), v(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(f.t, v(0.0, 1.0, 0.0));
        assert_eq!(f.b, v(0.0, 0.0, 1.0));
        assert_eq!(f.n, v(1.0, 0.0, 0.0));
        assert!(!f.degenerate);
    }

    #[test]
    fn normal_along_z_at_unit_x() {
        let f = radial_z_tangent(v(1.0, 0.0, 0.0), v(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(f.t, v(0.0, 1.0, 0.0));
        assert_eq!(f.b, v(-1.0, 0.0, 0.0));
        assert_eq!(f.n, v(0.0, 0.0, 1.0));
    }

    #[test]
    fn point_on_axis_uses_flagged_fallback() {
        let f = radial_z_tangent(v(0.0, 0.0, 5.0), v(0.0, 0.0, 1.0)).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.t, v(1.0, 0.0, 0.0));
        // Normal parallel to e_x switches to e_y.
        let f = radial_z_tangent(v(0.0, 0.0, 5.0), v(1.0, 0.0, 0.0)).unwrap();
        assert!(f.degenerate);
        assert!(f.t.max_abs_diff(v(0.0, 1.0, 0.0)) < 1e-15);
        assert!(f.orthonormality_error() < 1e-12);
    }

    #[test]
    fn radial_direction_parallel_to_normal_is_degenerate() {
        // p = (1,0,0) gives radial (0,1,0); choose n along it.
        let f = radial_z_tangent(v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0)).unwrap();
        assert!(f.degenerate);
        assert!((f.det() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_normal_is_an_error() {
        assert!(radial_z_tangent(v(1.0, 2.0, 0.0), v(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let f = radial_z_tangent(Vec3::new(1.0f32, 0.0, 0.0), Vec3::new(0.0f32, 0.0, 1.0)).unwrap();
        assert_eq!(f.b, Vec3::new(-1.0f32, 0.0, 0.0));
    }

    #[test]
    fn random_frames_are_right_handed_and_orthonormal() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let n = v(rng.normal(), rng.normal(), rng.normal()).normalized().unwrap();
            let p = v(rng.normal(), rng.normal(), rng.normal());
            let f = radial_z_tangent(p, n).unwrap();
            assert!(f.orthonormality_error() < 1e-12);
            assert!((f.det() - 1.0).abs() < 1e-12);
        }
    }
}

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

pub type Vec3f = Vec3<f32>;
pub type Vec3d = Vec3<f64>;

impl<S: Float> Vec3<S> {
    pub const fn new(x: S, y: S, z: S) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(S::zero(), S::zero(), S::zero())
    }

    pub fn dot(self, o: Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> S {
        self.dot(self).sqrt()
    }

    /// `None` for the zero vector (or anything too short to normalize).
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > S::min_positive_value() && n.is_finite() {
            Some(self * (S::one() / n))
        } else {
            None
        }
    }

    pub fn max_abs_diff(self, o: Self) -> S {
        (self.x - o.x).abs().max((self.y - o.y).abs()).max((self.z - o.z).abs())
    }

    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    pub fn cast<T: Float>(self) -> Vec3<T> {
        Vec3::new(
            T::from(self.x).expect("cast"),
            T::from(self.y).expect("cast"),
            T::from(self.z).expect("cast"),
        )
    }
}

impl<S: Float> Add for Vec3<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Float> AddAssign for Vec3<S> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: Float> Sub for Vec3<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Float> Mul<S> for Vec3<S> {
    type Output = Self;
    fn mul(self, s: S) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<S: Float> Neg for Vec3<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3<S> {
    pub rows: [Vec3<S>; 3],
}

impl<S: Float> Mat3<S> {
    pub fn identity() -> Self {
        let (o, z) = (S::one(), S::zero());
        Self {
            rows: [Vec3::new(o, z, z), Vec3::new(z, o, z), Vec3::new(z, z, o)],
        }
    }

    /// Rotation by `angle` radians about +z.
    pub fn rot_z(angle: S) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (S::one(), S::zero());
        Self {
            rows: [Vec3::new(c, -s, z), Vec3::new(s, c, z), Vec3::new(z, z, o)],
        }
    }

    /// Rodrigues rotation about a unit `axis`.
    pub fn from_axis_angle(axis: Vec3<S>, angle: S) -> Self {
        let (s, c) = angle.sin_cos();
        let t = S::one() - c;
        let Vec3 { x, y, z } = axis;
        Self {
            rows: [
                Vec3::new(t * x * x + c, t * x * y - s * z, t * x * z + s * y),
                Vec3::new(t * x * y + s * z, t * y * y + c, t * y * z - s * x),
                Vec3::new(t * x * z - s * y, t * y * z + s * x, t * z * z + c),
            ],
        }
    }

    pub fn mul_vec(&self, v: Vec3<S>) -> Vec3<S> {
        Vec3::new(self.rows[0].dot(v), self.rows[1].dot(v), self.rows[2].dot(v))
    }

    pub fn transpose(&self) -> Self {
        let r = &self.rows;
        Self {
            rows: [
                Vec3::new(r[0].x, r[1].x, r[2].x),
                Vec3::new(r[0].y, r[1].y, r[2].y),
                Vec3::new(r[0].z, r[1].z, r[2].z),
            ],
        }
    }

    pub fn det(&self) -> S {
        self.rows[0].dot(self.rows[1].cross(self.rows[2]))
    }
}

//! Solid (object-space) procedural textures.

use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryFrame, Vec3, Vec3d};
use crate::rng::mix64;
use crate::shading::Texel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "program", rename_all = "snake_case")]
pub enum TextureProgram {
    Constant,
    Checker { frequency: f64 },
    ValueNoise { frequency: f64, seed: u64 },
    Stripes { frequency: f64, direction: Vec3d },
}

pub const TEXTURE_NAMES: [&str; 4] = ["constant", "checker", "noise", "stripes"];

impl TextureProgram {
    pub fn index(&self) -> usize {
        match self {
            TextureProgram::Constant => 0,
            TextureProgram::Checker { .. } => 1,
            TextureProgram::ValueNoise { .. } => 2,
            TextureProgram::Stripes { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        TEXTURE_NAMES[self.index()]
    }

    /// Blend weight in `[0, 1]` at an object-space point.
    pub fn value(&self, p: Vec3d) -> f64 {
        match *self {
            TextureProgram::Constant => 0.0,
            TextureProgram::Checker { frequency } => {
                let s = (p.x * frequency).floor() + (p.y * frequency).floor() + (p.z * frequency).floor();
                s.rem_euclid(2.0)
            }
            TextureProgram::ValueNoise { frequency, seed } => value_noise(p * frequency, seed),
            TextureProgram::Stripes { frequency, direction } => {
                0.5 + 0.5 * (std::f64::consts::TAU * frequency * direction.dot(p)).sin()
            }
        }
    }

    /// Central-difference gradient of [`Self::value`].
    pub fn gradient(&self, p: Vec3d) -> Vec3d {
        const H: f64 = 1e-4;
        let d = |e: Vec3d| (self.value(p + e * H) - self.value(p - e * H)) / (2.0 * H);
        Vec3::new(
            d(Vec3::new(1.0, 0.0, 0.0)),
            d(Vec3::new(0.0, 1.0, 0.0)),
            d(Vec3::new(0.0, 0.0, 1.0)),
        )
    }
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = mix64(seed ^ mix64((ix as u64) ^ mix64((iy as u64) ^ mix64(iz as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise on the integer lattice with smoothstep weights.
pub fn value_noise(p: Vec3d, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (smooth(p.x - fx), smooth(p.y - fy), smooth(p.z - fz));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut acc = [0.0; 4];
    for (k, slot) in acc.iter_mut().enumerate() {
        let (dy, dz) = ((k & 1) as i64, (k >> 1) as i64);
        *slot = lerp(
            lattice(ix, iy + dy, iz + dz, seed),
            lattice(ix + 1, iy + dy, iz + dz, seed),
            tx,
        );
    }
    lerp(lerp(acc[0], acc[1], ty), lerp(acc[2], acc[3], ty), tz)
}

/// Per-object material ranges blended by the texture value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [[f64; 3]; 2],
    pub roughness: [f64; 2],
    pub metallic: [f64; 2],
    pub bump_amplitude: f64,
}

impl Material {
    /// Texel at object-space point `p` whose local geometry frame is `frame`.
    /// The bump tilts against the texture gradient projected onto the frame.
    pub fn texel(&self, program: &TextureProgram, p: Vec3d, frame: &GeometryFrame<f64>) -> Texel<f64> {
        let s = program.value(p);
        let mix = |pair: [f64; 2]| pair[0] + (pair[1] - pair[0]) * s;
        let albedo = [0, 1, 2].map(|c| mix([self.albedo[0][c], self.albedo[1][c]]));
        let g = program.gradient(p);
        let bump = Vec3::new(
            -self.bump_amplitude * g.dot(frame.t),
            -self.bump_amplitude * g.dot(frame.b),
            1.0,
        )
        .normalized()
        .expect("z component is one");
        Texel {
            albedo,
            roughness: mix(self.roughness),
            metallic: mix(self.metallic),
            bump,
        }
    }
}

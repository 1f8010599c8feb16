//! The fixed rendering function: basecolor-metallic Cook-Torrance shading of
//! a PBR stack under camera-colocated lighting.
//!
//! Shading happens in view space with a distant viewer, so `v = (0, 0, 1)` at
//! every pixel. Output is linear, exposure 1, clamped to `[0, 1]`, with an
//! exactly black background.

use num_traits::{Float, FloatConst};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FrameImage, GeometryFrame, Vec3, Vec3d};
use crate::raster::Raster;

pub const PBR_CHANNELS: usize = 8;
pub const ALBEDO: usize = 0;
pub const ROUGHNESS: usize = 3;
pub const METALLIC: usize = 4;
pub const BUMP: usize = 5;

pub const DIELECTRIC_F0: f64 = 0.04;
pub const DENOM_FLOOR: f64 = 1e-4;
/// Smallest GGX `alpha`; keeps `D` finite for perfectly smooth texels.
pub const MIN_ALPHA: f64 = 1e-3;
pub const EXPOSURE: f64 = 1.0;
/// Tolerance on the unit length of foreground bump vectors.
pub const BUMP_UNIT_TOL: f64 = 1e-3;

/// One texel of a PBR stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texel<S> {
    pub albedo: [S; 3],
    pub roughness: S,
    pub metallic: S,
    /// Tangent-space normal offset, `z > 0` on the foreground.
    pub bump: Vec3<S>,
}

impl<S: Float> Texel<S> {
    pub fn flat(albedo: [S; 3], roughness: S, metallic: S) -> Self {
        let (o, z) = (S::one(), S::zero());
        Self {
            albedo,
            roughness,
            metallic,
            bump: Vec3::new(z, z, o),
        }
    }
}

/// An 8-channel image: albedo rgb, roughness, metallic, bump xyz.
#[derive(Clone, Debug, PartialEq)]
pub struct PbrStack {
    pub raster: Raster,
}

impl PbrStack {
    pub fn new(raster: Raster) -> Result<Self> {
        if raster.channels != PBR_CHANNELS {
            return Err(Error::shape("pbr stack", &[PBR_CHANNELS], &[raster.channels]));
        }
        Ok(Self { raster })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            raster: Raster::zeros(PBR_CHANNELS, height, width),
        }
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn texel(&self, i: usize) -> Texel<f64> {
        let g = |c| self.raster.get(c, i) as f64;
        Texel {
            albedo: [g(ALBEDO), g(ALBEDO + 1), g(ALBEDO + 2)],
            roughness: g(ROUGHNESS),
            metallic: g(METALLIC),
            bump: Vec3::new(g(BUMP), g(BUMP + 1), g(BUMP + 2)),
        }
    }

    pub fn set_texel(&mut self, i: usize, t: &Texel<f64>) {
        let vals = [
            t.albedo[0],
            t.albedo[1],
            t.albedo[2],
            t.roughness,
            t.metallic,
            t.bump.x,
            t.bump.y,
            t.bump.z,
        ];
        for (c, v) in vals.into_iter().enumerate() {
            self.raster.set(c, i, v as f32);
        }
    }

    /// Checks channel ranges everywhere and unit, outward bumps on the
    /// foreground.
    pub fn validate(&self, mask: &[f32]) -> Result<()> {
        if mask.len() != self.raster.pixels() {
            return Err(Error::shape("pbr validate", &[self.raster.pixels()], &[mask.len()]));
        }
        for i in 0..self.raster.pixels() {
            let t = self.texel(i);
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !t.albedo.iter().all(|&a| unit(a)) || !unit(t.roughness) || !unit(t.metallic) {
                return Err(Error::invalid(format!("pbr texel {i} out of [0, 1]")));
            }
            if t.bump.to_array().iter().any(|b| !(-1.0..=1.0).contains(b)) {
                return Err(Error::invalid(format!("bump texel {i} out of [-1, 1]")));
            }
            if mask[i] > 0.5 && ((t.bump.norm() - 1.0).abs() > BUMP_UNIT_TOL || t.bump.z <= 0.0) {
                return Err(Error::invalid(format!("bump texel {i} is not a unit outward vector")));
            }
        }
        Ok(())
    }

    /// Maps to the symmetric range used by diffusion: `2x - 1` for the five
    /// material channels, bump unchanged.
    pub fn to_signed(&self) -> Raster {
        let mut r = self.raster.clone();
        for c in 0..BUMP {
            r.plane_mut(c).iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        }
        r
    }

    /// Inverse of [`Self::to_signed`] that also projects onto valid ranges:
    /// material channels clamped to `[0, 1]`, foreground bumps renormalized
    /// with `z` kept positive, background bumps zeroed.
    pub fn from_signed(signed: &Raster, mask: &[f32]) -> Result<Self> {
        let mut stack = Self::new(signed.clone())?;
        for c in 0..BUMP {
            stack
                .raster
                .plane_mut(c)
                .iter_mut()
                .for_each(|v| *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0));
        }
        for (i, &m) in mask.iter().enumerate() {
            let mut t = stack.texel(i);
            t.bump = if m > 0.5 { project_bump(t.bump) } else { Vec3::zero() };
            stack.set_texel(i, &t);
        }
        Ok(stack)
    }
}

/// Smallest tangent-space `z` a projected bump keeps.
const MIN_BUMP_Z: f64 = 0.05;

/// Nearest unit vector with `z >= MIN_BUMP_Z`; degenerate input maps to +z.
pub fn project_bump(b: Vec3d) -> Vec3d {
    let lifted = Vec3::new(b.x, b.y, b.z.max(MIN_BUMP_Z));
    let Some(u) = lifted.normalized() else {
        return Vec3::new(0.0, 0.0, 1.0);
    };
    if u.z >= MIN_BUMP_Z {
        return u;
    }
    let xy = (u.x * u.x + u.y * u.y).sqrt();
    let s = (1.0 - MIN_BUMP_Z * MIN_BUMP_Z).sqrt() / xy;
    Vec3::new(u.x * s, u.y * s, MIN_BUMP_Z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    /// Unit direction towards the light, in view space.
    pub direction: Vec3d,
    pub intensity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightRig {
    pub lights: Vec<DirectionalLight>,
    pub ambient: [f64; 3],
}

impl Default for LightRig {
    /// One white key light along the view direction plus a dim ambient term.
    fn default() -> Self {
        Self {
            lights: vec![DirectionalLight {
                direction: Vec3::new(0.0, 0.0, 1.0),
                intensity: [2.8; 3],
            }],
            ambient: [0.08; 3],
        }
    }
}

impl LightRig {
    pub fn dark() -> Self {
        Self {
            lights: vec![DirectionalLight {
                direction: Vec3::new(0.0, 0.0, 1.0),
                intensity: [0.0; 3],
            }],
            ambient: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.lights {
            if (l.direction.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("light direction must be unit length"));
            }
            if l.intensity.iter().any(|&i| !(i >= 0.0)) {
                return Err(Error::invalid("light intensity must be non-negative"));
            }
        }
        if self.ambient.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::invalid("ambient must be non-negative"));
        }
        Ok(())
    }

    /// Every intensity (ambient included) multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lights: self
                .lights
                .iter()
                .map(|l| DirectionalLight {
                    direction: l.direction,
                    intensity: l.intensity.map(|i| i * k),
                })
                .collect(),
            ambient: self.ambient.map(|a| a * k),
        }
    }
}

/// Shading normal `normalize(t b_x + b b_y + n b_z)`.
pub fn apply_bump<S: Float>(frame: &GeometryFrame<S>, bump: Vec3<S>) -> Result<Vec3<S>> {
    if bump.z < S::zero() {
        return Err(Error::Degenerate("bump points into the surface"));
    }
    frame
        .to_outer(bump)
        .normalized()
        .ok_or(Error::Degenerate("bump vector vanishes"))
}

/// `F0 = lerp(0.04, albedo, metallic)`.
pub fn base_reflectance<S: Float>(albedo: [S; 3], metallic: S) -> [S; 3] {
    let d = S::from(DIELECTRIC_F0).expect("constant");
    albedo.map(|a| d + (a - d) * metallic)
}

/// Reflectance (before light intensity and cosine) of the diffuse lobe plus
/// a GGX / height-correlated Smith / Schlick specular lobe.
pub fn brdf_eval<S: Float + FloatConst>(
    albedo: [S; 3],
    roughness: S,
    metallic: S,
    n: Vec3<S>,
    v: Vec3<S>,
    l: Vec3<S>,
) -> [S; 3] {
    let (zero, one) = (S::zero(), S::one());
    let lit = |x: f64| S::from(x).expect("constant");
    let nl = n.dot(l);
    if nl <= zero {
        return [zero; 3];
    }
    let nv = n.dot(v).max(lit(DENOM_FLOOR));
    let diffuse = albedo.map(|a| (one - metallic) * a / S::PI());
    let Some(h) = (v + l).normalized() else {
        return diffuse;
    };
    let nh = n.dot(h).max(zero);
    let vh = v.dot(h).max(zero);

    let alpha = (roughness * roughness).max(lit(MIN_ALPHA));
    let a2 = alpha * alpha;
    let q = nh * nh * (a2 - one) + one;
    let d = a2 / (S::PI() * q * q);
    let sv = (nv * nv + a2 * (one - nv * nv)).sqrt();
    let sl = (nl * nl + a2 * (one - nl * nl)).sqrt();
    let g = lit(2.0) * nv * nl / (nl * sv + nv * sl);
    let w = (one - vh).powi(5);
    let spec = d * g / (lit(4.0) * nv * nl).max(lit(DENOM_FLOOR));
    let f0 = base_reflectance(albedo, metallic);
    [0, 1, 2].map(|c| diffuse[c] + spec * (f0[c] + (one - f0[c]) * w))
}

/// Pre-clamp radiance of one foreground texel with shading normal `ns`.
pub fn shade_texel(t: &Texel<f64>, ns: Vec3d, rig: &LightRig) -> [f64; 3] {
    let v = Vec3::new(0.0, 0.0, 1.0);
    let mut out = [0, 1, 2].map(|c| rig.ambient[c] * t.albedo[c]);
    for light in &rig.lights {
        let cos = ns.dot(light.direction).max(0.0);
        if cos == 0.0 {
            continue;
        }
        let f = brdf_eval(t.albedo, t.roughness, t.metallic, ns, v, light.direction);
        for c in 0..3 {
            out[c] += f[c] * light.intensity[c] * cos;
        }
    }
    out
}

/// Unclamped radiance after exposure. `frames` must be in view space.
pub fn render_radiance(pbr: &PbrStack, frames: &FrameImage, mask: &[f32], rig: &LightRig) -> Result<Raster> {
    let (h, w) = (pbr.height(), pbr.width());
    if (frames.height, frames.width) != (h, w) || mask.len() != h * w {
        return Err(Error::shape(
            "render",
            &[h, w],
            &[frames.height, frames.width, mask.len()],
        ));
    }
    rig.validate()?;
    let mut out = Raster::zeros(3, h, w);
    for i in 0..h * w {
        if mask[i] <= 0.5 {
            continue;
        }
        let Some(frame) = frames.frames[i] else {
            return Err(Error::invalid(format!("foreground pixel {i} has no frame")));
        };
        let t = pbr.texel(i);
        let ns = apply_bump(&frame, t.bump)?;
        let rad = shade_texel(&t, ns, rig);
        for (c, r) in rad.into_iter().enumerate() {
            out.set(c, i, (r * EXPOSURE) as f32);
        }
    }
    Ok(out)
}

/// The rendering function: [`render_radiance`] clamped to `[0, 1]`.
pub fn render(pbr: &PbrStack, frames: &FrameImage, mask: &[f32], rig: &LightRig) -> Result<Raster> {
    let mut out = render_radiance(pbr, frames, mask, rig)?;
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

//! Analytic surfaces, a pinhole camera, and per-pixel ray casting.

use serde::{Deserialize, Serialize};

use super::frame::{radial_z_tangent, GeometryFrame};
use super::vec3::{Mat3, Vec3d};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurfaceKind {
    Sphere {
        radius: f64,
    },
    Box {
        half: Vec3d,
    },
    /// `|x/a|^e + |y/b|^e + |z/c|^e = 1`
    Superquadric {
        radii: Vec3d,
        exponent: f64,
    },
    /// Segment along local z from `-half_height` to `half_height`.
    Capsule {
        radius: f64,
        half_height: f64,
    },
}

impl SurfaceKind {
    pub fn token(&self) -> usize {
        match self {
            SurfaceKind::Sphere { .. } => 0,
            SurfaceKind::Box { .. } => 1,
            SurfaceKind::Superquadric { .. } => 2,
            SurfaceKind::Capsule { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        ["sphere", "box", "superquadric", "capsule"][self.token()]
    }

    fn bound_half(&self) -> Vec3d {
        match *self {
            SurfaceKind::Sphere { radius } => Vec3d::new(radius, radius, radius),
            SurfaceKind::Box { half } => half,
            SurfaceKind::Superquadric { radii, .. } => radii,
            SurfaceKind::Capsule { radius, half_height } => Vec3d::new(radius, radius, radius + half_height),
        }
    }
}

/// Rigid placement: `world = rotation * local + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3<f64>,
    pub translation: Vec3d,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3d::zero(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub kind: SurfaceKind,
    pub pose: Pose,
}

/// First intersection of a ray with a surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub world: Vec3d,
    pub local: Vec3d,
    pub local_normal: Vec3d,
    pub world_normal: Vec3d,
}

impl Surface {
    pub fn new(kind: SurfaceKind) -> Self {
        Self {
            kind,
            pose: Pose::default(),
        }
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = pose;
        self
    }

    pub fn intersect(&self, origin: Vec3d, dir: Vec3d) -> Option<Hit> {
        let rt = self.pose.rotation.transpose();
        let o = rt.mul_vec(origin - self.pose.translation);
        let d = rt.mul_vec(dir);
        let (t, local_normal) = match self.kind {
            SurfaceKind::Sphere { radius } => sphere_hit(o, d, Vec3d::zero(), radius)?,
            SurfaceKind::Box { half } => box_hit(o, d, half)?,
            SurfaceKind::Superquadric { radii, exponent } => superquadric_hit(o, d, radii, exponent)?,
            SurfaceKind::Capsule { radius, half_height } => capsule_hit(o, d, radius, half_height)?,
        };
        let local = o + d * t;
        Some(Hit {
            distance: t,
            world: origin + dir * t,
            local,
            local_normal,
            world_normal: self.pose.rotation.mul_vec(local_normal),
        })
    }

    /// World-space geometry frame at a hit, built in object-local coordinates.
    pub fn frame_at(&self, hit: &Hit) -> Result<GeometryFrame<f64>> {
        Ok(radial_z_tangent(hit.local, hit.local_normal)?.rotated(&self.pose.rotation))
    }
}

const EPS_T: f64 = 1e-9;

fn sphere_hit(o: Vec3d, d: Vec3d, c: Vec3d, r: f64) -> Option<(f64, Vec3d)> {
    let oc = o - c;
    let a = d.dot(d);
    let b = oc.dot(d);
    let disc = b * b - a * (oc.dot(oc) - r * r);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > EPS_T)?;
    let n = (o + d * t - c).normalized()?;
    Some((t, n))
}

fn box_hit(o: Vec3d, d: Vec3d, half: Vec3d) -> Option<(f64, Vec3d)> {
    let (oa, da, ha) = (o.to_array(), d.to_array(), half.to_array());
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for i in 0..3 {
        if da[i].abs() < 1e-15 {
            if oa[i].abs() > ha[i] {
                return None;
            }
            continue;
        }
        let t1 = (-ha[i] - oa[i]) / da[i];
        let t2 = (ha[i] - oa[i]) / da[i];
        let (near, far, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if near > tmin {
            tmin = near;
            axis = i;
            sign = s;
        }
        tmax = tmax.min(far);
    }
    if tmin > tmax || tmin <= EPS_T {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((tmin, Vec3d::new(n[0], n[1], n[2])))
}

fn capsule_hit(o: Vec3d, d: Vec3d, r: f64, h: f64) -> Option<(f64, Vec3d)> {
    let mut best: Option<(f64, Vec3d)> = None;
    let mut keep = |cand: Option<(f64, Vec3d)>| {
        if let Some((t, n)) = cand {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, n));
            }
        }
    };
    // Cylinder wall.
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                let z = o.z + d.z * t;
                if t > EPS_T && z.abs() <= h {
                    let p = o + d * t;
                    keep(Vec3d::new(p.x, p.y, 0.0).normalized().map(|n| (t, n)));
                    break;
                }
            }
        }
    }
    // End caps.
    for cz in [-h, h] {
        if let Some((t, n)) = sphere_hit(o, d, Vec3d::new(0.0, 0.0, cz), r) {
            let z = o.z + d.z * t;
            if (cz > 0.0 && z >= h) || (cz < 0.0 && z <= -h) {
                keep(Some((t, n)));
            }
        }
    }
    best
}

fn superquadric_value(p: Vec3d, radii: Vec3d, e: f64) -> f64 {
    (p.x / radii.x).abs().powf(e) + (p.y / radii.y).abs().powf(e) + (p.z / radii.z).abs().powf(e) - 1.0
}

fn superquadric_normal(p: Vec3d, radii: Vec3d, e: f64) -> Option<Vec3d> {
    let g = |v: f64, r: f64| e * (v / r).abs().powf(e - 1.0) * v.signum() / r;
    Vec3d::new(g(p.x, radii.x), g(p.y, radii.y), g(p.z, radii.z)).normalized()
}

fn superquadric_hit(o: Vec3d, d: Vec3d, radii: Vec3d, e: f64) -> Option<(f64, Vec3d)> {
    let kind = SurfaceKind::Superquadric { radii, exponent: e };
    let (t0, t1, _) = slab_range(o, d, kind.bound_half() * 1.001)?;
    let t0 = t0.max(EPS_T);
    if t1 <= t0 {
        return None;
    }
    const STEPS: usize = 256;
    let f = |t: f64| superquadric_value(o + d * t, radii, e);
    let dt = (t1 - t0) / STEPS as f64;
    let mut prev_t = t0;
    let mut prev = f(t0);
    if prev <= 0.0 {
        return None; // origin inside
    }
    for i in 1..=STEPS {
        let t = t0 + dt * i as f64;
        let v = f(t);
        if v <= 0.0 {
            let (mut lo, mut hi) = (prev_t, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let th = 0.5 * (lo + hi);
            return superquadric_normal(o + d * th, radii, e).map(|n| (th, n));
        }
        prev_t = t;
        prev = v;
    }
    let _ = prev;
    None
}

fn slab_range(o: Vec3d, d: Vec3d, half: Vec3d) -> Option<(f64, f64, usize)> {
    let (oa, da, ha) = (o.to_array(), d.to_array(), half.to_array());
    let (mut tmin, mut tmax, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for i in 0..3 {
        if da[i].abs() < 1e-15 {
            if oa[i].abs() > ha[i] {
                return None;
            }
            continue;
        }
        let t1 = (-ha[i] - oa[i]) / da[i];
        let t2 = (ha[i] - oa[i]) / da[i];
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if near > tmin {
            tmin = near;
            axis = i;
        }
        tmax = tmax.min(far);
    }
    (tmin <= tmax && tmax > 0.0).then_some((tmin, tmax, axis))
}

/// Pinhole camera. View space is right-handed with +z pointing back toward the
/// camera, +y up, +x right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3d,
    pub look_at: Vec3d,
    pub up: Vec3d,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(position: Vec3d, look_at: Vec3d, up: Vec3d, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::invalid(format!("field of view {fov_y} outside (0, pi)")));
        }
        if width < 8 || height < 8 {
            return Err(Error::invalid(format!("resolution {width}x{height} below 8x8")));
        }
        let cam = Self {
            position,
            look_at,
            up,
            fov_y,
            width,
            height,
        };
        cam.basis()?;
        Ok(cam)
    }

    /// Rows are the view-space axes (right, up, back) in world coordinates,
    /// so `basis * v` maps a world vector into view space.
    pub fn basis(&self) -> Result<Mat3<f64>> {
        let back = (self.position - self.look_at)
            .normalized()
            .ok_or(Error::Degenerate("camera at its look-at point"))?;
        let right = self
            .up
            .cross(back)
            .normalized()
            .ok_or(Error::Degenerate("camera up parallel to view direction"))?;
        let up = back.cross(right);
        Ok(Mat3 {
            rows: [right, up, back],
        })
    }

    /// World-space unit direction through the centre of pixel (`row`, `col`).
    pub fn ray(&self, row: usize, col: usize) -> Vec3d {
        let basis = self.basis().expect("validated camera");
        let tan = (0.5 * self.fov_y).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tan * aspect;
        let y = (1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0) * tan;
        let [right, up, back] = basis.rows;
        (right * x + up * y - back).normalized().expect("finite ray")
    }
}

/// Per-pixel ray-cast result for one surface/camera pair.
#[derive(Clone, Debug)]
pub struct ScreenGeometry {
    pub width: usize,
    pub height: usize,
    pub hits: Vec<Option<Hit>>,
}

impl ScreenGeometry {
    pub fn cast(surface: Option<&Surface>, camera: &Camera) -> Self {
        let mut hits = Vec::with_capacity(camera.width * camera.height);
        for row in 0..camera.height {
            for col in 0..camera.width {
                hits.push(surface.and_then(|s| s.intersect(camera.position, camera.ray(row, col))));
            }
        }
        Self {
            width: camera.width,
            height: camera.height,
            hits,
        }
    }

    pub fn mask(&self) -> Vec<f32> {
        self.hits.iter().map(|h| if h.is_some() { 1.0 } else { 0.0 }).collect()
    }
}

/// View-space unit normals (zero off the object) and the foreground mask.
#[derive(Clone, Debug)]
pub struct NormalImage {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vec3d>,
    pub mask: Vec<f32>,
}

pub fn render_screen_normals(surface: Option<&Surface>, camera: &Camera) -> Result<NormalImage> {
    let geo = ScreenGeometry::cast(surface, camera);
    normals_from(&geo, camera)
}

pub fn normals_from(geo: &ScreenGeometry, camera: &Camera) -> Result<NormalImage> {
    let basis = camera.basis()?;
    let normals = geo
        .hits
        .iter()
        .map(|h| h.map_or(Vec3d::zero(), |h| basis.mul_vec(h.world_normal)))
        .collect();
    Ok(NormalImage {
        width: geo.width,
        height: geo.height,
        normals,
        mask: geo.mask(),
    })
}

/// Per-pixel world-space geometry frames (`None` on background).
#[derive(Clone, Debug)]
pub struct FrameImage {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Option<GeometryFrame<f64>>>,
}

impl FrameImage {
    /// Re-expresses every frame in the camera's view space.
    pub fn to_view(&self, camera: &Camera) -> Result<Self> {
        let basis = camera.basis()?;
        Ok(Self {
            width: self.width,
            height: self.height,
            frames: self.frames.iter().map(|f| f.map(|f| f.rotated(&basis))).collect(),
        })
    }
}

pub fn frame_image(surface: Option<&Surface>, camera: &Camera) -> Result<FrameImage> {
    frames_from(surface, &ScreenGeometry::cast(surface, camera))
}

pub fn frames_from(surface: Option<&Surface>, geo: &ScreenGeometry) -> Result<FrameImage> {
    let frames = geo
        .hits
        .iter()
        .map(|h| match (h, surface) {
            (Some(h), Some(s)) => s.frame_at(h).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    Ok(FrameImage {
        width: geo.width,
        height: geo.height,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(pos: Vec3d, res: usize) -> Camera {
        Camera::new(pos, Vec3d::zero(), Vec3d::new(0.0, 0.0, 1.0), 0.8, res, res).unwrap()
    }

    #[test]
    fn camera_rejects_bad_fov_and_resolution() {
        let p = Vec3d::new(3.0, 0.0, 0.0);
        let up = Vec3d::new(0.0, 0.0, 1.0);
        assert!(Camera::new(p, Vec3d::zero(), up, 0.0, 16, 16).is_err());
        assert!(Camera::new(p, Vec3d::zero(), up, 3.2, 16, 16).is_err());
        assert!(Camera::new(p, Vec3d::zero(), up, 0.8, 4, 16).is_err());
    }

    #[test]
    fn centred_sphere_faces_camera_at_centre_pixel() {
        let c = cam(Vec3d::new(3.0, 0.0, 0.0), 33);
        let s = Surface::new(SurfaceKind::Sphere { radius: 1.0 });
        let img = render_screen_normals(Some(&s), &c).unwrap();
        let centre = img.normals[16 * 33 + 16];
        assert!(centre.max_abs_diff(Vec3d::new(0.0, 0.0, 1.0)) < 1e-3, "{centre:?}");
    }

    #[test]
    fn empty_scene_is_all_background() {
        let c = cam(Vec3d::new(3.0, 0.0, 0.0), 8);
        let img = render_screen_normals(None, &c).unwrap();
        assert!(img.mask.iter().all(|&m| m == 0.0));
        assert!(img.normals.iter().all(|n| *n == Vec3d::zero()));
    }

    #[test]
    fn foreground_normals_are_unit_for_every_kind() {
        let kinds = [
            SurfaceKind::Sphere { radius: 0.8 },
            SurfaceKind::Box {
                half: Vec3d::new(0.6, 0.5, 0.7),
            },
            SurfaceKind::Superquadric {
                radii: Vec3d::new(0.7, 0.6, 0.8),
                exponent: 4.0,
            },
            SurfaceKind::Capsule {
                radius: 0.4,
                half_height: 0.5,
            },
        ];
        let c = Camera::new(
            Vec3d::new(2.5, 1.0, 1.0),
            Vec3d::zero(),
            Vec3d::new(0.0, 0.0, 1.0),
            0.8,
            24,
            24,
        )
        .unwrap();
        for k in kinds {
            let s = Surface::new(k).with_pose(Pose {
                rotation: Mat3::rot_z(0.4),
                translation: Vec3d::zero(),
            });
            let img = render_screen_normals(Some(&s), &c).unwrap();
            let fg = img.mask.iter().filter(|&&m| m == 1.0).count();
            assert!(fg > 20, "{} has {fg} foreground pixels", k.name());
            for (n, m) in img.normals.iter().zip(&img.mask) {
                if *m == 1.0 {
                    assert!((n.norm() - 1.0).abs() < 1e-6);
                    // Visible surfaces face the camera.
                    assert!(n.z > -1e-6, "{} normal {n:?}", k.name());
                }
            }
        }
    }

    /// Independent oracle: a pixel is foreground iff its ray passes within the
    /// sphere radius of the centre, in front of the camera.
    #[test]
    fn offset_sphere_mask_matches_ray_distance_oracle_and_sits_left() {
        let c = cam(Vec3d::new(3.0, 0.0, 0.0), 8);
        // Camera looks along -x with right = up x back = (0,-1,0)*... compute
        // "left" through the basis instead of guessing.
        let right = c.basis().unwrap().rows[0];
        let centre = right * -0.6;
        let s = Surface::new(SurfaceKind::Sphere { radius: 0.5 }).with_pose(Pose {
            rotation: Mat3::identity(),
            translation: centre,
        });
        let img = render_screen_normals(Some(&s), &c).unwrap();
        let mut sum_col = 0.0;
        let mut count = 0.0;
        for row in 0..8 {
            for col in 0..8 {
                let d = c.ray(row, col);
                let oc = centre - c.position;
                let along = oc.dot(d);
                let dist2 = oc.dot(oc) - along * along;
                let oracle = along > 0.0 && dist2 <= 0.25;
                assert_eq!(img.mask[row * 8 + col] == 1.0, oracle, "pixel {row},{col}");
                if oracle {
                    sum_col += col as f64 + 0.5;
                    count += 1.0;
                }
            }
        }
        assert!(count > 0.0);
        assert!(sum_col / count < 4.0, "centroid column {}", sum_col / count);
    }

    #[test]
    fn world_frame_is_independent_of_viewing_camera() {
        let s = Surface::new(SurfaceKind::Superquadric {
            radii: Vec3d::new(0.7, 0.6, 0.8),
            exponent: 3.0,
        })
        .with_pose(Pose {
            rotation: Mat3::rot_z(0.3),
            translation: Vec3d::zero(),
        });
        let a = cam(Vec3d::new(3.0, 0.2, 0.5), 16);
        let b_pos = Vec3d::new(2.6, 1.4, 0.9);
        let geo = ScreenGeometry::cast(Some(&s), &a);
        let mut compared = 0;
        for hit in geo.hits.iter().flatten() {
            let fa = s.frame_at(hit).unwrap();
            let dir = (hit.world - b_pos).normalized().unwrap();
            let Some(hb) = s.intersect(b_pos, dir) else { continue };
            if hb.world.max_abs_diff(hit.world) > 1e-6 {
                continue; // occluded from the second camera
            }
            let fb = s.frame_at(&hb).unwrap();
            assert!(fa.t.max_abs_diff(fb.t) < 1e-5);
            assert!(fa.b.max_abs_diff(fb.b) < 1e-5);
            assert!(fa.n.max_abs_diff(fb.n) < 1e-5);
            compared += 1;
        }
        assert!(compared > 10);
    }

    #[test]
    fn frame_image_frames_are_valid() {
        let s = Surface::new(SurfaceKind::Capsule {
            radius: 0.5,
            half_height: 0.4,
        });
        let c = cam(Vec3d::new(2.0, 1.0, 2.0), 16);
        let fi = frame_image(Some(&s), &c).unwrap();
        let mut degenerate = 0;
        for f in fi.frames.iter().flatten() {
            assert!(f.orthonormality_error() < 1e-6);
            assert!((f.det() - 1.0).abs() < 1e-6);
            degenerate += f.degenerate as usize;
        }
        // Looking down on the cap centre hits the z-axis.
        let top = Camera::new(
            Vec3d::new(0.0, 0.0, 3.0),
            Vec3d::zero(),
            Vec3d::new(0.0, 1.0, 0.0),
            0.8,
            9,
            9,
        )
        .unwrap();
        let fi = frame_image(Some(&s), &top).unwrap();
        let centre = fi.frames[4 * 9 + 4].unwrap();
        assert!(centre.degenerate);
        let _ = degenerate;
    }
}

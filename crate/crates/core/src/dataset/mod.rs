//! Procedural objects rendered from a ring of cameras into training records.

mod record;
mod store;
mod texture;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, FrameImage, Mat3, Pose, ScreenGeometry, Surface, SurfaceKind, Vec3, Vec3d};
use crate::raster::Raster;
use crate::rng::Rng;
use crate::shading::{render, LightRig, PbrStack, Texel};

pub use record::{load_record, save_record, RecordMeta, SampleRecord, RECORD_CHANNELS, RECORD_MAGIC, RECORD_VERSION};
pub use store::{fraction_subset, split, split_objects, Dataset, DatasetConfig, Manifest, ObjectEntry};
pub use texture::{value_noise, Material, TextureProgram, TEXTURE_NAMES};

pub const DEFAULT_VIEWS: usize = 16;
pub const DEFAULT_HOLDOUT: f64 = 0.02;
pub const DEFAULT_RESOLUTION: usize = 32;

pub const SHAPE_NAMES: [&str; 4] = ["sphere", "box", "superquadric", "capsule"];

/// Palette name and its two base colours.
pub const PALETTES: [(&str, [f64; 3], [f64; 3]); 6] = [
    ("red", [0.75, 0.15, 0.12], [0.35, 0.05, 0.05]),
    ("green", [0.25, 0.6, 0.2], [0.05, 0.25, 0.1]),
    ("blue", [0.15, 0.3, 0.8], [0.05, 0.1, 0.35]),
    ("gold", [0.9, 0.7, 0.25], [0.5, 0.35, 0.1]),
    ("gray", [0.7, 0.7, 0.7], [0.25, 0.25, 0.25]),
    ("purple", [0.55, 0.25, 0.7], [0.2, 0.08, 0.3]),
];

/// Prompt vocabulary: shape tokens, then texture tokens, then palette tokens.
pub const TEXTURE_TOKEN_BASE: usize = SHAPE_NAMES.len();
pub const PALETTE_TOKEN_BASE: usize = TEXTURE_TOKEN_BASE + TEXTURE_NAMES.len();
pub const VOCAB_SIZE: usize = PALETTE_TOKEN_BASE + PALETTES.len();

pub fn token_name(id: usize) -> Option<&'static str> {
    if id < TEXTURE_TOKEN_BASE {
        Some(SHAPE_NAMES[id])
    } else if id < PALETTE_TOKEN_BASE {
        Some(TEXTURE_NAMES[id - TEXTURE_TOKEN_BASE])
    } else {
        PALETTES.get(id - PALETTE_TOKEN_BASE).map(|p| p.0)
    }
}

pub fn caption(prompt: &[usize; 3]) -> String {
    prompt
        .iter()
        .map(|&t| token_name(t).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: usize,
    pub seed: u64,
    pub surface: Surface,
    pub texture: TextureProgram,
    pub palette: usize,
    pub material: Material,
}

fn random_unit(rng: &mut Rng) -> Vec3d {
    loop {
        if let Some(v) = Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalized() {
            return v;
        }
    }
}

impl ObjectSpec {
    /// Everything about the object follows from `seed`.
    pub fn from_seed(id: usize, seed: u64) -> Self {
        let root = Rng::new(seed);
        let mut rng = root.fork_named("shape");
        let kind = match rng.below(4) {
            0 => SurfaceKind::Sphere {
                radius: rng.uniform_range(0.7, 1.0),
            },
            1 => SurfaceKind::Box {
                half: Vec3::new(
                    rng.uniform_range(0.45, 0.75),
                    rng.uniform_range(0.45, 0.75),
                    rng.uniform_range(0.45, 0.75),
                ),
            },
            2 => SurfaceKind::Superquadric {
                radii: Vec3::new(
                    rng.uniform_range(0.55, 0.9),
                    rng.uniform_range(0.55, 0.9),
                    rng.uniform_range(0.55, 0.9),
                ),
                exponent: rng.uniform_range(1.5, 4.0),
            },
            _ => SurfaceKind::Capsule {
                radius: rng.uniform_range(0.35, 0.6),
                half_height: rng.uniform_range(0.2, 0.45),
            },
        };
        let axis = random_unit(&mut rng);
        let pose = Pose {
            rotation: Mat3::from_axis_angle(axis, rng.uniform_range(0.0, std::f64::consts::PI)),
            translation: Vec3d::zero(),
        };

        let mut rng = root.fork_named("texture");
        let texture = match rng.below(4) {
            0 => TextureProgram::Constant,
            1 => TextureProgram::Checker {
                frequency: rng.uniform_range(2.0, 4.0),
            },
            2 => TextureProgram::ValueNoise {
                frequency: rng.uniform_range(2.0, 4.0),
                seed: rng.next_u64(),
            },
            _ => TextureProgram::Stripes {
                frequency: rng.uniform_range(1.5, 3.5),
                direction: random_unit(&mut rng),
            },
        };

        let mut rng = root.fork_named("material");
        let palette = rng.below(PALETTES.len());
        let (_, a, b) = PALETTES[palette];
        let mut jitter = |c: [f64; 3]| c.map(|v| (v + rng.uniform_range(-0.05, 0.05)).clamp(0.0, 1.0));
        let albedo = [jitter(a), jitter(b)];
        let mut metal = || {
            if rng.uniform() < 0.35 {
                rng.uniform_range(0.7, 1.0)
            } else {
                rng.uniform_range(0.0, 0.15)
            }
        };
        let metallic = [metal(), metal()];
        let material = Material {
            albedo,
            roughness: [rng.uniform_range(0.15, 0.9), rng.uniform_range(0.15, 0.9)],
            metallic,
            bump_amplitude: rng.uniform_range(0.02, 0.06),
        };
        Self {
            id,
            seed,
            surface: Surface::new(kind).with_pose(pose),
            texture,
            palette,
            material,
        }
    }

    pub fn prompt(&self) -> [usize; 3] {
        [
            self.surface.kind.token(),
            TEXTURE_TOKEN_BASE + self.texture.index(),
            PALETTE_TOKEN_BASE + self.palette,
        ]
    }
}

/// `n` objects, object `i` seeded from child stream `i` of `master_seed`.
pub fn generate_objects(n: usize, master_seed: u64) -> Result<Vec<ObjectSpec>> {
    if n == 0 {
        return Err(Error::invalid("at least one object required"));
    }
    let master = Rng::new(master_seed);
    Ok((0..n)
        .map(|i| ObjectSpec::from_seed(i, master.fork(i as u64).next_u64()))
        .collect())
}

pub const CAMERA_DISTANCE: f64 = 3.2;
pub const CAMERA_HEIGHT: f64 = 1.0;
pub const CAMERA_FOV: f64 = 0.75;

/// Camera `view` of `views` equally spaced on a horizontal circle about +z.
pub fn view_camera(view: usize, views: usize, resolution: usize) -> Result<Camera> {
    let theta = std::f64::consts::TAU * view as f64 / views as f64;
    Camera::new(
        Vec3::new(
            CAMERA_DISTANCE * theta.cos(),
            CAMERA_DISTANCE * theta.sin(),
            CAMERA_HEIGHT,
        ),
        Vec3d::zero(),
        Vec3::new(0.0, 0.0, 1.0),
        CAMERA_FOV,
        resolution,
        resolution,
    )
}

/// Conditioning, PBR stack and view-space frames of one view (no RGB yet).
pub struct ViewGeometry {
    pub normals: Raster,
    pub mask: Raster,
    pub pbr: PbrStack,
    pub frames: FrameImage,
}

pub fn view_geometry(spec: &ObjectSpec, camera: &Camera) -> Result<ViewGeometry> {
    let (h, w) = (camera.height, camera.width);
    let geo = ScreenGeometry::cast(Some(&spec.surface), camera);
    let basis = camera.basis()?;
    let mut normals = Raster::zeros(3, h, w);
    let mut mask = Raster::zeros(1, h, w);
    let mut pbr = PbrStack::zeros(h, w);
    let mut frames = vec![None; h * w];
    let background = Texel {
        bump: Vec3d::zero(),
        ..Texel::flat([0.0; 3], 0.0, 0.0)
    };
    for (i, hit) in geo.hits.iter().enumerate() {
        let Some(hit) = hit else {
            pbr.set_texel(i, &background);
            continue;
        };
        let local = crate::geometry::radial_z_tangent(hit.local, hit.local_normal)?;
        pbr.set_texel(i, &spec.material.texel(&spec.texture, hit.local, &local));
        let view_frame = local.rotated(&spec.surface.pose.rotation).rotated(&basis);
        frames[i] = Some(view_frame);
        for (c, v) in view_frame.n.to_array().into_iter().enumerate() {
            normals.set(c, i, v as f32);
        }
        mask.set(0, i, 1.0);
    }
    Ok(ViewGeometry {
        normals,
        mask,
        pbr,
        frames: FrameImage {
            width: w,
            height: h,
            frames,
        },
    })
}

pub fn render_view(
    spec: &ObjectSpec,
    view: usize,
    views: usize,
    resolution: usize,
    rig: &LightRig,
) -> Result<SampleRecord> {
    let cam = view_camera(view, views, resolution)?;
    let g = view_geometry(spec, &cam)?;
    let rgb = render(&g.pbr, &g.frames, &g.mask.data, rig)?;
    Ok(SampleRecord {
        normals: g.normals,
        mask: g.mask,
        pbr: g.pbr,
        rgb,
        meta: RecordMeta {
            prompt: spec.prompt(),
            object_id: spec.id,
            view_id: view,
        },
    })
}

pub fn render_views(spec: &ObjectSpec, views: usize, resolution: usize, rig: &LightRig) -> Result<Vec<SampleRecord>> {
    if views == 0 {
        return Err(Error::invalid("at least one view required"));
    }
    (0..views)
        .map(|v| render_view(spec, v, views, resolution, rig))
        .collect()
}

/// Max deviation between a record's RGB and a fresh render of its stored
/// stack (frames are regenerated from the object, since records do not carry
/// tangents).
pub fn rerender_error(spec: &ObjectSpec, record: &SampleRecord, views: usize, rig: &LightRig) -> Result<f64> {
    let cam = view_camera(record.meta.view_id, views, record.width())?;
    let g = view_geometry(spec, &cam)?;
    let rgb = render(&record.pbr, &g.frames, &record.mask.data, rig)?;
    Ok(rgb
        .data
        .iter()
        .zip(&record.rgb.data)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max))
}

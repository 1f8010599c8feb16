//! Procedural surfaces, screen-space normals, and geometry tangent frames.

mod frame;
mod scene;
mod vec3;

pub use frame::{radial_z_tangent, GeometryFrame};
pub use scene::{
    frame_image, frames_from, normals_from, render_screen_normals, Camera, FrameImage, Hit, NormalImage, Pose,
    ScreenGeometry, Surface, SurfaceKind,
};
pub use vec3::{Mat3, Vec3, Vec3d, Vec3f};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::se3::{BodyPoseFrame, RigidTransform};

use super::agent::{arm_points, skeleton_to_body_pose, AgentState};
use super::image::{quantize, Image, Mask};
use super::scene::{Scene, ARM_COLOR};

pub const MIN_RESOLUTION: usize = 16;
pub const UPPER_ARM_RADIUS: f64 = 0.055;
pub const FOREARM_RADIUS: f64 = 0.045;
/// Arm hits closer than this to the eye are clipped.
pub const NEAR_CLIP: f64 = 0.02;

/// Pinhole camera at a head pose, 90° horizontal field of view. The head
/// frame looks along +x with +y to the left and +z up.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < MIN_RESOLUTION || height < MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "resolution {width}x{height} below {MIN_RESOLUTION}x{MIN_RESOLUTION}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn focal(&self) -> f64 {
        self.width as f64 / 2.0
    }

    /// Head-frame direction through image point `(u, v)` (pixel units, origin
    /// at the top-left corner of the image).
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [self.focal(), self.width as f64 / 2.0 - u, self.height as f64 / 2.0 - v]
    }

    /// Image coordinates of a head-frame point in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        if p[0] <= 0.0 {
            return None;
        }
        let f = self.focal();
        Some([
            self.width as f64 / 2.0 - f * p[1] / p[0],
            self.height as f64 / 2.0 - f * p[2] / p[0],
        ])
    }
}

fn to_world(head: &RigidTransform, d: [f64; 3]) -> [f64; 3] {
    let w = head.rotation() * Vector3::new(d[0], d[1], d[2]);
    [w.x, w.y, w.z]
}

/// Nearest positive hit of a unit ray with a capsule.
fn capsule_hit(o: &Vector3<f64>, d: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, r: f64) -> Option<f64> {
    let ba = b - a;
    let oa = o - a;
    let baba = ba.dot(&ba);
    let bard = ba.dot(d);
    let baoa = ba.dot(&oa);
    let rdoa = d.dot(&oa);
    let oaoa = oa.dot(&oa);
    let qa = baba - bard * bard;
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - r * r * baba;
    let h = qb * qb - qa * qc;
    if qa > 1e-12 && h >= 0.0 {
        let t = (-qb - h.sqrt()) / qa;
        let y = baoa + t * bard;
        if y > 0.0 && y < baba && t > NEAR_CLIP {
            return Some(t);
        }
    }
    // end caps
    for c in [a, b] {
        let oc = o - c;
        let bq = d.dot(&oc);
        let cq = oc.dot(&oc) - r * r;
        let hh = bq * bq - cq;
        if hh >= 0.0 {
            let t = -bq - hh.sqrt();
            if t > NEAR_CLIP {
                return Some(t);
            }
        }
    }
    None
}

struct ArmGeometry {
    segments: Vec<(Vector3<f64>, Vector3<f64>, f64)>,
}

impl ArmGeometry {
    fn from_pose(pose: &BodyPoseFrame) -> Self {
        let mut segments = Vec::with_capacity(4);
        for [s, e, w] in arm_points(pose) {
            segments.push((s, e, UPPER_ARM_RADIUS));
            segments.push((e, w, FOREARM_RADIUS));
        }
        Self { segments }
    }

    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> bool {
        self.segments
            .iter()
            .any(|(a, b, r)| capsule_hit(origin, dir, a, b, *r).is_some())
    }
}

fn scene_pixel(scene: &Scene, head: &RigidTransform, cam: &Camera, x: usize, y: usize) -> [f64; 3] {
    let o = head.translation();
    let origin = [o.x, o.y, o.z];
    let mut acc = [0.0; 3];
    for (du, dv) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
        let d = to_world(head, cam.ray(x as f64 + du, y as f64 + dv));
        let c = scene.shade(origin, d);
        for k in 0..3 {
            acc[k] += 0.25 * c[k];
        }
    }
    acc
}

/// Scene only (no arms), 2×2 supersampled.
pub fn render_scene(scene: &Scene, head: &RigidTransform, width: usize, height: usize) -> Result<Image> {
    let cam = Camera::new(width, height)?;
    let mut img = Image::filled(width, height, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            img.set_pixel(x, y, scene_pixel(scene, head, &cam, x, y).map(|v| quantize(v) as f32));
        }
    }
    Ok(img)
}

/// Like [`render_scene`] but without snapping to the pixel grid, row-major
/// `H × W × 3`. Smooth in the pose away from landmark edges.
pub fn render_scene_continuous(scene: &Scene, head: &RigidTransform, width: usize, height: usize) -> Result<Vec<f64>> {
    let cam = Camera::new(width, height)?;
    let mut out = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            out.extend_from_slice(&scene_pixel(scene, head, &cam, x, y));
        }
    }
    Ok(out)
}

/// Renders a pose frame from its head joint. A pixel belongs to the arm when
/// its center ray hits an arm capsule; such pixels take the exact arm color
/// and form the mask. Other pixels average four scene rays.
pub fn render_pose(scene: &Scene, pose: &BodyPoseFrame, width: usize, height: usize) -> Result<(Image, Mask)> {
    let cam = Camera::new(width, height)?;
    let head = pose.head();
    let arms = ArmGeometry::from_pose(pose);
    let origin = *head.translation();
    let mut img = Image::filled(width, height, [0.0; 3]);
    let mut mask = Mask::empty(width, height);
    let arm = ARM_COLOR.map(|v| v as f32);
    for y in 0..height {
        for x in 0..width {
            let d = to_world(head, cam.ray(x as f64 + 0.5, y as f64 + 0.5));
            let dir = Vector3::new(d[0], d[1], d[2]).normalize();
            if arms.hit(&origin, &dir) {
                img.set_pixel(x, y, arm);
                mask.set(x, y, true);
            } else {
                img.set_pixel(x, y, scene_pixel(scene, head, &cam, x, y).map(|v| quantize(v) as f32));
            }
        }
    }
    Ok((img, mask))
}

pub fn render_frame(scene: &Scene, state: &AgentState, width: usize, height: usize) -> Result<(Image, Mask)> {
    render_pose(scene, &skeleton_to_body_pose(state)?, width, height)
}

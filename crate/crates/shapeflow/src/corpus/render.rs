//! Pinhole depth rendering.
//!
//! Cameras follow the vision convention: x right, y down, z forward, with
//! `cam_to_world` mapping camera space into world space. Depth maps store
//! the camera-space z coordinate of the first surface hit per pixel (0 marks
//! a miss), so `unproject` reproduces the hit points exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::skeleton::Rigid;
use super::CorpusError;
use crate::geometry::{vec3, Bvh, TriMesh};
use crate::math::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_to_world: Rigid,
}

impl Camera {
    /// Places a camera at `eye` looking at `target`. `fov_y_deg` is the full
    /// vertical field of view; the principal point sits at the image center.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        fov_y_deg: f64,
    ) -> Camera {
        assert!(width > 0 && height > 0);
        assert!(fov_y_deg > 0.0 && fov_y_deg < 180.0);
        let z = vec3::normalize(vec3::sub(target, eye));
        assert!(vec3::norm(z) > 0.0, "eye and target coincide");
        let x = vec3::normalize(vec3::cross(z, up));
        assert!(
            vec3::norm(x) > 0.0,
            "view direction must not be parallel to up"
        );
        let y = vec3::cross(z, x);
        let r = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        let fy = (height as f64 / 2.0) / (fov_y_deg.to_radians() / 2.0).tan();
        Camera {
            width,
            height,
            fx: fy,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            cam_to_world: Rigid { r, t: eye },
        }
    }

    pub fn position(&self) -> [f64; 3] {
        self.cam_to_world.t
    }

    /// Optical axis in world space.
    pub fn forward(&self) -> [f64; 3] {
        self.cam_to_world.apply_vector([0.0, 0.0, 1.0])
    }

    /// World-space ray through the center of pixel (u, v): (origin, unit
    /// direction).
    pub fn pixel_ray(&self, u: usize, v: usize) -> ([f64; 3], [f64; 3]) {
        let px = u as f64 + 0.5;
        let py = v as f64 + 0.5;
        let dir_cam = [(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0];
        let dir = vec3::normalize(self.cam_to_world.apply_vector(dir_cam));
        (self.position(), dir)
    }

    /// Lifts continuous pixel coordinates and a camera-space depth back to a
    /// world point.
    pub fn unproject(&self, px: f64, py: f64, depth: f64) -> [f64; 3] {
        let p_cam = [
            (px - self.cx) / self.fx * depth,
            (py - self.cy) / self.fy * depth,
            depth,
        ];
        self.cam_to_world.apply(p_cam)
    }

    /// Projects a world point to continuous pixel coordinates and depth;
    /// `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let pc = self.cam_to_world.apply_inverse(p);
        if pc[2] <= 0.0 {
            return None;
        }
        Some((
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
            pc[2],
        ))
    }
}

/// A rendered (or captured) depth image with its camera. Depth is row-major
/// with `0.0` marking pixels that saw no surface.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub camera: Camera,
    pub depth: Vec<f64>,
}

impl DepthFrame {
    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.camera.width + u]
    }

    pub fn observed_pixels(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// World-space points of all observed pixels, in row-major pixel order.
    pub fn observed_points(&self) -> Vec<[f64; 3]> {
        let mut points = Vec::with_capacity(self.observed_pixels());
        for v in 0..self.camera.height {
            for u in 0..self.camera.width {
                let d = self.depth_at(u, v);
                if d > 0.0 {
                    points.push(self.camera.unproject(
                        u as f64 + 0.5,
                        v as f64 + 0.5,
                        d,
                    ));
                }
            }
        }
        points
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut ck = Checkpoint::new();
        ck.put_u64("width", self.camera.width as u64);
        ck.put_u64("height", self.camera.height as u64);
        ck.put_f64s(
            "intrinsics",
            &[self.camera.fx, self.camera.fy, self.camera.cx, self.camera.cy],
        );
        let r = &self.camera.cam_to_world.r;
        ck.put_f64s(
            "cam_rotation",
            &[
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
        );
        ck.put_f64s("cam_translation", &self.camera.cam_to_world.t);
        ck.put_f64s("depth", &self.depth);
        ck.save(path).map_err(|e| CorpusError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<DepthFrame, CorpusError> {
        let ck = Checkpoint::load(path).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        let fail = |e: crate::math::MathError| CorpusError::Manifest(e.to_string());
        let width = ck.u64("width").map_err(fail)? as usize;
        let height = ck.u64("height").map_err(fail)? as usize;
        let intr = ck.f64s("intrinsics").map_err(fail)?;
        let rot = ck.f64s("cam_rotation").map_err(fail)?;
        let trans = ck.f64s("cam_translation").map_err(fail)?;
        let depth = ck.f64s("depth").map_err(fail)?.to_vec();
        if intr.len() != 4 || rot.len() != 9 || trans.len() != 3 || depth.len() != width * height
        {
            return Err(CorpusError::Manifest(format!(
                "inconsistent depth frame dimensions in {}",
                path.display()
            )));
        }
        Ok(DepthFrame {
            camera: Camera {
                width,
                height,
                fx: intr[0],
                fy: intr[1],
                cx: intr[2],
                cy: intr[3],
                cam_to_world: Rigid {
                    r: [
                        [rot[0], rot[1], rot[2]],
                        [rot[3], rot[4], rot[5]],
                        [rot[6], rot[7], rot[8]],
                    ],
                    t: [trans[0], trans[1], trans[2]],
                },
            },
            depth,
        })
    }
}

/// Ray-casts a depth map of `mesh` from `camera`.
pub fn render_depth(mesh: &TriMesh, camera: &Camera) -> DepthFrame {
    let bvh = Bvh::build(mesh);
    let eye = camera.position();
    let fwd = camera.forward();
    let depth: Vec<f64> = (0..camera.width * camera.height)
        .into_par_iter()
        .map(|pix| {
            let (u, v) = (pix % camera.width, pix / camera.width);
            let (origin, dir) = camera.pixel_ray(u, v);
            match bvh.first_hit(mesh, origin, dir) {
                Some((t, _)) => {
                    let hit = vec3::add(origin, vec3::scale(dir, t));
                    vec3::dot(vec3::sub(hit, eye), fwd)
                }
                None => 0.0,
            }
        })
        .collect();
    DepthFrame {
        camera: camera.clone(),
        depth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sdf::icosphere;
    use approx::assert_relative_eq;

    fn test_camera() -> Camera {
        Camera::look_at(
            [0.0, 0.0, 1.3],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            64,
            64,
            70.0,
        )
    }

    #[test]
    fn camera_axes_are_orthonormal_and_y_down() {
        let cam = test_camera();
        let x = cam.cam_to_world.apply_vector([1.0, 0.0, 0.0]);
        let y = cam.cam_to_world.apply_vector([0.0, 1.0, 0.0]);
        let z = cam.cam_to_world.apply_vector([0.0, 0.0, 1.0]);
        assert_relative_eq!(vec3::norm(x), 1.0, epsilon = 1e-12);
        assert_relative_eq!(vec3::dot(x, y), 0.0, epsilon = 1e-12);
        assert_relative_eq!(vec3::dot(y, z), 0.0, epsilon = 1e-12);
        // Looking from +z toward the origin: forward is -z, y points down.
        assert_relative_eq!(z[2], -1.0, epsilon = 1e-12);
        assert_relative_eq!(y[1], -1.0, epsilon = 1e-12);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn project_unproject_round_trip() {
        let cam = test_camera();
        for (px, py, z) in [(32.0, 32.0, 1.0), (3.5, 60.2, 0.7), (63.0, 1.0, 1.9)] {
            let world = cam.unproject(px, py, z);
            let (qu, qv, qz) = cam.project(world).unwrap();
            assert_relative_eq!(qu, px, epsilon = 1e-9);
            assert_relative_eq!(qv, py, epsilon = 1e-9);
            assert_relative_eq!(qz, z, epsilon = 1e-12);
        }
        assert!(cam.project([0.0, 0.0, 2.0]).is_none());
    }

    #[test]
    fn fronto_parallel_plane_reads_constant_depth() {
        let plane = TriMesh::new(
            vec![
                [-3.0, -3.0, 0.3],
                [3.0, -3.0, 0.3],
                [3.0, 3.0, 0.3],
                [-3.0, 3.0, 0.3],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let cam = test_camera();
        let frame = render_depth(&plane, &cam);
        assert_eq!(frame.observed_pixels(), 64 * 64);
        for d in &frame.depth {
            assert_relative_eq!(*d, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn empty_scene_renders_zeros() {
        let empty = TriMesh::new(Vec::new(), Vec::new()).unwrap();
        let frame = render_depth(&empty, &test_camera());
        assert!(frame.depth.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn sphere_depth_and_back_projection_match_analytics() {
        let sphere = icosphere([0.0; 3], 0.3, 3);
        let cam = test_camera();
        let frame = render_depth(&sphere, &cam);
        assert!(frame.observed_pixels() > 200);
        let min_depth = frame
            .depth
            .iter()
            .copied()
            .filter(|d| *d > 0.0)
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(min_depth, 1.0, epsilon = 5e-3);
        for p in frame.observed_points() {
            let r = vec3::norm(p);
            assert!(
                (r - 0.3).abs() < 5e-3,
                "back-projected point off the sphere by {}",
                (r - 0.3).abs()
            );
        }
    }

    #[test]
    fn depth_frame_io_round_trips_bitwise() {
        let sphere = icosphere([0.05, -0.02, 0.01], 0.25, 2);
        let frame = render_depth(&sphere, &test_camera());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.bin");
        frame.save(&path).unwrap();
        let loaded = DepthFrame::load(&path).unwrap();
        assert_eq!(frame, loaded);
    }

    #[test]
    fn rendering_is_deterministic() {
        let sphere = icosphere([0.0; 3], 0.3, 2);
        let cam = test_camera();
        let a = render_depth(&sphere, &cam);
        let b = render_depth(&sphere, &cam);
        assert_eq!(a.depth, b.depth);
    }
}

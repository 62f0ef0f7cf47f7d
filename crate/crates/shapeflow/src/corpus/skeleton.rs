//! Capsule skeletons: identity parameters, bone hierarchy, joint poses, and
//! the analytic signed distance of the capsule union.

use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::geometry::vec3;

/// Maximum joint deflection accepted by [`PoseSpec::validate`], in radians.
pub const JOINT_LIMIT: f64 = 100.0 * std::f64::consts::PI / 180.0;

/// A rigid transform `p -> r * p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rigid {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Rigid {
    pub fn identity() -> Self {
        Rigid {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    /// Rodrigues rotation about a (not necessarily unit) axis.
    pub fn rotation(axis: [f64; 3], angle: f64) -> Self {
        let n = vec3::norm(axis);
        if n < 1e-15 || angle == 0.0 {
            return Rigid::identity();
        }
        let [x, y, z] = vec3::scale(axis, 1.0 / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Rigid {
            r: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
            t: [0.0; 3],
        }
    }

    /// Rotation about an axis anchored at `pivot` (the pivot stays fixed).
    pub fn rotation_about(axis: [f64; 3], angle: f64, pivot: [f64; 3]) -> Self {
        let rot = Rigid::rotation(axis, angle);
        let moved = rot.apply(pivot);
        Rigid {
            r: rot.r,
            t: vec3::sub(pivot, moved),
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Rigid {
            r: Rigid::identity().r,
            t,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.r[0][0] * p[0] + self.r[0][1] * p[1] + self.r[0][2] * p[2] + self.t[0],
            self.r[1][0] * p[0] + self.r[1][1] * p[1] + self.r[1][2] * p[2] + self.t[1],
            self.r[2][0] * p[0] + self.r[2][1] * p[1] + self.r[2][2] * p[2] + self.t[2],
        ]
    }

    /// Rotates a direction vector, ignoring the translation part.
    pub fn apply_vector(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.r[0][0] * v[0] + self.r[0][1] * v[1] + self.r[0][2] * v[2],
            self.r[1][0] * v[0] + self.r[1][1] * v[1] + self.r[1][2] * v[2],
            self.r[2][0] * v[0] + self.r[2][1] * v[1] + self.r[2][2] * v[2],
        ]
    }

    /// Applies the inverse transform (transpose rotation).
    pub fn apply_inverse(&self, p: [f64; 3]) -> [f64; 3] {
        let d = vec3::sub(p, self.t);
        [
            self.r[0][0] * d[0] + self.r[1][0] * d[1] + self.r[2][0] * d[2],
            self.r[0][1] * d[0] + self.r[1][1] * d[1] + self.r[2][1] * d[2],
            self.r[0][2] * d[0] + self.r[1][2] * d[1] + self.r[2][2] * d[2],
        ]
    }

    /// Composition `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.r[i][k] * other.r[k][j]).sum();
            }
        }
        let t = [
            self.r[0][0] * other.t[0]
                + self.r[0][1] * other.t[1]
                + self.r[0][2] * other.t[2]
                + self.t[0],
            self.r[1][0] * other.t[0]
                + self.r[1][1] * other.t[1]
                + self.r[1][2] * other.t[2]
                + self.t[1],
            self.r[2][0] * other.t[0]
                + self.r[2][1] * other.t[1]
                + self.r[2][2] * other.t[2]
                + self.t[2],
        ];
        Rigid { r: r, t }
    }
}

/// Dimensions of one figure: torso, head, and symmetric two-segment limbs.
///
/// All lengths are in raw (pre-normalization) units; the generator rescales
/// the finished corpus into the unit box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub torso_half_height: f64,
    pub torso_radius: f64,
    pub head_length: f64,
    pub head_radius: f64,
    pub arm_upper_length: f64,
    pub arm_lower_length: f64,
    pub arm_radius: f64,
    pub leg_upper_length: f64,
    pub leg_lower_length: f64,
    pub leg_radius: f64,
}

impl IdentitySpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fields = [
            ("torso_half_height", self.torso_half_height),
            ("torso_radius", self.torso_radius),
            ("head_length", self.head_length),
            ("head_radius", self.head_radius),
            ("arm_upper_length", self.arm_upper_length),
            ("arm_lower_length", self.arm_lower_length),
            ("arm_radius", self.arm_radius),
            ("leg_upper_length", self.leg_upper_length),
            ("leg_lower_length", self.leg_lower_length),
            ("leg_radius", self.leg_radius),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(CorpusError::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        // Limb radii larger than the torso radius would detach the shoulder
        // and hip joints from the torso capsule.
        if self.arm_radius >= self.torso_radius || self.leg_radius >= self.torso_radius {
            return Err(CorpusError::InvalidSpec(
                "limb radii must stay below the torso radius".into(),
            ));
        }
        Ok(())
    }
}

/// One capsule bone. `start` is the joint pivot in the rest pose; rotating
/// the joint by `angle` spins the bone (and its subtree) about `axis`.
#[derive(Debug, Clone)]
pub struct Bone {
    pub name: &'static str,
    pub parent: Option<usize>,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub axis: [f64; 3],
}

/// A tree of capsule bones in rest pose.
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub bones: Vec<Bone>,
}

impl Skeleton {
    /// Builds the standard ten-bone figure for an identity: torso, head, and
    /// two-segment arms and legs. Joint pivots are placed inside the parent
    /// capsule so the union stays connected.
    pub fn figure(spec: &IdentitySpec) -> Result<Skeleton, CorpusError> {
        spec.validate()?;
        let thh = spec.torso_half_height;
        let tr = spec.torso_radius;
        let neck = [0.0, thh + 0.2 * tr, 0.0];
        let shoulder_y = 0.75 * thh;
        let hip_y = -0.95 * thh;
        let mut bones = vec![
            Bone {
                name: "torso",
                parent: None,
                start: [0.0, -thh, 0.0],
                end: [0.0, thh, 0.0],
                radius: tr,
                axis: [0.0, 1.0, 0.0],
            },
            Bone {
                name: "head",
                parent: Some(0),
                start: neck,
                end: [0.0, neck[1] + spec.head_length, 0.0],
                radius: spec.head_radius,
                axis: [1.0, 0.0, 0.0],
            },
        ];
        for (side_name, side) in [("l", 1.0), ("r", -1.0)] {
            let shoulder = [side * 0.5 * tr, shoulder_y, 0.0];
            let elbow = [shoulder[0] + side * spec.arm_upper_length, shoulder_y, 0.0];
            let wrist = [elbow[0] + side * spec.arm_lower_length, shoulder_y, 0.0];
            let upper = bones.len();
            bones.push(Bone {
                name: if side_name == "l" { "arm_upper_l" } else { "arm_upper_r" },
                parent: Some(0),
                start: shoulder,
                end: elbow,
                radius: spec.arm_radius,
                axis: [0.0, 0.0, 1.0],
            });
            bones.push(Bone {
                name: if side_name == "l" { "arm_lower_l" } else { "arm_lower_r" },
                parent: Some(upper),
                start: elbow,
                end: wrist,
                radius: spec.arm_radius,
                axis: [0.0, 0.0, 1.0],
            });
        }
        for (side_name, side) in [("l", 1.0), ("r", -1.0)] {
            let hip = [side * 0.45 * tr, hip_y, 0.0];
            let knee = [hip[0] + side * 0.08 * spec.leg_upper_length, hip_y - spec.leg_upper_length, 0.0];
            let ankle = [knee[0], knee[1] - spec.leg_lower_length, 0.0];
            let upper = bones.len();
            bones.push(Bone {
                name: if side_name == "l" { "leg_upper_l" } else { "leg_upper_r" },
                parent: Some(0),
                start: hip,
                end: knee,
                radius: spec.leg_radius,
                axis: [1.0, 0.0, 0.0],
            });
            bones.push(Bone {
                name: if side_name == "l" { "leg_lower_l" } else { "leg_lower_r" },
                parent: Some(upper),
                start: knee,
                end: ankle,
                radius: spec.leg_radius,
                axis: [1.0, 0.0, 0.0],
            });
        }
        Ok(Skeleton { bones })
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    /// Signed distance of the capsule union. Exactly zero on the visible
    /// boundary; negative inside.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        self.bones
            .iter()
            .map(|b| capsule_sdf(p, b.start, b.end, b.radius))
            .fold(f64::INFINITY, f64::min)
    }

    /// Gradient of the union distance, taken from the nearest capsule.
    pub fn distance_gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let mut best = f64::INFINITY;
        let mut grad = [0.0, 0.0, 1.0];
        for b in &self.bones {
            let d = capsule_sdf(p, b.start, b.end, b.radius);
            if d < best {
                best = d;
                let c = closest_on_segment(p, b.start, b.end);
                let dir = vec3::sub(p, c);
                let n = vec3::norm(dir);
                if n > 1e-12 {
                    grad = vec3::scale(dir, 1.0 / n);
                }
            }
        }
        grad
    }

    /// Axis-aligned bounds of the capsule union.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for b in &self.bones {
            for a in 0..3 {
                lo[a] = lo[a].min(b.start[a] - b.radius).min(b.end[a] - b.radius);
                hi[a] = hi[a].max(b.start[a] + b.radius).max(b.end[a] + b.radius);
            }
        }
        (lo, hi)
    }

    /// World transform per bone for a pose: the joint chain from the root,
    /// followed by the pose's global rigid motion.
    pub fn bone_transforms(&self, pose: &PoseSpec) -> Result<Vec<Rigid>, CorpusError> {
        pose.validate(self.bones.len())?;
        let global = pose.global();
        let mut world: Vec<Rigid> = Vec::with_capacity(self.bones.len());
        for (i, bone) in self.bones.iter().enumerate() {
            let local = Rigid::rotation_about(bone.axis, pose.joint_angles[i], bone.start);
            let chained = match bone.parent {
                Some(p) => {
                    debug_assert!(p < i, "bones must be listed parent-first");
                    world[p].compose(&local)
                }
                None => local,
            };
            world.push(chained);
        }
        for w in &mut world {
            *w = global.compose(w);
        }
        Ok(world)
    }
}

/// Joint configuration shared by every identity: one angle per bone plus a
/// global rigid motion (axis-angle rotation vector and translation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub joint_angles: Vec<f64>,
    pub global_rotation: [f64; 3],
    pub global_translation: [f64; 3],
}

impl PoseSpec {
    pub fn rest(bone_count: usize) -> Self {
        PoseSpec {
            joint_angles: vec![0.0; bone_count],
            global_rotation: [0.0; 3],
            global_translation: [0.0; 3],
        }
    }

    pub fn is_rest(&self) -> bool {
        self.joint_angles.iter().all(|a| *a == 0.0)
            && self.global_rotation == [0.0; 3]
            && self.global_translation == [0.0; 3]
    }

    pub fn validate(&self, bone_count: usize) -> Result<(), CorpusError> {
        if self.joint_angles.len() != bone_count {
            return Err(CorpusError::InvalidPose(format!(
                "expected {bone_count} joint angles, got {}",
                self.joint_angles.len()
            )));
        }
        for (i, a) in self.joint_angles.iter().enumerate() {
            if !a.is_finite() || a.abs() > JOINT_LIMIT {
                return Err(CorpusError::InvalidPose(format!(
                    "joint {i} angle {a} outside ±{JOINT_LIMIT:.4} rad"
                )));
            }
        }
        let all = self
            .global_rotation
            .iter()
            .chain(self.global_translation.iter());
        for v in all {
            if !v.is_finite() {
                return Err(CorpusError::InvalidPose("non-finite global motion".into()));
            }
        }
        Ok(())
    }

    fn global(&self) -> Rigid {
        let angle = vec3::norm(self.global_rotation);
        let rot = Rigid::rotation(self.global_rotation, angle);
        Rigid {
            r: rot.r,
            t: self.global_translation,
        }
    }
}

/// Distance from `p` to the capsule around segment `ab` with radius `r`.
pub fn capsule_sdf(p: [f64; 3], a: [f64; 3], b: [f64; 3], r: f64) -> f64 {
    vec3::dist(p, closest_on_segment(p, a, b)) - r
}

fn closest_on_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    let ab = vec3::sub(b, a);
    let len2 = vec3::norm2(ab);
    if len2 < 1e-24 {
        return a;
    }
    let t = (vec3::dot(vec3::sub(p, a), ab) / len2).clamp(0.0, 1.0);
    vec3::add(a, vec3::scale(ab, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec() -> IdentitySpec {
        IdentitySpec {
            torso_half_height: 0.30,
            torso_radius: 0.13,
            head_length: 0.16,
            head_radius: 0.09,
            arm_upper_length: 0.26,
            arm_lower_length: 0.24,
            arm_radius: 0.045,
            leg_upper_length: 0.36,
            leg_lower_length: 0.34,
            leg_radius: 0.055,
        }
    }

    #[test]
    fn rigid_rotation_preserves_length_and_pivot() {
        let r = Rigid::rotation_about([0.0, 0.0, 1.0], 0.7, [1.0, 2.0, 3.0]);
        let pivot = r.apply([1.0, 2.0, 3.0]);
        assert_relative_eq!(pivot[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(pivot[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(pivot[2], 3.0, epsilon = 1e-12);
        let p = [2.5, -1.0, 0.5];
        let q = r.apply(p);
        let dp = vec3::dist(p, [1.0, 2.0, 3.0]);
        let dq = vec3::dist(q, [1.0, 2.0, 3.0]);
        assert_relative_eq!(dp, dq, epsilon = 1e-12);
    }

    #[test]
    fn rigid_compose_matches_sequential_application() {
        let a = Rigid::rotation_about([0.3, 1.0, -0.2], 0.9, [0.1, 0.0, -0.4]);
        let b = Rigid::rotation_about([1.0, 0.0, 0.0], -0.5, [0.0, 0.2, 0.0]);
        let p = [0.3, -0.7, 1.1];
        let via_compose = a.compose(&b).apply(p);
        let sequential = a.apply(b.apply(p));
        for k in 0..3 {
            assert_relative_eq!(via_compose[k], sequential[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn ninety_degree_rotation_about_z() {
        let r = Rigid::rotation([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let q = r.apply([1.0, 0.0, 0.0]);
        assert_relative_eq!(q[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(q[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn capsule_distance_matches_sphere_and_shaft() {
        let a = [0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        // Beyond the end cap: sphere distance around `b`.
        let d = capsule_sdf([1.5, 0.0, 0.0], a, b, 0.2);
        assert_relative_eq!(d, 0.3, epsilon = 1e-12);
        // Side of the shaft.
        let d = capsule_sdf([0.5, 0.7, 0.0], a, b, 0.2);
        assert_relative_eq!(d, 0.5, epsilon = 1e-12);
        // Inside.
        assert!(capsule_sdf([0.5, 0.0, 0.0], a, b, 0.2) < 0.0);
    }

    #[test]
    fn figure_bones_connect_to_parents() {
        let skel = Skeleton::figure(&spec()).unwrap();
        assert_eq!(skel.bone_count(), 10);
        for bone in &skel.bones {
            if let Some(p) = bone.parent {
                let parent = &skel.bones[p];
                let d = capsule_sdf(bone.start, parent.start, parent.end, parent.radius);
                assert!(
                    d < 0.0,
                    "joint {} must sit inside its parent capsule (sdf {d})",
                    bone.name
                );
            }
        }
    }

    #[test]
    fn union_distance_is_min_over_capsules() {
        let skel = Skeleton::figure(&spec()).unwrap();
        let p = [0.9, 0.6, 0.3];
        let manual = skel
            .bones
            .iter()
            .map(|b| capsule_sdf(p, b.start, b.end, b.radius))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(skel.signed_distance(p), manual);
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let skel = Skeleton::figure(&spec()).unwrap();
        let h = 1e-6;
        for p in [[0.6, 0.4, 0.2], [0.0, 0.9, 0.1], [0.3, -0.9, -0.2]] {
            let g = skel.distance_gradient(p);
            for a in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[a] += h;
                lo[a] -= h;
                let fd = (skel.signed_distance(hi) - skel.signed_distance(lo)) / (2.0 * h);
                assert_relative_eq!(g[a], fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn rest_pose_transforms_are_identity() {
        let skel = Skeleton::figure(&spec()).unwrap();
        let pose = PoseSpec::rest(skel.bone_count());
        let world = skel.bone_transforms(&pose).unwrap();
        for w in world {
            let p = [0.21, -0.4, 0.05];
            let q = w.apply(p);
            for k in 0..3 {
                assert_relative_eq!(p[k], q[k], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn child_transform_carries_parent_rotation() {
        let skel = Skeleton::figure(&spec()).unwrap();
        let mut pose = PoseSpec::rest(skel.bone_count());
        // Bone 2 is the left upper arm; bone 3 the left lower arm.
        pose.joint_angles[2] = 0.6;
        let world = skel.bone_transforms(&pose).unwrap();
        let elbow = skel.bones[3].start;
        let via_parent = world[2].apply(elbow);
        let via_child = world[3].apply(elbow);
        for k in 0..3 {
            assert_relative_eq!(via_parent[k], via_child[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn joint_limit_enforced() {
        let skel = Skeleton::figure(&spec()).unwrap();
        let mut pose = PoseSpec::rest(skel.bone_count());
        pose.joint_angles[4] = 101.0_f64.to_radians();
        assert!(matches!(
            skel.bone_transforms(&pose),
            Err(CorpusError::InvalidPose(_))
        ));
        pose.joint_angles[4] = 99.0_f64.to_radians();
        assert!(skel.bone_transforms(&pose).is_ok());
    }

    #[test]
    fn wrong_angle_count_rejected() {
        let skel = Skeleton::figure(&spec()).unwrap();
        let pose = PoseSpec::rest(3);
        assert!(skel.bone_transforms(&pose).is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec();
        s.arm_radius = -0.1;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.leg_radius = s.torso_radius + 0.01;
        assert!(s.validate().is_err());
    }
}

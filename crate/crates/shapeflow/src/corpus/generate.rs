//! End-to-end corpus generation: identities, shared training poses, a
//! held-out pose sequence for fitting, global normalization into the unit
//! box, depth rendering, and a TOML manifest tying the files together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use super::identity::{build_identity, pose_identity, CanonicalTemplate, IdentityRig};
use super::render::{render_depth, Camera, DepthFrame};
use super::skeleton::{IdentitySpec, PoseSpec, JOINT_LIMIT};
use super::CorpusError;
use crate::derive_seed;
use crate::geometry::{corpus_normalization, TriMesh, UnitScale};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Number of identities S.
    pub identities: usize,
    /// Training poses per identity; pose 0 is always the rest pose.
    pub poses_per_identity: usize,
    /// Frames in the held-out pose sequence of identity 0.
    pub heldout_frames: usize,
    /// Node count along the longest axis of the template meshing grid.
    pub mesh_resolution: usize,
    /// Square depth image side length in pixels.
    pub image_size: usize,
    /// Largest joint deflection (degrees) drawn for training poses.
    pub max_joint_deg: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            identities: 4,
            poses_per_identity: 10,
            heldout_frames: 30,
            mesh_resolution: 128,
            image_size: 128,
            max_joint_deg: 60.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.identities == 0 {
            return Err(CorpusError::InvalidConfig("identities must be >= 1".into()));
        }
        if self.poses_per_identity == 0 {
            return Err(CorpusError::InvalidConfig(
                "poses_per_identity must be >= 1".into(),
            ));
        }
        if self.heldout_frames < 2 {
            return Err(CorpusError::InvalidConfig(
                "heldout_frames must be >= 2".into(),
            ));
        }
        if self.mesh_resolution < 16 {
            return Err(CorpusError::InvalidConfig(
                "mesh_resolution must be >= 16".into(),
            ));
        }
        if self.image_size < 16 {
            return Err(CorpusError::InvalidConfig("image_size must be >= 16".into()));
        }
        let limit_deg = JOINT_LIMIT.to_degrees();
        if !(self.max_joint_deg > 0.0 && self.max_joint_deg <= limit_deg) {
            return Err(CorpusError::InvalidConfig(format!(
                "max_joint_deg must lie in (0, {limit_deg:.1}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub index: usize,
    pub spec: IdentitySpec,
    pub canonical_mesh: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceEntry {
    /// Identity index: the instance-to-identity assignment consumed by
    /// latent-space training.
    pub identity: usize,
    /// Index into [`CorpusManifest::poses`].
    pub pose: usize,
    pub mesh: String,
    pub depth: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeldoutEntry {
    pub identity: usize,
    pub poses: Vec<PoseSpec>,
    pub meshes: Vec<String>,
    pub depths: Vec<String>,
}

/// Index of everything the generator wrote. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub center: [f64; 3],
    pub scale: f64,
    pub config: CorpusConfig,
    pub camera: Camera,
    pub identities: Vec<IdentityEntry>,
    /// Training poses shared by every identity; index 0 is the rest pose.
    pub poses: Vec<PoseSpec>,
    pub instances: Vec<InstanceEntry>,
    pub heldout: HeldoutEntry,
    #[serde(skip)]
    root: PathBuf,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<CorpusManifest, CorpusError> {
        let text = fs::read_to_string(path)?;
        let mut manifest: CorpusManifest =
            toml::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CorpusError::Manifest(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let text =
            toml::to_string_pretty(self).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// The instance-to-identity map m[k].
    pub fn identity_of(&self, instance: usize) -> usize {
        self.instances[instance].identity
    }

    pub fn load_mesh(&self, rel: &str) -> Result<TriMesh, CorpusError> {
        TriMesh::load_obj(&self.resolve(rel)).map_err(Into::into)
    }

    pub fn load_depth(&self, rel: &str) -> Result<DepthFrame, CorpusError> {
        DepthFrame::load(&self.resolve(rel))
    }

    pub fn unit_scale(&self) -> UnitScale {
        UnitScale {
            center: self.center,
            scale: self.scale,
        }
    }
}

fn jitter_spec(rng: &mut ChaCha8Rng) -> IdentitySpec {
    let base = super::identity::reference_spec();
    let mut f = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    IdentitySpec {
        torso_half_height: base.torso_half_height * f(0.90, 1.15),
        torso_radius: base.torso_radius * f(0.90, 1.20),
        head_length: base.head_length * f(0.85, 1.15),
        head_radius: base.head_radius * f(0.85, 1.15),
        arm_upper_length: base.arm_upper_length * f(0.85, 1.20),
        arm_lower_length: base.arm_lower_length * f(0.85, 1.20),
        arm_radius: base.arm_radius * f(0.85, 1.15),
        leg_upper_length: base.leg_upper_length * f(0.85, 1.15),
        leg_lower_length: base.leg_lower_length * f(0.85, 1.15),
        leg_radius: base.leg_radius * f(0.85, 1.15),
    }
}

/// Per-bone deflection scale: the torso and head move less than the limbs.
fn bone_motion_factor(bone: usize) -> f64 {
    match bone {
        0 => 0.25,
        1 => 0.40,
        _ => 1.0,
    }
}

fn random_pose(rng: &mut ChaCha8Rng, bones: usize, max_rad: f64) -> PoseSpec {
    let mut pose = PoseSpec::rest(bones);
    for (b, angle) in pose.joint_angles.iter_mut().enumerate() {
        *angle = rng.gen_range(-1.0..1.0) * max_rad * bone_motion_factor(b);
    }
    pose
}

/// Smooth held-out trajectory: each joint follows a half sine of random
/// amplitude, so consecutive frames are close (a temporal prior helps) while
/// every frame differs from all training poses.
fn heldout_poses(rng: &mut ChaCha8Rng, bones: usize, max_rad: f64, frames: usize) -> Vec<PoseSpec> {
    let amps: Vec<f64> = (0..bones)
        .map(|b| rng.gen_range(-1.0..1.0) * 0.9 * max_rad * bone_motion_factor(b))
        .collect();
    (0..frames)
        .map(|f| {
            let t = (f + 1) as f64 / (frames + 1) as f64;
            let mut pose = PoseSpec::rest(bones);
            for (b, angle) in pose.joint_angles.iter_mut().enumerate() {
                *angle = amps[b] * (std::f64::consts::PI * t).sin();
            }
            pose
        })
        .collect()
}

/// Generates the full corpus under `out_dir` and returns the manifest
/// (which is also written to `out_dir/manifest.toml`). Identical seeds and
/// configs produce byte-identical outputs.
pub fn generate_corpus(
    config: &CorpusConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusManifest, CorpusError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let template = CanonicalTemplate::build(config.mesh_resolution)?;
    let max_rad = config.max_joint_deg.to_radians();

    // Identities.
    let mut rigs: Vec<IdentityRig> = Vec::with_capacity(config.identities);
    for i in 0..config.identities {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpus/identity", i as u64));
        let spec = jitter_spec(&mut rng);
        rigs.push(build_identity(&spec, &template)?);
    }
    let bones = template.skeleton.bone_count();

    // Shared training poses; pose 0 is rest.
    let mut poses = vec![PoseSpec::rest(bones)];
    for j in 1..config.poses_per_identity {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpus/pose", j as u64));
        poses.push(random_pose(&mut rng, bones, max_rad));
    }

    // Raw-unit meshes.
    let posed: Vec<Vec<TriMesh>> = rigs
        .iter()
        .map(|rig| {
            poses
                .iter()
                .map(|p| pose_identity(rig, p))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut heldout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpus/heldout", 0));
    let heldout = heldout_poses(&mut heldout_rng, bones, max_rad, config.heldout_frames);
    let heldout_meshes: Vec<TriMesh> = heldout
        .iter()
        .map(|p| pose_identity(&rigs[0], p))
        .collect::<Result<Vec<_>, _>>()?;

    // One normalization for the whole corpus.
    let all = rigs
        .iter()
        .map(|r| &r.canonical)
        .chain(posed.iter().flatten())
        .chain(heldout_meshes.iter());
    let unit = corpus_normalization(all)?;

    let camera = Camera::look_at(
        [0.0, 0.0, 1.3],
        [0.0; 3],
        [0.0, 1.0, 0.0],
        config.image_size,
        config.image_size,
        70.0,
    );

    let mut identities = Vec::with_capacity(config.identities);
    let mut instances = Vec::new();
    for (i, rig) in rigs.iter().enumerate() {
        let dir = out_dir.join(format!("identity{i:02}"));
        fs::create_dir_all(&dir)?;
        let canonical_rel = format!("identity{i:02}/canonical.obj");
        unit.normalized(&rig.canonical)
            .save_obj(&out_dir.join(&canonical_rel))?;
        identities.push(IdentityEntry {
            index: i,
            spec: rig.spec.clone(),
            canonical_mesh: canonical_rel,
        });
        for (j, mesh) in posed[i].iter().enumerate() {
            let normalized = unit.normalized(mesh);
            let mesh_rel = format!("identity{i:02}/pose{j:02}.obj");
            let depth_rel = format!("identity{i:02}/depth{j:02}.bin");
            normalized.save_obj(&out_dir.join(&mesh_rel))?;
            render_depth(&normalized, &camera).save(&out_dir.join(&depth_rel))?;
            instances.push(InstanceEntry {
                identity: i,
                pose: j,
                mesh: mesh_rel,
                depth: depth_rel,
            });
        }
    }

    let heldout_dir = out_dir.join("heldout");
    fs::create_dir_all(&heldout_dir)?;
    let mut heldout_mesh_rels = Vec::with_capacity(config.heldout_frames);
    let mut heldout_depth_rels = Vec::with_capacity(config.heldout_frames);
    for (f, mesh) in heldout_meshes.iter().enumerate() {
        let normalized = unit.normalized(mesh);
        let mesh_rel = format!("heldout/gt{f:02}.obj");
        let depth_rel = format!("heldout/depth{f:02}.bin");
        normalized.save_obj(&out_dir.join(&mesh_rel))?;
        render_depth(&normalized, &camera).save(&out_dir.join(&depth_rel))?;
        heldout_mesh_rels.push(mesh_rel);
        heldout_depth_rels.push(depth_rel);
    }

    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        seed,
        center: unit.center,
        scale: unit.scale,
        config: config.clone(),
        camera,
        identities,
        poses,
        instances,
        heldout: HeldoutEntry {
            identity: 0,
            poses: heldout,
            meshes: heldout_mesh_rels,
            depths: heldout_depth_rels,
        },
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec3;

    fn tiny_config() -> CorpusConfig {
        CorpusConfig {
            identities: 2,
            poses_per_identity: 3,
            heldout_frames: 4,
            mesh_resolution: 48,
            image_size: 32,
            max_joint_deg: 60.0,
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = tiny_config();
        c.identities = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.max_joint_deg = 140.0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn generated_corpus_is_complete_and_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&tiny_config(), 11, dir.path()).unwrap();

        assert_eq!(manifest.identities.len(), 2);
        assert_eq!(manifest.instances.len(), 6);
        assert_eq!(manifest.poses.len(), 3);
        assert!(manifest.poses[0].is_rest());
        assert_eq!(manifest.heldout.meshes.len(), 4);
        for (k, inst) in manifest.instances.iter().enumerate() {
            assert_eq!(manifest.identity_of(k), inst.identity);
        }

        // Every referenced file exists, meshes are watertight and inside the
        // unit box, and per-identity topology is shared.
        for id in &manifest.identities {
            let canonical = manifest.load_mesh(&id.canonical_mesh).unwrap();
            assert!(canonical.is_watertight());
            let (lo, hi) = canonical.bbox();
            for a in 0..3 {
                assert!(lo[a] >= -0.5 - 1e-9 && hi[a] <= 0.5 + 1e-9);
            }
            for inst in manifest.instances.iter().filter(|i| i.identity == id.index) {
                let posed = manifest.load_mesh(&inst.mesh).unwrap();
                assert_eq!(posed.triangles, canonical.triangles);
                let (lo, hi) = posed.bbox();
                for a in 0..3 {
                    assert!(lo[a] >= -0.5 - 1e-9 && hi[a] <= 0.5 + 1e-9);
                }
                let depth = manifest.load_depth(&inst.depth).unwrap();
                assert!(depth.observed_pixels() > 0);
                assert_eq!(depth.camera, manifest.camera);
            }
        }

        // Rest-pose instance equals the canonical mesh exactly (same file
        // content up to OBJ round-trip, which is bitwise).
        let rest = manifest
            .instances
            .iter()
            .find(|i| i.identity == 0 && i.pose == 0)
            .unwrap();
        let canonical = manifest
            .load_mesh(&manifest.identities[0].canonical_mesh)
            .unwrap();
        let rest_mesh = manifest.load_mesh(&rest.mesh).unwrap();
        for (a, b) in canonical.vertices.iter().zip(&rest_mesh.vertices) {
            assert!(vec3::dist(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn heldout_sequence_is_smooth_and_within_limits() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&tiny_config(), 5, dir.path()).unwrap();
        let poses = &manifest.heldout.poses;
        assert_eq!(poses.len(), 4);
        for p in poses {
            p.validate(10).unwrap();
            assert!(!p.is_rest());
        }
        for w in poses.windows(2) {
            let max_step = w[0]
                .joint_angles
                .iter()
                .zip(&w[1].joint_angles)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_step < 0.5, "consecutive poses jumped by {max_step}");
        }
        // Ground-truth frames correspond vertex-wise to the canonical mesh.
        let canonical = manifest
            .load_mesh(&manifest.identities[0].canonical_mesh)
            .unwrap();
        let gt0 = manifest.load_mesh(&manifest.heldout.meshes[0]).unwrap();
        assert_eq!(gt0.triangles, canonical.triangles);
    }

    #[test]
    fn same_seed_reproduces_byte_identical_outputs() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        generate_corpus(&tiny_config(), 31, da.path()).unwrap();
        generate_corpus(&tiny_config(), 31, db.path()).unwrap();
        for rel in [
            MANIFEST_FILE,
            "identity01/pose02.obj",
            "identity00/depth01.bin",
            "heldout/gt03.obj",
        ] {
            let a = std::fs::read(da.path().join(rel)).unwrap();
            let b = std::fs::read(db.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identically seeded runs");
        }
        let ma = generate_corpus(&tiny_config(), 32, da.path());
        assert!(ma.is_ok());
        let a = std::fs::read(da.path().join(MANIFEST_FILE)).unwrap();
        let b = std::fs::read(db.path().join(MANIFEST_FILE)).unwrap();
        assert_ne!(a, b, "different seeds should change the corpus");
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let written = generate_corpus(&tiny_config(), 99, dir.path()).unwrap();
        let loaded = CorpusManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.version, written.version);
        assert_eq!(loaded.seed, written.seed);
        assert_eq!(loaded.scale, written.scale);
        assert_eq!(loaded.center, written.center);
        assert_eq!(loaded.camera, written.camera);
        assert_eq!(loaded.instances.len(), written.instances.len());
        assert_eq!(loaded.poses, written.poses);
        assert_eq!(loaded.root(), dir.path());
    }
}

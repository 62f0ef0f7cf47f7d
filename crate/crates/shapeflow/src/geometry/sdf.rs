//! Signed distance to a watertight mesh: unsigned distance from BVH
//! closest-point queries, sign from ray-crossing parity (negative inside).

use rayon::prelude::*;

use super::bvh::Bvh;
use super::mesh::TriMesh;
use super::vec3;
use super::GeometryError;

/// Quasi-random unit directions for the parity test; when a ray grazes an
/// edge the next direction is tried. Chosen once, irrational-ish components
/// so axis-aligned geometry never aligns with them.
const PARITY_DIRS: [[f64; 3]; 8] = [
    [0.577_215_664_9, 0.693_147_180_6, 0.414_213_562_4],
    [-0.618_033_988_7, 0.541_324_114_2, 0.367_879_441_2],
    [0.318_309_886_2, -0.724_538_509_1, 0.606_530_659_7],
    [0.267_949_192_4, 0.301_029_995_7, -0.910_239_226_6],
    [-0.433_012_701_9, -0.550_321_208_1, 0.712_317_934_3],
    [0.785_398_163_4, -0.161_803_398_9, -0.577_350_269_2],
    [-0.707_106_781_2, 0.239_845_581_3, -0.662_607_015_0],
    [0.101_321_183_6, 0.881_373_587, 0.451_582_705_3],
];

/// Batched queries chunk work at this size; chunk boundaries are fixed so
/// results are independent of the worker count.
const BATCH_CHUNK: usize = 512;

#[derive(Debug, Clone)]
pub struct MeshSdf {
    mesh: TriMesh,
    bvh: Bvh,
}

impl MeshSdf {
    /// Builds the acceleration structure; the mesh must be watertight for
    /// the sign to be meaningful.
    pub fn build(mesh: TriMesh) -> Result<Self, GeometryError> {
        if mesh.triangles.is_empty() {
            return Err(GeometryError::EmptyInput("signed distance mesh"));
        }
        if !mesh.is_watertight() {
            return Err(GeometryError::NotWatertight);
        }
        let bvh = Bvh::build(&mesh);
        Ok(MeshSdf { mesh, bvh })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn into_mesh(self) -> TriMesh {
        self.mesh
    }

    pub fn unsigned_distance(&self, p: [f64; 3]) -> f64 {
        self.bvh.closest(&self.mesh, p).0.sqrt()
    }

    /// Closest surface point and its triangle index.
    pub fn closest_point(&self, p: [f64; 3]) -> ([f64; 3], usize) {
        let (_, tri, q) = self.bvh.closest(&self.mesh, p);
        (q, tri)
    }

    /// Ray-parity inside test (odd crossings = inside). Falls through a
    /// fixed direction table when a ray grazes an edge; points exactly on
    /// the surface classify as outside (distance 0 either way).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        for dir in PARITY_DIRS {
            if let Some(n) = self.bvh.count_crossings(&self.mesh, p, dir) {
                return n % 2 == 1;
            }
        }
        // Every probe grazed something: the point is within numerical noise
        // of the surface; call it outside.
        false
    }

    /// Signed distance: negative inside, positive outside.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let d = self.unsigned_distance(p);
        if d > 0.0 && self.contains(p) {
            -d
        } else {
            d
        }
    }

    /// Batched signed distances with fixed chunking (deterministic for any
    /// worker count).
    pub fn signed_distance_batch(&self, points: &[[f64; 3]]) -> Vec<f64> {
        points
            .par_chunks(BATCH_CHUNK)
            .flat_map_iter(|chunk| chunk.iter().map(|&p| self.signed_distance(p)))
            .collect()
    }

    /// Batched inside tests with fixed chunking.
    pub fn contains_batch(&self, points: &[[f64; 3]]) -> Vec<bool> {
        points
            .par_chunks(BATCH_CHUNK)
            .flat_map_iter(|chunk| chunk.iter().map(|&p| self.contains(p)))
            .collect()
    }
}

/// Triangulated icosphere: subdivided icosahedron scaled to `radius`.
/// Used by oracle tests that compare mesh distance against the analytic
/// sphere SDF, and by the renderer tests.
pub fn icosphere(center: [f64; 3], radius: f64, subdivisions: u32) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for v in &mut vertices {
        *v = vec3::normalize(*v);
    }
    for _ in 0..subdivisions {
        let mut midpoint: std::collections::HashMap<(usize, usize), usize> = Default::default();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for t in &triangles {
            let mut mid = [0usize; 3];
            for (e, (a, b)) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])].into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    let m = vec3::normalize(vec3::scale(
                        vec3::add(vertices[a], vertices[b]),
                        0.5,
                    ));
                    vertices.push(m);
                    vertices.len() - 1
                });
            }
            next.push([t[0], mid[0], mid[2]]);
            next.push([t[1], mid[1], mid[0]]);
            next.push([t[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        triangles = next;
    }
    for v in &mut vertices {
        *v = vec3::add(vec3::scale(*v, radius), center);
    }
    TriMesh::new(vertices, triangles).expect("icosphere is valid")
}

//! Indexed triangle meshes, watertightness checking, corpus normalization
//! and OBJ I/O.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::vec3;
use super::GeometryError;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Builds a mesh, validating index ranges and finiteness.
    pub fn new(
        vertices: Vec<[f64; 3]>,
        triangles: Vec<[usize; 3]>,
    ) -> Result<Self, GeometryError> {
        for (vi, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(GeometryError::InvalidMesh(format!(
                    "vertex {vi} is not finite"
                )));
            }
        }
        for (ti, t) in triangles.iter().enumerate() {
            for &i in t {
                if i >= vertices.len() {
                    return Err(GeometryError::InvalidMesh(format!(
                        "triangle {ti} references vertex {i} of {}",
                        vertices.len()
                    )));
                }
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(GeometryError::InvalidMesh(format!(
                    "triangle {ti} repeats a vertex"
                )));
            }
        }
        Ok(TriMesh {
            vertices,
            triangles,
        })
    }

    pub fn tri_vertices(&self, t: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Axis-aligned bounding box (min corner, max corner).
    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        (lo, hi)
    }

    /// Largest bounding-box axis extent.
    pub fn extent(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max)
    }

    /// True when every undirected edge is shared by exactly two triangles
    /// with opposite orientations (closed, consistently oriented surface).
    pub fn is_watertight(&self) -> bool {
        // Count directed edges; watertight iff every directed edge appears
        // exactly once and its reverse also appears exactly once.
        let mut directed: HashMap<(usize, usize), u32> = HashMap::new();
        for t in &self.triangles {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *directed.entry(e).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// V - E + F with undirected edge counting (2 for a topological sphere).
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges: std::collections::HashSet<(usize, usize)> = Default::default();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Unit normal of triangle `t` (right-hand rule over the index order).
    pub fn face_normal(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.tri_vertices(t);
        vec3::normalize(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.tri_vertices(t);
        0.5 * vec3::norm(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Applies a point transform to every vertex in place.
    pub fn transform(&mut self, f: impl Fn([f64; 3]) -> [f64; 3]) {
        for v in &mut self.vertices {
            *v = f(*v);
        }
    }

    /// Writes vertices and triangular faces in ASCII OBJ. Coordinates use
    /// shortest round-trip formatting, so load(save(m)) == m bitwise.
    pub fn save_obj(&self, path: &Path) -> Result<(), GeometryError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an ASCII OBJ containing triangular faces. Normals, texture
    /// coordinates, groups and comments are skipped; `f` entries may use the
    /// `v/vt/vn` syntax (only the vertex index is used).
    pub fn load_obj(path: &Path) -> Result<Self, GeometryError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(head) = parts.next() else { continue };
            match head {
                "v" => {
                    let mut v = [0.0; 3];
                    for slot in &mut v {
                        *slot = parts
                            .next()
                            .and_then(|s| s.parse::<f64>().ok())
                            .ok_or_else(|| {
                                GeometryError::Format(format!("bad vertex at line {}", ln + 1))
                            })?;
                    }
                    vertices.push(v);
                }
                "f" => {
                    let idx: Vec<usize> = parts
                        .map(|s| {
                            let first = s.split('/').next().unwrap_or("");
                            first.parse::<usize>().map_err(|_| {
                                GeometryError::Format(format!("bad face at line {}", ln + 1))
                            })
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() != 3 {
                        return Err(GeometryError::Format(format!(
                            "face at line {} has {} vertices (triangles only)",
                            ln + 1,
                            idx.len()
                        )));
                    }
                    if idx.iter().any(|&i| i == 0) {
                        return Err(GeometryError::Format(format!(
                            "face at line {} uses 0 or negative indexing",
                            ln + 1
                        )));
                    }
                    triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                // Common OBJ furniture we intentionally ignore.
                "#" | "vn" | "vt" | "o" | "g" | "s" | "usemtl" | "mtllib" => {}
                other => {
                    return Err(GeometryError::Format(format!(
                        "unsupported OBJ entry '{other}' at line {}",
                        ln + 1
                    )))
                }
            }
        }
        TriMesh::new(vertices, triangles)
    }
}

/// The global similarity that normalizes a corpus into the unit box
/// `[-0.5, 0.5]^3`: subtract `center`, divide by `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitScale {
    pub center: [f64; 3],
    pub scale: f64,
}

impl UnitScale {
    pub fn identity() -> Self {
        UnitScale {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        vec3::scale(vec3::sub(p, self.center), 1.0 / self.scale)
    }

    pub fn invert_point(&self, p: [f64; 3]) -> [f64; 3] {
        vec3::add(vec3::scale(p, self.scale), self.center)
    }

    pub fn apply_mesh(&self, mesh: &mut TriMesh) {
        mesh.transform(|p| self.apply_point(p));
    }

    /// Returns a normalized copy of `mesh`.
    pub fn normalized(&self, mesh: &TriMesh) -> TriMesh {
        let mut out = mesh.clone();
        self.apply_mesh(&mut out);
        out
    }
}

/// Computes the single global transform that places every mesh of the corpus
/// inside the unit bounding box: all shapes are divided by the extent of the
/// corpus bounding box (and recentred on it). One scalar for the whole
/// corpus, so correspondences and metric scales stay aligned across shapes.
pub fn corpus_normalization<'a>(
    meshes: impl IntoIterator<Item = &'a TriMesh>,
) -> Result<UnitScale, GeometryError> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for m in meshes {
        if m.vertices.is_empty() {
            continue;
        }
        any = true;
        let (mlo, mhi) = m.bbox();
        for c in 0..3 {
            lo[c] = lo[c].min(mlo[c]);
            hi[c] = hi[c].max(mhi[c]);
        }
    }
    if !any {
        return Err(GeometryError::EmptyInput("corpus normalization"));
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let scale = (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max);
    if scale <= 0.0 {
        return Err(GeometryError::InvalidMesh(
            "corpus has zero spatial extent".into(),
        ));
    }
    Ok(UnitScale { center, scale })
}

/// An axis-aligned box as a 12-triangle watertight mesh (outward normals).
/// Shared by tests and the synthetic corpus plumbing.
pub fn box_mesh(center: [f64; 3], half: [f64; 3]) -> TriMesh {
    let mut vertices = Vec::with_capacity(8);
    for k in 0..2 {
        for j in 0..2 {
            for i in 0..2 {
                vertices.push([
                    center[0] + (i as f64 * 2.0 - 1.0) * half[0],
                    center[1] + (j as f64 * 2.0 - 1.0) * half[1],
                    center[2] + (k as f64 * 2.0 - 1.0) * half[2],
                ]);
            }
        }
    }
    // Corner ids: bit 0 = +x, bit 1 = +y, bit 2 = +z.
    let quads = [
        ([0, 4, 6, 2], [-1, 0, 0]), // x = -1 face
        ([1, 3, 7, 5], [1, 0, 0]),
        ([0, 1, 5, 4], [0, -1, 0]),
        ([2, 6, 7, 3], [0, 1, 0]),
        ([0, 2, 3, 1], [0, 0, -1]),
        ([4, 5, 7, 6], [0, 0, 1]),
    ];
    let mut triangles = Vec::with_capacity(12);
    for (q, _) in quads {
        triangles.push([q[0], q[1], q[2]]);
        triangles.push([q[0], q[2], q[3]]);
    }
    TriMesh::new(vertices, triangles).expect("box mesh is valid")
}

//! Isosurface triangulation of a scalar grid.
//!
//! Each grid cell is split into six tetrahedra (the Kuhn subdivision, all
//! sharing the cell's main diagonal), and each tetrahedron is triangulated
//! by its sign pattern with vertices linearly interpolated on crossing
//! edges. The subdivision is translation-invariant, so neighboring cells
//! agree on shared-face diagonals and the output is closed wherever the
//! isosurface does not leave the grid — the usual marching-cubes face
//! ambiguities cannot produce cracks here. Interpolated vertices are shared
//! through an edge-key map, which also makes the output deterministic.

use std::collections::HashMap;

use super::grid::SdfGrid;
use super::mesh::TriMesh;
use super::vec3;

/// The six tetrahedra of a cell, as corner bit-codes (x = 1, y = 2, z = 4).
/// Every tetrahedron walks from corner 0 to corner 7 along axis
/// permutations, so all six share the main diagonal.
const TETS: [[u8; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Extracts the `iso` level set of the grid as a triangle mesh with outward
/// (toward increasing values) normals. Returns an empty mesh when the grid
/// never crosses the level. The observation mask, if any, is ignored.
pub fn extract_isosurface(grid: &SdfGrid, iso: f64) -> TriMesh {
    let [nx, ny, nz] = grid.res;
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    // Interpolated vertex per crossing grid edge, keyed by node-id pair.
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();

    let node_value = |idx: usize| grid.values[idx];
    let inside = |idx: usize| node_value(idx) < iso;

    let mut corner_ids = [0usize; 8];
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                for (bit, slot) in corner_ids.iter_mut().enumerate() {
                    *slot = grid.index(
                        i + (bit & 1),
                        j + ((bit >> 1) & 1),
                        k + ((bit >> 2) & 1),
                    );
                }
                // Skip cells with no sign change (cheap reject).
                let any_in = corner_ids.iter().any(|&c| inside(c));
                let any_out = corner_ids.iter().any(|&c| !inside(c));
                if !(any_in && any_out) {
                    continue;
                }
                for tet in &TETS {
                    let nodes = [
                        corner_ids[tet[0] as usize],
                        corner_ids[tet[1] as usize],
                        corner_ids[tet[2] as usize],
                        corner_ids[tet[3] as usize],
                    ];
                    emit_tet(
                        grid,
                        iso,
                        nodes,
                        &mut vertices,
                        &mut triangles,
                        &mut edge_vertex,
                    );
                }
            }
        }
    }
    TriMesh {
        vertices,
        triangles,
    }
}

fn emit_tet(
    grid: &SdfGrid,
    iso: f64,
    nodes: [usize; 4],
    vertices: &mut Vec<[f64; 3]>,
    triangles: &mut Vec<[usize; 3]>,
    edge_vertex: &mut HashMap<(usize, usize), usize>,
) {
    let mut ins: [usize; 4] = [0; 4];
    let mut outs: [usize; 4] = [0; 4];
    let mut n_in = 0;
    let mut n_out = 0;
    for &n in &nodes {
        if grid.values[n] < iso {
            ins[n_in] = n;
            n_in += 1;
        } else {
            outs[n_out] = n;
            n_out += 1;
        }
    }
    if n_in == 0 || n_in == 4 {
        return;
    }

    let mut vertex_on = |a: usize, b: usize| -> usize {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            let (na, nb) = key;
            let va = grid.values[na];
            let vb = grid.values[nb];
            let t = (iso - va) / (vb - va);
            let pa = node_pos_of(grid, na);
            let pb = node_pos_of(grid, nb);
            vertices.push(vec3::lerp(pa, pb, t));
            vertices.len() - 1
        })
    };

    match n_in {
        1 => {
            let tri = [
                vertex_on(ins[0], outs[0]),
                vertex_on(ins[0], outs[1]),
                vertex_on(ins[0], outs[2]),
            ];
            push_oriented(grid, tri, outs[0], ins[0], vertices, triangles);
        }
        3 => {
            let tri = [
                vertex_on(ins[0], outs[0]),
                vertex_on(ins[1], outs[0]),
                vertex_on(ins[2], outs[0]),
            ];
            push_oriented(grid, tri, outs[0], ins[0], vertices, triangles);
        }
        2 => {
            // Quad in cyclic order: adjacent quad corners share a tet node.
            let q = [
                vertex_on(ins[0], outs[0]),
                vertex_on(ins[0], outs[1]),
                vertex_on(ins[1], outs[1]),
                vertex_on(ins[1], outs[0]),
            ];
            push_oriented(grid, [q[0], q[1], q[2]], outs[0], ins[0], vertices, triangles);
            push_oriented(grid, [q[0], q[2], q[3]], outs[0], ins[0], vertices, triangles);
        }
        _ => unreachable!(),
    }
}

/// Appends the triangle wound so its normal points from the inside node
/// toward the outside node.
fn push_oriented(
    grid: &SdfGrid,
    tri: [usize; 3],
    out_node: usize,
    in_node: usize,
    vertices: &[[f64; 3]],
    triangles: &mut Vec<[usize; 3]>,
) {
    let a = vertices[tri[0]];
    let b = vertices[tri[1]];
    let c = vertices[tri[2]];
    let n = vec3::cross(vec3::sub(b, a), vec3::sub(c, a));
    let toward_out = vec3::sub(node_pos_of(grid, out_node), node_pos_of(grid, in_node));
    if vec3::dot(n, toward_out) < 0.0 {
        triangles.push([tri[0], tri[2], tri[1]]);
    } else {
        triangles.push(tri);
    }
}

fn node_pos_of(grid: &SdfGrid, idx: usize) -> [f64; 3] {
    let nx = grid.res[0];
    let ny = grid.res[1];
    let i = idx % nx;
    let j = (idx / nx) % ny;
    let k = idx / (nx * ny);
    grid.node_pos(i, j, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_grid_yields_empty_mesh() {
        let g = SdfGrid::from_fn([8, 8, 8], [-0.5; 3], 1.0 / 7.0, |_| 1.0);
        let m = extract_isosurface(&g, 0.0);
        assert!(m.vertices.is_empty());
        assert!(m.triangles.is_empty());
    }

    #[test]
    fn sphere_vertices_lie_within_one_voxel_of_the_radius() {
        let n = 64;
        let g = SdfGrid::from_fn([n, n, n], [-0.5; 3], 1.0 / (n - 1) as f64, |p| {
            vec3::norm(p) - 0.3
        });
        let m = extract_isosurface(&g, 0.0);
        assert!(!m.triangles.is_empty());
        let voxel = 1.0 / (n - 1) as f64;
        for v in &m.vertices {
            let err = (vec3::norm(*v) - 0.3).abs();
            assert!(err < voxel, "vertex radius error {err} exceeds voxel {voxel}");
        }
    }

    #[test]
    fn interior_isosurface_is_closed_and_sphere_like() {
        let n = 32;
        let g = SdfGrid::from_fn([n, n, n], [-0.5; 3], 1.0 / (n - 1) as f64, |p| {
            vec3::norm(p) - 0.3
        });
        let m = extract_isosurface(&g, 0.0);
        assert!(m.is_watertight(), "sphere extraction must be closed");
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn normals_point_outward_on_a_sphere() {
        let n = 24;
        let g = SdfGrid::from_fn([n, n, n], [-0.5; 3], 1.0 / (n - 1) as f64, |p| {
            vec3::norm(p) - 0.3
        });
        let m = extract_isosurface(&g, 0.0);
        for t in 0..m.triangles.len() {
            let nrm = m.face_normal(t);
            let [a, b, c] = m.tri_vertices(t);
            let centroid = vec3::scale(vec3::add(vec3::add(a, b), c), 1.0 / 3.0);
            if vec3::norm(nrm) == 0.0 {
                continue; // degenerate sliver, no orientation
            }
            assert!(
                vec3::dot(nrm, centroid) > 0.0,
                "triangle {t} normal points inward"
            );
        }
    }

    #[test]
    fn linear_field_vertices_lie_exactly_on_the_plane() {
        let g = SdfGrid::from_fn([10, 10, 10], [-0.5; 3], 1.0 / 9.0, |p| p[0] - 0.123);
        let m = extract_isosurface(&g, 0.0);
        assert!(!m.vertices.is_empty());
        for v in &m.vertices {
            assert!(
                (v[0] - 0.123).abs() < 1e-9,
                "vertex x = {} not on plane",
                v[0]
            );
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let build = || {
            let g = SdfGrid::from_fn([16, 16, 16], [-0.5; 3], 1.0 / 15.0, |p| {
                vec3::norm(p) - 0.28
            });
            extract_isosurface(&g, 0.0)
        };
        let a = build();
        let b = build();
        assert_eq!(a.triangles, b.triangles);
        for (x, y) in a.vertices.iter().zip(b.vertices.iter()) {
            for c in 0..3 {
                assert_eq!(x[c].to_bits(), y[c].to_bits());
            }
        }
    }

    #[test]
    fn offset_isolevel_shifts_the_surface() {
        let n = 32;
        let g = SdfGrid::from_fn([n, n, n], [-0.5; 3], 1.0 / (n - 1) as f64, |p| {
            vec3::norm(p) - 0.25
        });
        let m = extract_isosurface(&g, 0.1); // sphere of radius 0.35
        let voxel = 1.0 / (n - 1) as f64;
        for v in &m.vertices {
            assert!((vec3::norm(*v) - 0.35).abs() < voxel);
        }
    }
}

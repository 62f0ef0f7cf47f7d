//! Bounding-volume hierarchy over mesh triangles: exact closest-point
//! queries and ray-crossing counts for inside/outside classification.

use super::mesh::TriMesh;
use super::vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
struct BvhNode {
    lo: [f64; 3],
    hi: [f64; 3],
    /// Children for interior nodes; `start..start+count` into `order` for
    /// leaves (count > 0 marks a leaf).
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

fn tri_bounds(mesh: &TriMesh, t: usize) -> ([f64; 3], [f64; 3]) {
    let vs = mesh.tri_vertices(t);
    let mut lo = vs[0];
    let mut hi = vs[0];
    for v in &vs[1..] {
        for c in 0..3 {
            lo[c] = lo[c].min(v[c]);
            hi[c] = hi[c].max(v[c]);
        }
    }
    (lo, hi)
}

fn centroid(mesh: &TriMesh, t: usize) -> [f64; 3] {
    let [a, b, c] = mesh.tri_vertices(t);
    vec3::scale(vec3::add(vec3::add(a, b), c), 1.0 / 3.0)
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Bvh {
        let n = mesh.triangles.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let centroids: Vec<[f64; 3]> = (0..n).map(|t| centroid(mesh, t)).collect();
        let mut nodes = Vec::with_capacity(2 * n.max(1));
        if n > 0 {
            build_node(mesh, &centroids, &mut order, 0, n, &mut nodes);
        }
        Bvh { nodes, order }
    }

    /// Squared distance to the closest triangle; returns (distance²,
    /// triangle index, closest point). Ties resolve to the first triangle
    /// encountered in deterministic traversal order.
    pub fn closest(&self, mesh: &TriMesh, p: [f64; 3]) -> (f64, usize, [f64; 3]) {
        assert!(!self.nodes.is_empty(), "closest query on empty BVH");
        let mut best = (f64::INFINITY, usize::MAX, [0.0; 3]);
        self.closest_rec(mesh, p, 0, &mut best);
        best
    }

    fn closest_rec(
        &self,
        mesh: &TriMesh,
        p: [f64; 3],
        node: usize,
        best: &mut (f64, usize, [f64; 3]),
    ) {
        let nd = &self.nodes[node];
        if box_dist2(nd.lo, nd.hi, p) >= best.0 {
            return;
        }
        if nd.count > 0 {
            for &t in &self.order[nd.start as usize..(nd.start + nd.count) as usize] {
                let [a, b, c] = mesh.tri_vertices(t as usize);
                let q = closest_point_on_triangle(p, a, b, c);
                let d2 = vec3::dist2(p, q);
                if d2 < best.0 {
                    *best = (d2, t as usize, q);
                }
            }
            return;
        }
        // Visit the nearer child first for better pruning.
        let l = nd.left as usize;
        let r = nd.right as usize;
        let dl = box_dist2(self.nodes[l].lo, self.nodes[l].hi, p);
        let dr = box_dist2(self.nodes[r].lo, self.nodes[r].hi, p);
        if dl <= dr {
            self.closest_rec(mesh, p, l, best);
            self.closest_rec(mesh, p, r, best);
        } else {
            self.closest_rec(mesh, p, r, best);
            self.closest_rec(mesh, p, l, best);
        }
    }

    /// Counts ray/surface crossings from `origin` along `dir`. Returns
    /// `None` when a hit is numerically suspicious (grazing an edge, vertex
    /// or a coplanar triangle) so the caller can retry with another
    /// direction.
    pub fn count_crossings(
        &self,
        mesh: &TriMesh,
        origin: [f64; 3],
        dir: [f64; 3],
    ) -> Option<usize> {
        if self.nodes.is_empty() {
            return Some(0);
        }
        let mut count = 0usize;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            let nd = &self.nodes[node];
            if ray_box_entry(nd.lo, nd.hi, origin, dir).is_none() {
                continue;
            }
            if nd.count > 0 {
                for &t in &self.order[nd.start as usize..(nd.start + nd.count) as usize] {
                    let [a, b, c] = mesh.tri_vertices(t as usize);
                    match ray_triangle(origin, dir, a, b, c) {
                        RayHit::Miss => {}
                        RayHit::Hit => count += 1,
                        RayHit::Degenerate => return None,
                    }
                }
            } else {
                stack.push(nd.left as usize);
                stack.push(nd.right as usize);
            }
        }
        Some(count)
    }

    /// Nearest ray/triangle intersection along `dir` (unit length not
    /// required). Returns `(t, triangle)` for the smallest positive `t`, or
    /// `None` when the ray escapes. Unlike the parity test, border hits are
    /// accepted so adjacent pixels cannot fall through shared edges.
    pub fn first_hit(
        &self,
        mesh: &TriMesh,
        origin: [f64; 3],
        dir: [f64; 3],
    ) -> Option<(f64, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            let nd = &self.nodes[node];
            match ray_box_entry(nd.lo, nd.hi, origin, dir) {
                Some(enter) => {
                    if let Some((bt, _)) = best {
                        if enter > bt {
                            continue;
                        }
                    }
                }
                None => continue,
            }
            if nd.count > 0 {
                for &t in &self.order[nd.start as usize..(nd.start + nd.count) as usize] {
                    let [a, b, c] = mesh.tri_vertices(t as usize);
                    if let Some(hit_t) = ray_triangle_t(origin, dir, a, b, c) {
                        let better = match best {
                            Some((bt, bi)) => {
                                hit_t < bt || (hit_t == bt && (t as usize) < bi)
                            }
                            None => true,
                        };
                        if better {
                            best = Some((hit_t, t as usize));
                        }
                    }
                }
            } else {
                stack.push(nd.left as usize);
                stack.push(nd.right as usize);
            }
        }
        best
    }
}

/// Entry parameter of a forward ray into an AABB, or `None` on a miss.
/// Axis-parallel rays are handled explicitly so an origin sitting exactly on
/// a slab plane does not poison the test with `0 * inf`.
fn ray_box_entry(lo: [f64; 3], hi: [f64; 3], origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for c in 0..3 {
        if dir[c] == 0.0 {
            if origin[c] < lo[c] || origin[c] > hi[c] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[c];
        let t1 = (lo[c] - origin[c]) * inv;
        let t2 = (hi[c] - origin[c]) * inv;
        let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        tmin = tmin.max(t1);
        tmax = tmax.min(t2);
        if tmin > tmax {
            return None;
        }
    }
    Some(tmin)
}

/// Möller-Trumbore returning the hit parameter. Border-inclusive: edge and
/// vertex hits count, which keeps rendered depth maps free of pinholes.
fn ray_triangle_t(
    origin: [f64; 3],
    dir: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 3],
) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let ab = vec3::sub(b, a);
    let ac = vec3::sub(c, a);
    let pvec = vec3::cross(dir, ac);
    let det = vec3::dot(ab, pvec);
    if det.abs() < EPS {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = vec3::sub(origin, a);
    let u = vec3::dot(tvec, pvec) * inv_det;
    if !(-1e-9..=1.0 + 1e-9).contains(&u) {
        return None;
    }
    let qvec = vec3::cross(tvec, ab);
    let v = vec3::dot(dir, qvec) * inv_det;
    if v < -1e-9 || u + v > 1.0 + 1e-9 {
        return None;
    }
    let t = vec3::dot(ac, qvec) * inv_det;
    if t > 1e-9 {
        Some(t)
    } else {
        None
    }
}

fn build_node(
    mesh: &TriMesh,
    centroids: &[[f64; 3]],
    order: &mut [u32],
    start: usize,
    count: usize,
    nodes: &mut Vec<BvhNode>,
) -> u32 {
    let slice = &order[start..start + count];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &t in slice.iter() {
        let (tlo, thi) = tri_bounds(mesh, t as usize);
        for c in 0..3 {
            lo[c] = lo[c].min(tlo[c]);
            hi[c] = hi[c].max(thi[c]);
        }
    }
    let id = nodes.len() as u32;
    nodes.push(BvhNode {
        lo,
        hi,
        left: 0,
        right: 0,
        start: start as u32,
        count: 0,
    });
    if count <= LEAF_SIZE {
        nodes[id as usize].count = count as u32;
        return id;
    }
    // Split at the median centroid along the widest centroid axis.
    let mut clo = [f64::INFINITY; 3];
    let mut chi = [f64::NEG_INFINITY; 3];
    for &t in order[start..start + count].iter() {
        for c in 0..3 {
            clo[c] = clo[c].min(centroids[t as usize][c]);
            chi[c] = chi[c].max(centroids[t as usize][c]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| {
            (chi[a] - clo[a])
                .partial_cmp(&(chi[b] - clo[b]))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap();
    let mid = count / 2;
    order[start..start + count].select_nth_unstable_by(mid, |&a, &b| {
        let ka = (centroids[a as usize][axis], a);
        let kb = (centroids[b as usize][axis], b);
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    });
    let left = build_node(mesh, centroids, order, start, mid, nodes);
    let right = build_node(mesh, centroids, order, start + mid, count - mid, nodes);
    nodes[id as usize].left = left;
    nodes[id as usize].right = right;
    id
}

fn box_dist2(lo: [f64; 3], hi: [f64; 3], p: [f64; 3]) -> f64 {
    let mut d2 = 0.0;
    for c in 0..3 {
        let d = if p[c] < lo[c] {
            lo[c] - p[c]
        } else if p[c] > hi[c] {
            p[c] - hi[c]
        } else {
            0.0
        };
        d2 += d * d;
    }
    d2
}

enum RayHit {
    Miss,
    Hit,
    Degenerate,
}

/// Möller-Trumbore with conservative degeneracy reporting: hits too close
/// to a triangle edge/vertex/plane are flagged rather than counted, so the
/// parity test can move to a fresh direction.
fn ray_triangle(origin: [f64; 3], dir: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> RayHit {
    const EDGE_EPS: f64 = 1e-9;
    let ab = vec3::sub(b, a);
    let ac = vec3::sub(c, a);
    let pvec = vec3::cross(dir, ac);
    let det = vec3::dot(ab, pvec);
    let scale = vec3::norm(ab).max(vec3::norm(ac));
    if det.abs() < 1e-12 * scale * scale {
        // Ray parallel (or nearly) to the triangle plane. If the bounding
        // reach overlaps we cannot trust the classification.
        let tvec = vec3::sub(origin, a);
        let dist_along_normal = vec3::dot(tvec, vec3::normalize(vec3::cross(ab, ac))).abs();
        if dist_along_normal < 1e-9 * scale.max(1.0) {
            return RayHit::Degenerate;
        }
        return RayHit::Miss;
    }
    let inv_det = 1.0 / det;
    let tvec = vec3::sub(origin, a);
    let u = vec3::dot(tvec, pvec) * inv_det;
    if !(-EDGE_EPS..=1.0 + EDGE_EPS).contains(&u) {
        return RayHit::Miss;
    }
    let qvec = vec3::cross(tvec, ab);
    let v = vec3::dot(dir, qvec) * inv_det;
    if v < -EDGE_EPS || u + v > 1.0 + EDGE_EPS {
        return RayHit::Miss;
    }
    let t = vec3::dot(ac, qvec) * inv_det;
    if t <= 1e-12 {
        if t > -1e-12 {
            // Origin sits on the surface; sign is ill-defined.
            return RayHit::Degenerate;
        }
        return RayHit::Miss;
    }
    // Inside but near the border: parity unreliable (the neighboring
    // triangle may double-count or miss the shared edge).
    if u < EDGE_EPS || v < EDGE_EPS || u + v > 1.0 - EDGE_EPS {
        return RayHit::Degenerate;
    }
    RayHit::Hit
}


/// Closest point on triangle (a, b, c) to p; Voronoi-region case analysis.
pub fn closest_point_on_triangle(
    p: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 3],
) -> [f64; 3] {
    let ab = vec3::sub(b, a);
    let ac = vec3::sub(c, a);
    let ap = vec3::sub(p, a);
    let d1 = vec3::dot(ab, ap);
    let d2 = vec3::dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = vec3::sub(p, b);
    let d3 = vec3::dot(ab, bp);
    let d4 = vec3::dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return vec3::add(a, vec3::scale(ab, t));
    }
    let cp = vec3::sub(p, c);
    let d5 = vec3::dot(ab, cp);
    let d6 = vec3::dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return vec3::add(a, vec3::scale(ac, t));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return vec3::add(b, vec3::scale(vec3::sub(c, b), t));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    vec3::add(a, vec3::add(vec3::scale(ab, v), vec3::scale(ac, w)))
}

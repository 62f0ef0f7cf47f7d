//! Exact nearest-neighbor queries over a fixed point set (kd-tree).

use super::vec3;
use super::GeometryError;

#[derive(Debug, Clone)]
struct KdNode {
    /// Original index of the point stored at this node.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Immutable spatial index; queries return exact nearest neighbors with
/// ties broken toward the lowest original point index.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<[f64; 3]>,
    nodes: Vec<KdNode>,
    root: i32,
}

impl PointIndex {
    pub fn build(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyInput("point index"));
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_node(&points, &mut order, &mut nodes);
        Ok(PointIndex {
            points,
            nodes,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> [f64; 3] {
        self.points[idx]
    }

    /// Returns (point index, distance) of the nearest indexed point.
    pub fn nearest(&self, q: [f64; 3]) -> (usize, f64) {
        let mut best = (u32::MAX, f64::INFINITY);
        self.nearest_rec(self.root, q, &mut best);
        (best.0 as usize, best.1.sqrt())
    }

    fn nearest_rec(&self, node: i32, q: [f64; 3], best: &mut (u32, f64)) {
        if node < 0 {
            return;
        }
        let nd = &self.nodes[node as usize];
        let p = self.points[nd.point as usize];
        let d2 = vec3::dist2(q, p);
        // Strictly-better distance wins; equal distance prefers the lower
        // original index.
        if d2 < best.1 || (d2 == best.1 && nd.point < best.0) {
            *best = (nd.point, d2);
        }
        let axis = nd.axis as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (nd.left, nd.right)
        } else {
            (nd.right, nd.left)
        };
        self.nearest_rec(near, q, best);
        // The far half-space can still hold an equal-distance lower-index
        // point, so prune strictly.
        if delta * delta <= best.1 {
            self.nearest_rec(far, q, best);
        }
    }
}

fn build_node(points: &[[f64; 3]], order: &mut [u32], nodes: &mut Vec<KdNode>) -> i32 {
    if order.is_empty() {
        return -1;
    }
    // Split on the widest axis of this subset for balanced performance.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for c in 0..3 {
            lo[c] = lo[c].min(points[i as usize][c]);
            hi[c] = hi[c].max(points[i as usize][c]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| {
            (hi[a] - lo[a])
                .partial_cmp(&(hi[b] - lo[b]))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        (points[a as usize][axis], a)
            .partial_cmp(&(points[b as usize][axis], b))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let point = order[mid];
    let id = nodes.len() as i32;
    nodes.push(KdNode {
        point,
        axis: axis as u8,
        left: -1,
        right: -1,
    });
    // Recurse after reserving the slot so parent links stay simple.
    let (left_slice, rest) = order.split_at_mut(mid);
    let right_slice = &mut rest[1..];
    let left = build_node(points, left_slice, nodes);
    let right = build_node(points, right_slice, nodes);
    nodes[id as usize].left = left;
    nodes[id as usize].right = right;
    id
}

//! Reverse-mode gradient tape over dense 2-D tensors.
//!
//! The tape records one forward evaluation eagerly (values are computed at
//! record time) and replays it once in reverse to accumulate adjoints. The
//! op set covers exactly the architectures and losses used by the decoders,
//! the voxel encoders and the fitting energies; it is not a general autodiff
//! system. Leaves are registered as trainable or constant; gradients only
//! flow into subgraphs with a trainable ancestor, which is how parameter
//! groups are frozen (e.g. shape codes during pose training).

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use super::conv::{col2im_accumulate, im2col, Conv3dSpec};
use super::loss::{clamp_sdf, clamped_l1, clamped_l1_dpred};
use super::MathError;

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// One sample of a differentiable scalar field over 3-D space.
pub struct FieldValue {
    pub value: f64,
    pub grad: [f64; 3],
    /// False when the sample must not supervise the loss (occluded voxel,
    /// out-of-bounds query). Invalid samples report value 0 and zero grad.
    pub valid: bool,
}

/// A scalar field with spatial gradients, sampled by the tape's
/// `field_sample` op. Implemented by the volumetric observation grid.
pub trait DiffField3: Send + Sync {
    fn sample(&self, p: [f64; 3]) -> FieldValue;
}

struct WnCache {
    w_eff: Array2<f64>,
    inv_norm: Vec<f64>,
}

enum Op {
    Leaf,
    LinearWn {
        x: NodeId,
        v: NodeId,
        g: NodeId,
        b: NodeId,
        cache: WnCache,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: Conv3dSpec,
        col: Array2<f64>,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    BroadcastRows {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    RowSumSq {
        x: NodeId,
    },
    ClampedL1 {
        pred: NodeId,
        target: NodeId,
        delta: f64,
    },
    FieldSample {
        pos: NodeId,
        grads: Vec<[f64; 3]>,
    },
    MulRowMask {
        x: NodeId,
        mask: Arc<Vec<f64>>,
    },
    FlattenRow {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
    IcpPull {
        points: NodeId,
        obs: Arc<Vec<[f64; 3]>>,
        assign: Arc<Vec<usize>>,
        dists: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    requires_grad: bool,
    op: Op,
}

/// Accumulated adjoints from one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a leaf. Trainable leaves receive gradients in `backward`;
    /// constants never do.
    pub fn leaf(&mut self, value: Array2<f64>, trainable: bool) -> NodeId {
        self.push(value, trainable, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, false)
    }

    /// Weight-normalized linear layer: `y = x W^T + b` where row r of W is
    /// `g_r * v_r / ||v_r||`. `v` is (out, in); `g` and `b` are (1, out).
    pub fn linear_wn(&mut self, x: NodeId, v: NodeId, g: NodeId, b: NodeId) -> NodeId {
        let (out_dim, in_dim) = self.nodes[v.0].value.dim();
        assert_eq!(self.nodes[x.0].value.ncols(), in_dim, "linear_wn input dim");
        assert_eq!(self.nodes[g.0].value.dim(), (1, out_dim));
        assert_eq!(self.nodes[b.0].value.dim(), (1, out_dim));

        let vv = &self.nodes[v.0].value;
        let gv = &self.nodes[g.0].value;
        let mut w_eff = vv.clone();
        let mut inv_norm = Vec::with_capacity(out_dim);
        for (r, mut row) in w_eff.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
            let scale = gv[[0, r]] / norm;
            row.mapv_inplace(|a| a * scale);
            inv_norm.push(1.0 / norm);
        }
        let mut y = self.nodes[x.0].value.dot(&w_eff.t());
        y += &self.nodes[b.0].value;
        let req = self.req(x) || self.req(v) || self.req(g) || self.req(b);
        self.push(
            y,
            req,
            Op::LinearWn {
                x,
                v,
                g,
                b,
                cache: WnCache { w_eff, inv_norm },
            },
        )
    }

    /// Plain linear layer `y = x W^T + b`; `w` is (out, in), `b` is (1, out).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (out_dim, in_dim) = self.nodes[w.0].value.dim();
        assert_eq!(self.nodes[x.0].value.ncols(), in_dim, "linear input dim");
        assert_eq!(self.nodes[b.0].value.dim(), (1, out_dim));
        let mut y = self.nodes[x.0].value.dot(&self.nodes[w.0].value.t());
        y += &self.nodes[b.0].value;
        let req = self.req(x) || self.req(w) || self.req(b);
        self.push(y, req, Op::Linear { x, w, b })
    }

    /// Strided 3-D convolution (kernel 3, stride 2, pad 1) over a flattened
    /// voxel tensor of shape (voxels, channels); x-fastest voxel order.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv3dSpec) -> NodeId {
        assert_eq!(self.nodes[x.0].value.dim(), (spec.in_voxels(), spec.in_ch));
        assert_eq!(
            self.nodes[w.0].value.dim(),
            (spec.out_ch, spec.in_ch * 27),
            "conv3d weight dims"
        );
        assert_eq!(self.nodes[b.0].value.dim(), (1, spec.out_ch));
        let col = im2col(&self.nodes[x.0].value, &spec);
        let mut y = col.dot(&self.nodes[w.0].value.t());
        y += &self.nodes[b.0].value;
        let req = self.req(x) || self.req(w) || self.req(b);
        self.push(y, req, Op::Conv3d { x, w, b, spec, col })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|a| a.max(0.0));
        let req = self.req(x);
        self.push(y, req, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(f64::tanh);
        let req = self.req(x);
        self.push(y, req, Op::Tanh { x })
    }

    /// Column-wise concatenation `[a | b]`; rows must match.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
        let mut y = Array2::zeros((av.nrows(), av.ncols() + bv.ncols()));
        y.slice_mut(s![.., ..av.ncols()]).assign(av);
        y.slice_mut(s![.., av.ncols()..]).assign(bv);
        let req = self.req(a) || self.req(b);
        self.push(y, req, Op::ConcatCols { a, b })
    }

    /// Repeats a (1, d) row `rows` times; used to pair one latent code with a
    /// batch of query points.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows(), 1, "broadcast_rows expects a single row");
        let mut y = Array2::zeros((rows, xv.ncols()));
        for mut r in y.rows_mut() {
            r.assign(&xv.row(0));
        }
        let req = self.req(x);
        self.push(y, req, Op::BroadcastRows { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.req(a) || self.req(b);
        self.push(y, req, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let req = self.req(a) || self.req(b);
        self.push(y, req, Op::Sub { a, b })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|a| a * k);
        let req = self.req(x);
        self.push(y, req, Op::Scale { x, k })
    }

    /// Per-row squared euclidean norm: (n, d) -> (n, 1).
    pub fn row_sum_sq(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut y = Array2::zeros((xv.nrows(), 1));
        for (r, row) in xv.rows().into_iter().enumerate() {
            y[[r, 0]] = row.iter().map(|a| a * a).sum();
        }
        let req = self.req(x);
        self.push(y, req, Op::RowSumSq { x })
    }

    /// Truncated l1 SDF loss per row; `pred` and `target` are (n, 1).
    pub fn clamped_l1(&mut self, pred: NodeId, target: NodeId, delta: f64) -> NodeId {
        assert!(delta > 0.0);
        let pv = &self.nodes[pred.0].value;
        let tv = &self.nodes[target.0].value;
        assert_eq!(pv.dim(), tv.dim(), "clamped_l1 shape mismatch");
        assert_eq!(pv.ncols(), 1, "clamped_l1 expects column vectors");
        let mut y = Array2::zeros(pv.dim());
        for r in 0..pv.nrows() {
            y[[r, 0]] = clamped_l1(pv[[r, 0]], tv[[r, 0]], delta);
        }
        let req = self.req(pred) || self.req(target);
        self.push(
            y,
            req,
            Op::ClampedL1 {
                pred,
                target,
                delta,
            },
        )
    }

    /// Samples a differentiable scalar field at each row of `pos` (n, 3).
    /// Returns the value column plus the per-row validity mask (1 observed,
    /// 0 masked) captured at record time; invalid rows carry zero value and
    /// zero spatial gradient.
    pub fn field_sample(
        &mut self,
        pos: NodeId,
        field: &dyn DiffField3,
    ) -> (NodeId, Arc<Vec<f64>>) {
        let pv = &self.nodes[pos.0].value;
        assert_eq!(pv.ncols(), 3, "field_sample expects (n, 3) positions");
        let n = pv.nrows();
        let mut values = Array2::zeros((n, 1));
        let mut grads = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for r in 0..n {
            let p = [pv[[r, 0]], pv[[r, 1]], pv[[r, 2]]];
            let sample = field.sample(p);
            if sample.valid {
                values[[r, 0]] = sample.value;
                grads.push(sample.grad);
                mask.push(1.0);
            } else {
                grads.push([0.0; 3]);
                mask.push(0.0);
            }
        }
        let req = self.req(pos);
        let id = self.push(values, req, Op::FieldSample { pos, grads });
        (id, Arc::new(mask))
    }

    /// Multiplies each row of `x` by a constant scalar mask entry.
    pub fn mul_row_mask(&mut self, x: NodeId, mask: Arc<Vec<f64>>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows(), mask.len(), "mask length mismatch");
        let mut y = xv.clone();
        for (r, mut row) in y.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|a| a * mask[r]);
        }
        let req = self.req(x);
        self.push(y, req, Op::MulRowMask { x, mask })
    }

    /// Row-major flatten of an (n, d) node into a (1, n*d) row.
    pub fn flatten_row(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let flat: Vec<f64> = xv.iter().copied().collect();
        let y = Array2::from_shape_vec((1, flat.len()), flat).expect("flatten shape");
        let req = self.req(x);
        self.push(y, req, Op::FlattenRow { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = (xv.len()).max(1) as f64;
        let y = Array2::from_elem((1, 1), xv.sum() / n);
        let req = self.req(x);
        self.push(y, req, Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let y = Array2::from_elem((1, 1), xv.sum());
        let req = self.req(x);
        self.push(y, req, Op::SumAll { x })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut acc = 0.0;
        let mut req = false;
        for &(id, w) in terms {
            debug_assert_eq!(self.nodes[id.0].value.dim(), (1, 1));
            acc += w * self.nodes[id.0].value[[0, 0]];
            req |= self.req(id);
        }
        self.push(
            Array2::from_elem((1, 1), acc),
            req,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    /// Point-cloud pull term: `sum_i || obs_i - points[assign_i] ||`.
    /// The assignment is fixed at record time (nearest-neighbor selection
    /// happens outside the tape); gradients flow into the assigned rows of
    /// `points` only.
    pub fn icp_pull(
        &mut self,
        points: NodeId,
        obs: Arc<Vec<[f64; 3]>>,
        assign: Arc<Vec<usize>>,
    ) -> NodeId {
        assert_eq!(obs.len(), assign.len(), "icp_pull assignment mismatch");
        let pv = &self.nodes[points.0].value;
        assert_eq!(pv.ncols(), 3);
        let mut total = 0.0;
        let mut dists = Vec::with_capacity(obs.len());
        for (q, &a) in obs.iter().zip(assign.iter()) {
            let dx = pv[[a, 0]] - q[0];
            let dy = pv[[a, 1]] - q[1];
            let dz = pv[[a, 2]] - q[2];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            total += d;
            dists.push(d);
        }
        let req = self.req(points);
        self.push(
            Array2::from_elem((1, 1), total),
            req,
            Op::IcpPull {
                points,
                obs,
                assign,
                dists,
            },
        )
    }

    /// Reverse sweep from a scalar root. Visits every node at most once, in
    /// reverse recording order. Returns per-node adjoints; only nodes on a
    /// trainable path carry gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, MathError> {
        let rv = &self.nodes[root.0].value;
        if rv.dim() != (1, 1) {
            return Err(MathError::NonScalarRoot {
                rows: rv.nrows(),
                cols: rv.ncols(),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Array2::ones((1, 1)));

        for id in (0..=root.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(id, &dy, &mut grads);
            // Leaves keep their accumulated gradient; interior adjoints are
            // dropped once consumed to bound memory.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, dy: &Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::LinearWn { x, v, g, b, cache } => {
                if self.req(*x) {
                    self.accumulate(grads, *x, dy.dot(&cache.w_eff));
                }
                let need_v = self.req(*v);
                let need_g = self.req(*g);
                if need_v || need_g {
                    let d_weff = dy.t().dot(&self.nodes[x.0].value);
                    let vv = &self.nodes[v.0].value;
                    let gv = &self.nodes[g.0].value;
                    let (out_dim, in_dim) = vv.dim();
                    let mut dv = Array2::zeros((out_dim, in_dim));
                    let mut dg = Array2::zeros((1, out_dim));
                    for r in 0..out_dim {
                        let inv_n = cache.inv_norm[r];
                        let v_row = vv.row(r);
                        let dw_row = d_weff.row(r);
                        // v_hat = v/||v||; dg = v_hat . dW; dv = g/||v|| (dW - (v_hat.dW) v_hat)
                        let mut dot = 0.0;
                        for c in 0..in_dim {
                            dot += v_row[c] * inv_n * dw_row[c];
                        }
                        dg[[0, r]] = dot;
                        if need_v {
                            let scale = gv[[0, r]] * inv_n;
                            for c in 0..in_dim {
                                dv[[r, c]] = scale * (dw_row[c] - dot * v_row[c] * inv_n);
                            }
                        }
                    }
                    if need_v {
                        self.accumulate(grads, *v, dv);
                    }
                    if need_g {
                        self.accumulate(grads, *g, dg);
                    }
                }
                if self.req(*b) {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                if self.req(*x) {
                    self.accumulate(grads, *x, dy.dot(&self.nodes[w.0].value));
                }
                if self.req(*w) {
                    self.accumulate(grads, *w, dy.t().dot(&self.nodes[x.0].value));
                }
                if self.req(*b) {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv3d { x, w, b, spec, col } => {
                if self.req(*x) {
                    let dcol = dy.dot(&self.nodes[w.0].value);
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    col2im_accumulate(&dcol, spec, &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.req(*w) {
                    self.accumulate(grads, *w, dy.t().dot(col));
                }
                if self.req(*b) {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu { x } => {
                if self.req(*x) {
                    let mut dx = dy.clone();
                    dx.zip_mut_with(&self.nodes[x.0].value, |d, &xv| {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Tanh { x } => {
                if self.req(*x) {
                    let mut dx = dy.clone();
                    dx.zip_mut_with(&self.nodes[id].value, |d, &yv| *d *= 1.0 - yv * yv);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols { a, b } => {
                let ac = self.nodes[a.0].value.ncols();
                if self.req(*a) {
                    self.accumulate(grads, *a, dy.slice(s![.., ..ac]).to_owned());
                }
                if self.req(*b) {
                    self.accumulate(grads, *b, dy.slice(s![.., ac..]).to_owned());
                }
            }
            Op::BroadcastRows { x } => {
                if self.req(*x) {
                    let dx = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Add { a, b } => {
                if self.req(*a) {
                    self.accumulate(grads, *a, dy.clone());
                }
                if self.req(*b) {
                    self.accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.req(*a) {
                    self.accumulate(grads, *a, dy.clone());
                }
                if self.req(*b) {
                    self.accumulate(grads, *b, dy.mapv(|d| -d));
                }
            }
            Op::Scale { x, k } => {
                if self.req(*x) {
                    self.accumulate(grads, *x, dy.mapv(|d| d * k));
                }
            }
            Op::RowSumSq { x } => {
                if self.req(*x) {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = xv.mapv(|a| 2.0 * a);
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|a| a * dy[[r, 0]]);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ClampedL1 {
                pred,
                target,
                delta,
            } => {
                let pv = &self.nodes[pred.0].value;
                let tv = &self.nodes[target.0].value;
                if self.req(*pred) {
                    let mut dp = Array2::zeros(pv.dim());
                    for r in 0..pv.nrows() {
                        dp[[r, 0]] =
                            dy[[r, 0]] * clamped_l1_dpred(pv[[r, 0]], tv[[r, 0]], *delta);
                    }
                    self.accumulate(grads, *pred, dp);
                }
                if self.req(*target) {
                    // Symmetric rule with the sign flipped.
                    let mut dt = Array2::zeros(tv.dim());
                    for r in 0..tv.nrows() {
                        let diff = clamp_sdf(pv[[r, 0]], *delta) - clamp_sdf(tv[[r, 0]], *delta);
                        let inside = tv[[r, 0]] > -*delta && tv[[r, 0]] < *delta;
                        dt[[r, 0]] = if !inside || diff == 0.0 {
                            0.0
                        } else if diff > 0.0 {
                            -dy[[r, 0]]
                        } else {
                            dy[[r, 0]]
                        };
                    }
                    self.accumulate(grads, *target, dt);
                }
            }
            Op::FieldSample { pos, grads: fg } => {
                if self.req(*pos) {
                    let n = fg.len();
                    let mut dp = Array2::zeros((n, 3));
                    for r in 0..n {
                        let d = dy[[r, 0]];
                        dp[[r, 0]] = d * fg[r][0];
                        dp[[r, 1]] = d * fg[r][1];
                        dp[[r, 2]] = d * fg[r][2];
                    }
                    self.accumulate(grads, *pos, dp);
                }
            }
            Op::MulRowMask { x, mask } => {
                if self.req(*x) {
                    let mut dx = dy.clone();
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|a| a * mask[r]);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::FlattenRow { x } => {
                if self.req(*x) {
                    let dims = self.nodes[x.0].value.dim();
                    let flat: Vec<f64> = dy.iter().copied().collect();
                    let dx = Array2::from_shape_vec(dims, flat).expect("flatten grad shape");
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MeanAll { x } => {
                if self.req(*x) {
                    let xv = &self.nodes[x.0].value;
                    let k = dy[[0, 0]] / xv.len().max(1) as f64;
                    self.accumulate(grads, *x, Array2::from_elem(xv.dim(), k));
                }
            }
            Op::SumAll { x } => {
                if self.req(*x) {
                    let xv = &self.nodes[x.0].value;
                    self.accumulate(grads, *x, Array2::from_elem(xv.dim(), dy[[0, 0]]));
                }
            }
            Op::WeightedSum { terms } => {
                for &(tid, w) in terms {
                    if self.req(tid) {
                        self.accumulate(grads, tid, Array2::from_elem((1, 1), dy[[0, 0]] * w));
                    }
                }
            }
            Op::IcpPull {
                points,
                obs,
                assign,
                dists,
            } => {
                if self.req(*points) {
                    let pv = &self.nodes[points.0].value;
                    let mut dp = Array2::zeros(pv.dim());
                    let d0 = dy[[0, 0]];
                    for ((q, &a), &dist) in obs.iter().zip(assign.iter()).zip(dists.iter()) {
                        let inv = d0 / dist.max(1e-12);
                        dp[[a, 0]] += (pv[[a, 0]] - q[0]) * inv;
                        dp[[a, 1]] += (pv[[a, 1]] - q[1]) * inv;
                        dp[[a, 2]] += (pv[[a, 2]] - q[2]) * inv;
                    }
                    self.accumulate(grads, *points, dp);
                }
            }
        }
    }
}

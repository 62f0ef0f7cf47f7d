//! Evaluation metrics for reconstructed sequences: volumetric IoU,
//! Chamfer-ℓ2 between surface samples, and end-point error of
//! keyframe-to-frame deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::derive_seed;
use crate::geometry::{Bvh, GeometryError, MeshSdf, PointIndex, SurfaceSampler, TriMesh};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("both meshes enclose no sample points; IoU is undefined")]
    EmptyUnion,
    #[error("{0} mesh has no triangles")]
    EmptyMesh(&'static str),
    #[error("sequence frames do not share topology: frame {frame} has {got} vertices, expected {expected}")]
    CorrespondenceMismatch {
        frame: usize,
        expected: usize,
        got: usize,
    },
    #[error("prediction has {pred} frames but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("sequence is empty")]
    EmptySequence,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Volumetric intersection-over-union estimated with `n` uniform samples in
/// the joint axis-aligned bounding box of the two meshes. Inside tests use
/// ray parity, so both meshes must be watertight.
pub fn iou(pred: &TriMesh, gt: &TriMesh, n: usize, seed: u64) -> Result<f64, MetricsError> {
    if pred.triangles.is_empty() {
        return Err(MetricsError::EmptyMesh("predicted"));
    }
    if gt.triangles.is_empty() {
        return Err(MetricsError::EmptyMesh("ground-truth"));
    }
    let (lo_a, hi_a) = pred.bbox();
    let (lo_b, hi_b) = gt.bbox();
    let lo = [
        lo_a[0].min(lo_b[0]),
        lo_a[1].min(lo_b[1]),
        lo_a[2].min(lo_b[2]),
    ];
    let hi = [
        hi_a[0].max(hi_b[0]),
        hi_a[1].max(hi_b[1]),
        hi_a[2].max(hi_b[2]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "metrics/iou", 0));
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(lo[0]..=hi[0]),
                rng.gen_range(lo[1]..=hi[1]),
                rng.gen_range(lo[2]..=hi[2]),
            ]
        })
        .collect();
    let sdf_pred = MeshSdf::build(pred.clone())?;
    let sdf_gt = MeshSdf::build(gt.clone())?;
    let in_pred = sdf_pred.contains_batch(&points);
    let in_gt = sdf_gt.contains_batch(&points);
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (a, b) in in_pred.iter().zip(&in_gt) {
        if *a && *b {
            intersection += 1;
        }
        if *a || *b {
            union += 1;
        }
    }
    if union == 0 {
        return Err(MetricsError::EmptyUnion);
    }
    Ok(intersection as f64 / union as f64)
}

fn surface_samples(
    mesh: &TriMesh,
    n: usize,
    seed: u64,
) -> Result<Vec<[f64; 3]>, MetricsError> {
    let sampler = SurfaceSampler::new(mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sampler.sample(mesh, &mut rng).position).collect())
}

/// Symmetric Chamfer distance between area-weighted surface samples, in the
/// squared-distance convention: the average of the two directed means of
/// squared nearest-neighbor distances. Both meshes are sampled with the
/// same random stream, so identical meshes yield exactly zero.
pub fn chamfer_l2(pred: &TriMesh, gt: &TriMesh, n: usize, seed: u64) -> Result<f64, MetricsError> {
    if pred.triangles.is_empty() {
        return Err(MetricsError::EmptyMesh("predicted"));
    }
    if gt.triangles.is_empty() {
        return Err(MetricsError::EmptyMesh("ground-truth"));
    }
    let sample_seed = derive_seed(seed, "metrics/chamfer", 0);
    let a = surface_samples(pred, n, sample_seed)?;
    let b = surface_samples(gt, n, sample_seed)?;
    let index_a = PointIndex::build(a.clone())?;
    let index_b = PointIndex::build(b.clone())?;
    let a_to_b: f64 = a
        .par_iter()
        .map(|&p| {
            let (_, d) = index_b.nearest(p);
            d * d
        })
        .sum();
    let b_to_a: f64 = b
        .par_iter()
        .map(|&p| {
            let (_, d) = index_a.nearest(p);
            d * d
        })
        .sum();
    Ok(0.5 * (a_to_b / n as f64 + b_to_a / n as f64))
}

/// End-point error of keyframe-to-frame deformations.
#[derive(Debug, Clone, Serialize)]
pub struct EpeResult {
    /// Per-frame mean ‖pred displacement − gt displacement‖₂; exactly zero
    /// on keyframes.
    pub per_frame: Vec<f64>,
    /// Mean over non-keyframe frames (zero when every frame is a keyframe).
    pub mean: f64,
}

fn check_shared_topology(frames: &[TriMesh]) -> Result<(), MetricsError> {
    let first = &frames[0];
    for (i, f) in frames.iter().enumerate().skip(1) {
        if f.vertices.len() != first.vertices.len() || f.triangles != first.triangles {
            return Err(MetricsError::CorrespondenceMismatch {
                frame: i,
                expected: first.vertices.len(),
                got: f.vertices.len(),
            });
        }
    }
    Ok(())
}

fn barycentric_position(mesh: &TriMesh, tri: usize, bary: [f64; 3]) -> [f64; 3] {
    let [i, j, k] = mesh.triangles[tri];
    let a = mesh.vertices[i];
    let b = mesh.vertices[j];
    let c = mesh.vertices[k];
    [
        bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0],
        bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1],
        bary[0] * a[2] + bary[1] * b[2] + bary[2] * c[2],
    ]
}

/// Computes EPE between a predicted and a ground-truth sequence.
///
/// Every `stride` frames a keyframe is selected; `n` surface points are
/// sampled on the ground-truth keyframe mesh and carried through both
/// sequences — by barycentric correspondence on the ground truth, and by
/// nearest-surface-point correspondence (established on the keyframe) on
/// the prediction. The per-frame error is the mean ℓ2 distance between the
/// two displacement vectors relative to the keyframe.
pub fn epe(
    pred: &[TriMesh],
    gt: &[TriMesh],
    stride: usize,
    n: usize,
    seed: u64,
) -> Result<EpeResult, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    assert!(stride > 0, "keyframe stride must be positive");
    check_shared_topology(pred)?;
    check_shared_topology(gt)?;

    let frames = pred.len();
    let mut per_frame = vec![0.0; frames];
    let mut key = 0usize;
    while key < frames {
        let span = (key + 1)..frames.min(key + stride);
        let gt_key = &gt[key];
        let pred_key = &pred[key];
        let sampler = SurfaceSampler::new(gt_key)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "metrics/epe", key as u64));
        let samples: Vec<crate::geometry::SurfacePoint> =
            (0..n).map(|_| sampler.sample(gt_key, &mut rng)).collect();
        // Correspondence onto the predicted keyframe: direct (triangle,
        // barycentric) reuse when the sequences share topology — which makes
        // self-comparison cancel bitwise — otherwise the nearest surface
        // point, kept in barycentric form so it can be carried to other
        // frames.
        let direct = pred_key.vertices.len() == gt_key.vertices.len()
            && pred_key.triangles == gt_key.triangles;
        let pred_corr: Vec<(usize, [f64; 3])> = if direct {
            samples.iter().map(|s| (s.triangle, s.bary)).collect()
        } else {
            let bvh = Bvh::build(pred_key);
            samples
                .par_iter()
                .map(|s| {
                    let (_, tri, point) = bvh.closest(pred_key, s.position);
                    (tri, triangle_barycentric(pred_key, tri, point))
                })
                .collect()
        };
        for f in span {
            let err: f64 = samples
                .par_iter()
                .zip(&pred_corr)
                .map(|(s, &(tri, bary))| {
                    let gt_then = barycentric_position(gt_key, s.triangle, s.bary);
                    let gt_now = barycentric_position(&gt[f], s.triangle, s.bary);
                    let gt_disp = [
                        gt_now[0] - gt_then[0],
                        gt_now[1] - gt_then[1],
                        gt_now[2] - gt_then[2],
                    ];
                    let pred_then = barycentric_position(pred_key, tri, bary);
                    let pred_now = barycentric_position(&pred[f], tri, bary);
                    let pred_disp = [
                        pred_now[0] - pred_then[0],
                        pred_now[1] - pred_then[1],
                        pred_now[2] - pred_then[2],
                    ];
                    let d = [
                        pred_disp[0] - gt_disp[0],
                        pred_disp[1] - gt_disp[1],
                        pred_disp[2] - gt_disp[2],
                    ];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .sum();
            per_frame[f] = err / n as f64;
        }
        key += stride;
    }
    let non_key: Vec<f64> = (0..frames)
        .filter(|f| f % stride != 0)
        .map(|f| per_frame[f])
        .collect();
    let mean = if non_key.is_empty() {
        0.0
    } else {
        non_key.iter().sum::<f64>() / non_key.len() as f64
    };
    Ok(EpeResult { per_frame, mean })
}

/// Recovers barycentric coordinates of a point known to lie on a triangle.
fn triangle_barycentric(mesh: &TriMesh, tri: usize, p: [f64; 3]) -> [f64; 3] {
    let [ia, ib, ic] = mesh.triangles[tri];
    let a = mesh.vertices[ia];
    let b = mesh.vertices[ib];
    let c = mesh.vertices[ic];
    let v0 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v1 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let v2 = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let d00 = v0[0] * v0[0] + v0[1] * v0[1] + v0[2] * v0[2];
    let d01 = v0[0] * v1[0] + v0[1] * v1[1] + v0[2] * v1[2];
    let d11 = v1[0] * v1[0] + v1[1] * v1[1] + v1[2] * v1[2];
    let d20 = v2[0] * v0[0] + v2[1] * v0[1] + v2[2] * v0[2];
    let d21 = v2[0] * v1[0] + v2[1] * v1[1] + v2[2] * v1[2];
    let denom = d00 * d11 - d01 * d01;
    if denom.abs() < 1e-30 {
        return [1.0, 0.0, 0.0];
    }
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    [1.0 - v - w, v.max(0.0), w.max(0.0)]
}

/// Per-frame metrics of one fitted sequence plus their aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct SequenceEval {
    pub iou: Vec<f64>,
    pub chamfer_l2: Vec<f64>,
    pub epe: Vec<f64>,
    pub mean_iou: f64,
    pub mean_chamfer_l2: f64,
    pub mean_epe: f64,
    pub iou_samples: usize,
    pub chamfer_samples: usize,
    pub epe_samples: usize,
    pub keyframe_stride: usize,
    pub seed: u64,
    /// Convention marker for the Chamfer column.
    pub chamfer_convention: String,
}

/// Sampling budgets for [`evaluate_sequence`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub iou_samples: usize,
    pub chamfer_samples: usize,
    pub epe_samples: usize,
    pub keyframe_stride: usize,
    pub seed: u64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            iou_samples: 1_000_000,
            chamfer_samples: 100_000,
            epe_samples: 100_000,
            keyframe_stride: 50,
            seed: 0,
        }
    }
}

/// Runs all three metrics over a predicted/ground-truth frame pairing.
pub fn evaluate_sequence(
    pred: &[TriMesh],
    gt: &[TriMesh],
    params: &EvalParams,
) -> Result<SequenceEval, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let mut ious = Vec::with_capacity(pred.len());
    let mut chamfers = Vec::with_capacity(pred.len());
    for (f, (p, g)) in pred.iter().zip(gt).enumerate() {
        let frame_seed = derive_seed(params.seed, "metrics/frame", f as u64);
        ious.push(iou(p, g, params.iou_samples, frame_seed)?);
        chamfers.push(chamfer_l2(p, g, params.chamfer_samples, frame_seed)?);
    }
    let epe_result = epe(
        pred,
        gt,
        params.keyframe_stride,
        params.epe_samples,
        params.seed,
    )?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SequenceEval {
        mean_iou: mean(&ious),
        mean_chamfer_l2: mean(&chamfers),
        mean_epe: epe_result.mean,
        iou: ious,
        chamfer_l2: chamfers,
        epe: epe_result.per_frame,
        iou_samples: params.iou_samples,
        chamfer_samples: params.chamfer_samples,
        epe_samples: params.epe_samples,
        keyframe_stride: params.keyframe_stride,
        seed: params.seed,
        chamfer_convention: "squared, symmetric mean".to_string(),
    })
}

impl SequenceEval {
    /// Writes the per-frame table as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut out = String::from("frame,iou,chamfer_l2,epe\n");
        for f in 0..self.iou.len() {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e}\n",
                f, self.iou[f], self.chamfer_l2[f], self.epe[f]
            ));
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Writes the aggregate summary as JSON.
    pub fn write_summary(&self, path: &Path) -> Result<(), MetricsError> {
        let json = serde_json::to_string_pretty(self).expect("metrics serialize");
        let mut file = std::fs::File::create(path)?;
        file.write_all(json.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }
}

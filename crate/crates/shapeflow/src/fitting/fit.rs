//! Sequence fitting: one shape code and per-frame pose codes are optimized
//! against masked observation grids with both decoders frozen.
//!
//! Each iteration draws a mini-batch of frames and evaluates four terms per
//! frame on a sub-batch of canonical template points: the masked truncated
//! SDF regression against the observation grid sampled at the deformed
//! points, the quadratic code penalties, the temporal flow-consistency
//! penalty against the neighboring frames' flows (held constant), and an
//! observed-cloud pull that drags near-surface model points toward their
//! assigned depth points. Frame evaluations are independent and run in
//! parallel; gradients are reduced in frame order so results do not depend
//! on thread count.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

use super::problem::{sample_fitting_points, FittingProblem};
use super::reconstruct::reconstruct_sequence;
use super::{FittingConfig, FittingError};
use crate::derive_seed;
use crate::geometry::{PointIndex, SdfGrid, TriMesh};
use crate::math::{AdamGroup, AdamSchedule, Tape};
use crate::spaces::shape::encode_points;
use crate::spaces::PoseSpace;

/// Loss-term values at one iteration, summed over the frame mini-batch.
/// Every entry is already weighted, so the terms add up to `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLosses {
    pub total: f64,
    pub reconstruction: f64,
    pub code_reg: f64,
    pub temporal: f64,
    pub icp: f64,
}

#[derive(Debug, Clone)]
pub struct FittingResult {
    pub shape_code: Array2<f64>,
    pub pose_codes: Vec<Array2<f64>>,
    pub losses: Vec<IterationLosses>,
    pub canonical_mesh: TriMesh,
    /// One reposed mesh per frame, all sharing the canonical topology.
    pub posed_meshes: Vec<TriMesh>,
    /// True when the initial shape code decoded to an empty surface and the
    /// template fell back to uniform box samples.
    pub template_fallback: bool,
    /// Iteration whose loss went non-finite, stopping optimization early;
    /// the codes are those of the last finite iteration.
    pub diverged_at: Option<usize>,
}

/// Pull-term inputs for one frame: near-surface template points with their
/// precomputed encodings, and the frame's observed cloud.
pub struct IcpTerm<'a> {
    pub points: &'a Array2<f64>,
    pub encodings: &'a Array2<f64>,
    pub cloud: Arc<Vec<[f64; 3]>>,
}

/// Energy value, per-term breakdown, and code gradients of a single frame.
/// `code_reg` contains the full shape + pose penalty, so summing frame
/// energies over a batch counts the shape penalty once per frame.
#[derive(Debug)]
pub struct FrameEnergy {
    pub total: f64,
    pub reconstruction: f64,
    pub code_reg: f64,
    pub temporal: f64,
    pub icp: f64,
    pub shape_grad: Option<Array2<f64>>,
    pub pose_grad: Option<Array2<f64>>,
}

/// Records one frame's fitting energy on a fresh tape and differentiates it
/// with respect to the two codes. The decoders are bound frozen; neighbor
/// pose codes enter as constants so their gradients stay with their own
/// frames.
#[allow(clippy::too_many_arguments)]
pub fn frame_energy(
    spaces: &PoseSpace,
    shape_code: &Array2<f64>,
    pose_code: &Array2<f64>,
    neighbor_codes: &[&Array2<f64>],
    points: &Array2<f64>,
    encodings: &Array2<f64>,
    observation: &SdfGrid,
    icp: Option<&IcpTerm<'_>>,
    config: &FittingConfig,
) -> Result<FrameEnergy, FittingError> {
    let n = points.nrows();
    let mut tape = Tape::new();
    let shape_binding = spaces.shape.params.bind(&mut tape, false);
    let pose_binding = spaces.params.bind(&mut tape, false);
    let s = tape.leaf(shape_code.clone(), true);
    let p = tape.leaf(pose_code.clone(), true);
    let x = tape.constant(points.clone());
    let enc = tape.constant(encodings.clone());
    let s_bc = tape.broadcast_rows(s, n);
    let p_bc = tape.broadcast_rows(p, n);

    // Masked truncated SDF regression: decoded canonical SDF against the
    // observation sampled at the deformed points.
    let sp = tape.concat_cols(s_bc, p_bc);
    let pose_in = tape.concat_cols(sp, enc);
    let flow = spaces.params.forward(&mut tape, &pose_binding, pose_in);
    let warped = tape.add(x, flow);
    let (observed_sdf, observed) = tape.field_sample(warped, observation);
    let shape_in = tape.concat_cols(s_bc, enc);
    let predicted_sdf = spaces.shape.params.forward(&mut tape, &shape_binding, shape_in);
    let residual = tape.clamped_l1(predicted_sdf, observed_sdf, config.delta);
    let masked = tape.mul_row_mask(residual, observed);
    let reconstruction = tape.mean_all(masked);

    let s_sq = tape.row_sum_sq(s);
    let s_reg = tape.scale(s_sq, (config.sigma_shape * config.sigma_shape).recip());
    let p_sq = tape.row_sum_sq(p);
    let p_reg = tape.scale(p_sq, (config.sigma_pose * config.sigma_pose).recip());
    let code_reg = tape.add(s_reg, p_reg);

    let mut terms = vec![(reconstruction, 1.0), (code_reg, 1.0)];
    let mut temporal_value = 0.0;
    for nb in neighbor_codes {
        let q = tape.constant((*nb).clone());
        let q_bc = tape.broadcast_rows(q, n);
        let sq_cat = tape.concat_cols(s_bc, q_bc);
        let nb_in = tape.concat_cols(sq_cat, enc);
        let nb_flow = spaces.params.forward(&mut tape, &pose_binding, nb_in);
        let diff = tape.sub(flow, nb_flow);
        let dist_sq = tape.row_sum_sq(diff);
        let mean = tape.mean_all(dist_sq);
        temporal_value += config.lambda_temporal * tape.scalar(mean);
        terms.push((mean, config.lambda_temporal));
    }

    let mut icp_value = 0.0;
    if let Some(term) = icp {
        if !term.cloud.is_empty() && term.points.nrows() > 0 {
            let m = term.points.nrows();
            let r_x = tape.constant(term.points.clone());
            let r_enc = tape.constant(term.encodings.clone());
            let s_r = tape.broadcast_rows(s, m);
            let p_r = tape.broadcast_rows(p, m);
            let sp_r = tape.concat_cols(s_r, p_r);
            let in_r = tape.concat_cols(sp_r, r_enc);
            let flow_r = spaces.params.forward(&mut tape, &pose_binding, in_r);
            let deformed = tape.add(r_x, flow_r);
            // Nearest-neighbor assignment over the current deformation is
            // fixed outside the tape; gradients flow through the assigned
            // model points.
            let value = tape.value(deformed);
            let positions: Vec<[f64; 3]> = (0..m)
                .map(|r| [value[[r, 0]], value[[r, 1]], value[[r, 2]]])
                .collect();
            let index = PointIndex::build(positions)?;
            let assign: Vec<usize> = term.cloud.iter().map(|q| index.nearest(*q).0).collect();
            let pull = tape.icp_pull(deformed, term.cloud.clone(), Arc::new(assign));
            let weight = config.lambda_icp / term.cloud.len() as f64;
            icp_value = weight * tape.scalar(pull);
            terms.push((pull, weight));
        }
    }

    let total = tape.weighted_sum(&terms);
    let total_value = tape.scalar(total);
    let reconstruction_value = tape.scalar(reconstruction);
    let code_reg_value = tape.scalar(code_reg);
    let mut grads = tape.backward(total)?;
    Ok(FrameEnergy {
        total: total_value,
        reconstruction: reconstruction_value,
        code_reg: code_reg_value,
        temporal: temporal_value,
        icp: icp_value,
        shape_grad: grads.take(s),
        pose_grad: grads.take(p),
    })
}

struct NearSurface {
    points: Array2<f64>,
    encodings: Array2<f64>,
}

/// Template points whose decoded SDF magnitude is inside the pull band,
/// thinned deterministically to the source cap.
fn near_surface_set(
    spaces: &PoseSpace,
    shape_code: &Array2<f64>,
    template: &[[f64; 3]],
    template_encodings: &Array2<f64>,
    config: &FittingConfig,
) -> NearSurface {
    let sdf = spaces.shape.decode(shape_code, template);
    let mut idx: Vec<usize> = (0..template.len())
        .filter(|&i| sdf[i].abs() < config.icp_surface_band)
        .collect();
    if idx.len() > config.icp_source_cap {
        let len = idx.len();
        idx = (0..config.icp_source_cap)
            .map(|t| idx[t * len / config.icp_source_cap])
            .collect();
    }
    let mut points = Array2::zeros((idx.len(), 3));
    for (r, &i) in idx.iter().enumerate() {
        points[[r, 0]] = template[i][0];
        points[[r, 1]] = template[i][1];
        points[[r, 2]] = template[i][2];
    }
    let encodings = template_encodings.select(Axis(0), &idx);
    NearSurface { points, encodings }
}

/// Optimizes the codes of a prepared problem and reconstructs the tracked
/// sequence. Learning rates decay every quarter of the run; the pull term
/// is active for the first half. A non-finite loss stops the loop and the
/// result keeps the last finite codes with `diverged_at` set.
pub fn fit_sequence(
    problem: &FittingProblem<'_>,
    shape_init: &Array2<f64>,
    pose_init: &[Array2<f64>],
) -> Result<FittingResult, FittingError> {
    let config = &problem.config;
    config.validate()?;
    let spaces = problem.spaces;
    let frames = problem.frame_count();
    let shape_dim = spaces.shape.code_dim();
    let pose_dim = spaces.code_dim();
    if shape_init.dim() != (1, shape_dim) {
        return Err(FittingError::Dimension {
            expected: shape_dim,
            got: shape_init.len(),
            context: "initial shape code",
        });
    }
    if pose_init.len() != frames {
        return Err(FittingError::Dimension {
            expected: frames,
            got: pose_init.len(),
            context: "initial pose codes per frame",
        });
    }
    for p in pose_init {
        if p.dim() != (1, pose_dim) {
            return Err(FittingError::Dimension {
                expected: pose_dim,
                got: p.len(),
                context: "initial pose code",
            });
        }
    }

    let mut template_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "fit/template", 0));
    let (template, template_fallback) = sample_fitting_points(
        &spaces.shape,
        shape_init,
        config.template_points,
        config.displacement_sigma,
        config.mesh_resolution,
        &mut template_rng,
    );
    let template_encodings = encode_points(&template);
    let mut template_points = Array2::zeros((template.len(), 3));
    for (r, p) in template.iter().enumerate() {
        template_points[[r, 0]] = p[0];
        template_points[[r, 1]] = p[1];
        template_points[[r, 2]] = p[2];
    }

    let decay_interval = (config.iterations / 4).max(1);
    let mut shape_opt = AdamGroup::new(
        AdamSchedule {
            lr0: config.lr_shape,
            decay_factor: config.decay_factor,
            decay_interval,
        },
        &[(1, shape_dim)],
    );
    let mut pose_opt = AdamGroup::new(
        AdamSchedule {
            lr0: config.lr_pose,
            decay_factor: config.decay_factor,
            decay_interval,
        },
        &vec![(1, pose_dim); frames],
    );

    let mut shape_code = shape_init.clone();
    let mut pose_codes: Vec<Array2<f64>> = pose_init.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "fit/optimize", 0));
    let refresh_interval = (config.iterations / 8).max(1);
    let mut near: Option<NearSurface> = None;
    let mut losses = Vec::with_capacity(config.iterations);
    let mut diverged_at = None;

    for iter in 0..config.iterations {
        shape_opt.set_epoch(iter);
        pose_opt.set_epoch(iter);
        let icp_active = config.lambda_icp > 0.0 && 2 * iter < config.iterations;
        if icp_active && (near.is_none() || iter % refresh_interval == 0) {
            near = Some(near_surface_set(
                spaces,
                &shape_code,
                &template,
                &template_encodings,
                config,
            ));
        }

        let batch =
            rand::seq::index::sample(&mut rng, frames, config.batch_frames.min(frames)).into_vec();
        let subbatch = config.subbatch.min(template.len());
        let inputs: Vec<(usize, Array2<f64>, Array2<f64>)> = batch
            .iter()
            .map(|&j| {
                let idx =
                    rand::seq::index::sample(&mut rng, template.len(), subbatch).into_vec();
                (
                    j,
                    template_points.select(Axis(0), &idx),
                    template_encodings.select(Axis(0), &idx),
                )
            })
            .collect();

        let evals: Vec<FrameEnergy> = inputs
            .par_iter()
            .map(|(j, points, encodings)| {
                let mut neighbors = Vec::new();
                if *j > 0 {
                    neighbors.push(&pose_codes[*j - 1]);
                }
                if *j + 1 < frames {
                    neighbors.push(&pose_codes[*j + 1]);
                }
                let icp = if icp_active {
                    near.as_ref().map(|set| IcpTerm {
                        points: &set.points,
                        encodings: &set.encodings,
                        cloud: problem.clouds[*j].clone(),
                    })
                } else {
                    None
                };
                frame_energy(
                    spaces,
                    &shape_code,
                    &pose_codes[*j],
                    &neighbors,
                    points,
                    encodings,
                    &problem.observations[*j],
                    icp.as_ref(),
                    config,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;

        let record = IterationLosses {
            total: evals.iter().map(|e| e.total).sum(),
            reconstruction: evals.iter().map(|e| e.reconstruction).sum(),
            code_reg: evals.iter().map(|e| e.code_reg).sum(),
            temporal: evals.iter().map(|e| e.temporal).sum(),
            icp: evals.iter().map(|e| e.icp).sum(),
        };
        if !record.total.is_finite() {
            diverged_at = Some(iter);
            break;
        }
        losses.push(record);

        // Frame-ordered reduction keeps the shared shape gradient identical
        // regardless of how the batch was scheduled across threads.
        let mut shape_grad: Option<Array2<f64>> = None;
        let mut pose_grads: Vec<Option<Array2<f64>>> = vec![None; frames];
        for ((j, _, _), eval) in inputs.iter().zip(evals) {
            if let Some(g) = eval.shape_grad {
                match &mut shape_grad {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
            pose_grads[*j] = eval.pose_grad;
        }
        shape_opt.step(&mut [&mut shape_code], &[shape_grad]);
        let mut pose_refs: Vec<&mut Array2<f64>> = pose_codes.iter_mut().collect();
        pose_opt.step(&mut pose_refs, &pose_grads);
    }

    let (canonical_mesh, posed_meshes) =
        reconstruct_sequence(spaces, &shape_code, &pose_codes, config.mesh_resolution)?;
    Ok(FittingResult {
        shape_code,
        pose_codes,
        losses,
        canonical_mesh,
        posed_meshes,
        template_fallback,
        diverged_at,
    })
}

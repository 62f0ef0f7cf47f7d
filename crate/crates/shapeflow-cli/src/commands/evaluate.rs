//! Metric evaluation of a predicted sequence against ground truth.

use std::path::{Path, PathBuf};

use shapeflow::metrics::evaluate_sequence;

use super::load_mesh_sequence;
use crate::context::{CliError, RunContext};
use crate::manifest::{input_dir, RunManifest};

pub fn evaluate(ctx: &RunContext, pred: &Path, gt: Option<PathBuf>) -> Result<(), CliError> {
    let gt_dir = match gt {
        Some(dir) => dir,
        None => ctx
            .config_path(
                ctx.config.paths.corpus.as_deref(),
                "corpus",
                "SHAPEFLOW_CORPUS",
            )?
            .join("heldout"),
    };
    let inputs = vec![
        input_dir("predictions", pred, "frame")?,
        input_dir("ground_truth", &gt_dir, "gt")?,
    ];
    let pred_meshes = load_mesh_sequence(pred, "frame")?;
    let gt_meshes = load_mesh_sequence(&gt_dir, "gt")?;

    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "evaluate", inputs);
    man.declare_output("metrics.csv");
    man.declare_output("summary.json");
    man.write(out)?;

    let eval = evaluate_sequence(&pred_meshes, &gt_meshes, &ctx.config.evaluation)?;
    eval.write_csv(&out.join("metrics.csv"))?;
    eval.write_summary(&out.join("summary.json"))?;
    eprintln!(
        "evaluation over {} frames: iou={:.4} chamfer_l2={:.6e} epe={:.6e} ({})",
        eval.iou.len(),
        eval.mean_iou,
        eval.mean_chamfer_l2,
        eval.mean_epe,
        eval.chamfer_convention,
    );
    man.finish(out)
}

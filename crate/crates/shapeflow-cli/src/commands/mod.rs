//! Sub-command implementations and the artifact conventions they share.
//!
//! Every handler follows the same shape: resolve and fingerprint inputs
//! (nothing is written if one is missing), write the run manifest, produce
//! artifacts, then stamp the manifest with the elapsed time.

mod evaluate;
mod inference;
mod stages;

use std::path::{Path, PathBuf};

use ndarray::Array2;
use shapeflow::fitting::IterationLosses;
use shapeflow::geometry::TriMesh;
use shapeflow::math::Checkpoint;

use crate::context::{Cli, CliError, Command, RunContext};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = RunContext::prepare(&cli)?;
    ctx.log_header(cli.command.name());
    if ctx.dry_run {
        eprintln!("configuration ok (dry run)");
        return Ok(());
    }
    match cli.command {
        Command::Generate => stages::generate(&ctx),
        Command::TrainShape => stages::train_shape(&ctx),
        Command::TrainPose => stages::train_pose(&ctx),
        Command::TrainEncoders => stages::train_encoders(&ctx),
        Command::Fit { depth, init } => inference::fit(&ctx, depth, init),
        Command::Reconstruct { codes } => inference::reconstruct(&ctx, codes),
        Command::Interpolate { from, to, steps } => inference::interpolate(&ctx, from, to, steps),
        Command::Transfer {
            shape_codes,
            pose_codes,
        } => inference::transfer(&ctx, &shape_codes, &pose_codes),
        Command::Evaluate { pred, gt } => evaluate::evaluate(&ctx, &pred, gt),
    }
}

pub const CODES_FILE: &str = "codes.ckpt";

/// Packs fitted codes (and the loss curve) into a checkpoint container.
pub fn codes_checkpoint(
    shape_code: &Array2<f64>,
    pose_codes: &[Array2<f64>],
    losses: &[IterationLosses],
    diverged_at: Option<usize>,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.put_array("shape_code", shape_code);
    let pose_dim = pose_codes.first().map_or(0, |c| c.ncols());
    let mut stacked = Array2::zeros((pose_codes.len(), pose_dim));
    for (j, code) in pose_codes.iter().enumerate() {
        stacked.row_mut(j).assign(&code.row(0));
    }
    ck.put_array("pose_codes", &stacked);
    for (name, pick) in losses_columns() {
        let column: Vec<f64> = losses.iter().map(pick).collect();
        ck.put_f64s(name, &column);
    }
    if let Some(iter) = diverged_at {
        ck.put_u64("diverged_at", iter as u64);
    }
    ck
}

/// Unpacks a codes container into a shape code and per-frame pose codes.
pub fn codes_from_checkpoint(ck: &Checkpoint) -> Result<(Array2<f64>, Vec<Array2<f64>>), CliError> {
    let shape_code = ck.array("shape_code")?;
    let stacked = ck.array("pose_codes")?;
    let pose_codes = stacked
        .rows()
        .into_iter()
        .map(|row| row.insert_axis(ndarray::Axis(0)).to_owned())
        .collect();
    Ok((shape_code, pose_codes))
}

fn losses_columns() -> [(&'static str, fn(&IterationLosses) -> f64); 5] {
    [
        ("loss_total", |l| l.total),
        ("loss_reconstruction", |l| l.reconstruction),
        ("loss_code_reg", |l| l.code_reg),
        ("loss_temporal", |l| l.temporal),
        ("loss_icp", |l| l.icp),
    ]
}

pub fn write_fit_losses_csv(path: &Path, losses: &[IterationLosses]) -> Result<(), CliError> {
    use std::fmt::Write as _;
    let mut out = String::from("iteration,total,reconstruction,code_reg,temporal,icp\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            i, l.total, l.reconstruction, l.code_reg, l.temporal, l.icp
        );
    }
    std::fs::write(path, out).map_err(|e| CliError::Other(e.to_string()))
}

pub fn frame_mesh_name(index: usize) -> String {
    format!("frame{index:02}.obj")
}

/// Writes the canonical mesh plus one posed mesh per frame.
pub fn write_mesh_sequence(
    dir: &Path,
    canonical: &TriMesh,
    posed: &[TriMesh],
) -> Result<(), CliError> {
    canonical.save_obj(&dir.join("canonical.obj"))?;
    for (j, mesh) in posed.iter().enumerate() {
        mesh.save_obj(&dir.join(frame_mesh_name(j)))?;
    }
    Ok(())
}

/// Lists `<prefix>*.obj` directly inside `dir`, ordered by frame index
/// (length-then-name, so two- and three-digit indices interleave correctly).
pub fn mesh_sequence_paths(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix) && n.ends_with(".obj"))
        .collect();
    names.sort_by(|a, b| (a.len(), a.as_str()).cmp(&(b.len(), b.as_str())));
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

pub fn load_mesh_sequence(dir: &Path, prefix: &str) -> Result<Vec<TriMesh>, CliError> {
    let paths = mesh_sequence_paths(dir, prefix)?;
    if paths.is_empty() {
        return Err(CliError::MissingInput(format!(
            "no {prefix}*.obj meshes in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| TriMesh::load_obj(p).map_err(CliError::from))
        .collect()
}

//! Sequence fitting, reconstruction, shape interpolation and re-posing.

use std::path::{Path, PathBuf};

use shapeflow::corpus::DepthFrame;
use shapeflow::fitting::{
    fit_sequence, initialize_codes, interpolate_codes, reconstruct_sequence, transfer as repose,
    FittingProblem,
};
use shapeflow::geometry::extract_isosurface;
use shapeflow::math::Checkpoint;
use shapeflow::spaces::{PoseSpace, ShapeSpace, VoxelEncoder};

use super::{
    codes_checkpoint, codes_from_checkpoint, frame_mesh_name, write_fit_losses_csv,
    write_mesh_sequence, CODES_FILE,
};
use crate::context::{CliError, InitMode, RunContext};
use crate::manifest::{input_dir, input_file, RunManifest};

fn pose_space_path(ctx: &RunContext) -> Result<PathBuf, CliError> {
    ctx.config_path(
        ctx.config.paths.pose_space.as_deref(),
        "pose_space",
        "SHAPEFLOW_POSE_SPACE",
    )
}

/// Loads `depth*.bin` frames in index order.
fn load_depth_sequence(dir: &Path) -> Result<Vec<DepthFrame>, CliError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("depth") && n.ends_with(".bin"))
        .collect();
    names.sort_by(|a, b| (a.len(), a.as_str()).cmp(&(b.len(), b.as_str())));
    if names.is_empty() {
        return Err(CliError::MissingInput(format!(
            "no depth*.bin frames in {}",
            dir.display()
        )));
    }
    names
        .into_iter()
        .map(|n| DepthFrame::load(&dir.join(n)).map_err(CliError::from))
        .collect()
}

pub fn fit(ctx: &RunContext, depth: Option<PathBuf>, init: InitMode) -> Result<(), CliError> {
    let spaces_path = pose_space_path(ctx)?;
    let depth_dir = match depth {
        Some(dir) => dir,
        None => ctx
            .config_path(
                ctx.config.paths.corpus.as_deref(),
                "corpus",
                "SHAPEFLOW_CORPUS",
            )?
            .join("heldout"),
    };
    let mut inputs = vec![
        input_file("pose_space", &spaces_path)?,
        input_dir("depth_sequence", &depth_dir, "depth")?,
    ];
    let encoder_paths = match init {
        InitMode::Encoder => {
            let shape_enc = ctx.config_path(
                ctx.config.paths.shape_encoder.as_deref(),
                "shape_encoder",
                "SHAPEFLOW_SHAPE_ENCODER",
            )?;
            let pose_enc = ctx.config_path(
                ctx.config.paths.pose_encoder.as_deref(),
                "pose_encoder",
                "SHAPEFLOW_POSE_ENCODER",
            )?;
            inputs.push(input_file("shape_encoder", &shape_enc)?);
            inputs.push(input_file("pose_encoder", &pose_enc)?);
            Some((shape_enc, pose_enc))
        }
        InitMode::Average => None,
    };

    let spaces = PoseSpace::load(&spaces_path)?;
    let frames = load_depth_sequence(&depth_dir)?;
    let frame_count = frames.len();
    let encoders = match &encoder_paths {
        Some((s, p)) => Some((VoxelEncoder::load(s)?, VoxelEncoder::load(p)?)),
        None => None,
    };

    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "fit", inputs);
    man.declare_output(CODES_FILE);
    man.declare_output("losses.csv");
    man.declare_output("canonical.obj");
    for j in 0..frame_count {
        man.declare_output(frame_mesh_name(j));
    }
    man.write(out)?;

    let fitting = &ctx.config.fitting;
    eprintln!(
        "fitting {frame_count} frames: {} iterations, batch {}, subbatch {}, \
         grid {}^3, init {:?}",
        fitting.iterations, fitting.batch_frames, fitting.subbatch, fitting.grid_resolution, init,
    );
    let problem = FittingProblem::from_depth(&spaces, frames, fitting.clone())?;
    let (shape_init, pose_init) =
        initialize_codes(&problem, encoders.as_ref().map(|(s, p)| (s, p)))?;
    let result = fit_sequence(&problem, &shape_init, &pose_init)?;

    if result.template_fallback {
        eprintln!("warning: initial shape code decoded empty; template fell back to box samples");
    }
    codes_checkpoint(
        &result.shape_code,
        &result.pose_codes,
        &result.losses,
        result.diverged_at,
    )
    .save(&out.join(CODES_FILE))?;
    write_fit_losses_csv(&out.join("losses.csv"), &result.losses)?;
    write_mesh_sequence(out, &result.canonical_mesh, &result.posed_meshes)?;
    if let Some(last) = result.losses.last() {
        eprintln!(
            "fit done: final loss {:.6e} (reconstruction {:.6e})",
            last.total, last.reconstruction
        );
    }
    man.finish(out)?;
    if let Some(iter) = result.diverged_at {
        return Err(CliError::Numerical(format!(
            "loss went non-finite at iteration {iter}; artifacts keep the last finite codes"
        )));
    }
    Ok(())
}

pub fn reconstruct(ctx: &RunContext, codes: Option<PathBuf>) -> Result<(), CliError> {
    let spaces_path = pose_space_path(ctx)?;
    let codes_path = match codes {
        Some(path) => path,
        None => ctx
            .config_path(ctx.config.paths.fit.as_deref(), "fit", "SHAPEFLOW_FIT")?
            .join(CODES_FILE),
    };
    let inputs = vec![
        input_file("pose_space", &spaces_path)?,
        input_file("codes", &codes_path)?,
    ];
    let spaces = PoseSpace::load(&spaces_path)?;
    let (shape_code, pose_codes) = codes_from_checkpoint(&Checkpoint::load(&codes_path)?)?;

    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "reconstruct", inputs);
    man.declare_output("canonical.obj");
    for j in 0..pose_codes.len() {
        man.declare_output(frame_mesh_name(j));
    }
    man.write(out)?;

    let (canonical, posed) = reconstruct_sequence(
        &spaces,
        &shape_code,
        &pose_codes,
        ctx.config.fitting.mesh_resolution,
    )?;
    write_mesh_sequence(out, &canonical, &posed)?;
    eprintln!(
        "reconstructed {} frames over {} canonical vertices",
        posed.len(),
        canonical.vertices.len()
    );
    man.finish(out)
}

pub fn interpolate(ctx: &RunContext, from: usize, to: usize, steps: usize) -> Result<(), CliError> {
    let shape_path = ctx.config_path(
        ctx.config.paths.shape_space.as_deref(),
        "shape_space",
        "SHAPEFLOW_SHAPE_SPACE",
    )?;
    let inputs = vec![input_file("shape_space", &shape_path)?];
    let space = ShapeSpace::load(&shape_path)?;
    let identities = space.identity_count();
    for (name, index) in [("--from", from), ("--to", to)] {
        if index >= identities {
            return Err(CliError::Config(format!(
                "{name} {index} is out of range; the shape space has {identities} identities"
            )));
        }
    }

    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "interpolate", inputs);
    for k in 0..steps {
        man.declare_output(format!("step{k:02}.obj"));
    }
    man.write(out)?;

    let path = interpolate_codes(space.code(from), space.code(to), steps)
        .map_err(CliError::from)?;
    let resolution = ctx.config.fitting.mesh_resolution;
    for (k, code) in path.iter().enumerate() {
        let grid = space.decode_grid(code, resolution, true);
        let mesh = extract_isosurface(&grid, 0.0);
        if mesh.triangles.is_empty() {
            return Err(CliError::Numerical(format!(
                "interpolation step {k} decoded to an empty surface"
            )));
        }
        mesh.save_obj(&out.join(format!("step{k:02}.obj")))?;
    }
    eprintln!("decoded {steps} interpolation steps between identities {from} and {to}");
    man.finish(out)
}

pub fn transfer(ctx: &RunContext, shape_codes: &Path, pose_codes: &Path) -> Result<(), CliError> {
    let spaces_path = pose_space_path(ctx)?;
    let inputs = vec![
        input_file("pose_space", &spaces_path)?,
        input_file("shape_codes", shape_codes)?,
        input_file("pose_codes", pose_codes)?,
    ];
    let spaces = PoseSpace::load(&spaces_path)?;
    let (shape_code, _) = codes_from_checkpoint(&Checkpoint::load(shape_codes)?)?;
    let (_, pose_code_seq) = codes_from_checkpoint(&Checkpoint::load(pose_codes)?)?;

    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "transfer", inputs);
    man.declare_output("canonical.obj");
    for j in 0..pose_code_seq.len() {
        man.declare_output(frame_mesh_name(j));
    }
    man.write(out)?;

    let (canonical, posed) = repose(
        &spaces,
        &shape_code,
        &pose_code_seq,
        ctx.config.fitting.mesh_resolution,
    )?;
    write_mesh_sequence(out, &canonical, &posed)?;
    eprintln!(
        "transferred shape onto {} pose frames",
        posed.len()
    );
    man.finish(out)
}

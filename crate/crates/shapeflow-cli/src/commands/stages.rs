//! Corpus generation and the three training stages.

use std::path::PathBuf;

use shapeflow::corpus::{generate_corpus, CorpusManifest};
use shapeflow::fitting::train_corpus_encoders;
use shapeflow::spaces::{
    pose::sample_corpus_flows, shape::sample_corpus_shapes, train_pose_space, train_shape_space,
    write_loss_csv, ShapeSpace,
};

use crate::context::{CliError, RunContext};
use crate::manifest::{input_file, RunManifest};

pub const SHAPE_SPACE_FILE: &str = "shape_space.ckpt";
pub const POSE_SPACE_FILE: &str = "pose_space.ckpt";
pub const SHAPE_ENCODER_FILE: &str = "shape_encoder.ckpt";
pub const POSE_ENCODER_FILE: &str = "pose_encoder.ckpt";

/// The corpus manifest path, from `[paths] corpus`.
fn corpus_manifest_path(ctx: &RunContext) -> Result<PathBuf, CliError> {
    let dir = ctx.config_path(
        ctx.config.paths.corpus.as_deref(),
        "corpus",
        "SHAPEFLOW_CORPUS",
    )?;
    Ok(dir.join(shapeflow::corpus::generate::MANIFEST_FILE))
}

pub fn generate(ctx: &RunContext) -> Result<(), CliError> {
    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "generate", Vec::new());
    man.declare_output(shapeflow::corpus::generate::MANIFEST_FILE);
    man.write(out)?;

    let corpus = generate_corpus(&ctx.config.corpus, ctx.config.run_seed(), out)?;
    eprintln!(
        "generated {} identities, {} posed instances, {} held-out frames",
        corpus.identities.len(),
        corpus.instances.len(),
        corpus.heldout.depths.len()
    );
    man.finish(out)
}

pub fn train_shape(ctx: &RunContext) -> Result<(), CliError> {
    let manifest_path = corpus_manifest_path(ctx)?;
    let inputs = vec![input_file("corpus_manifest", &manifest_path)?];
    let corpus = CorpusManifest::load(&manifest_path)?;

    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "train-shape", inputs);
    man.declare_output(SHAPE_SPACE_FILE);
    man.declare_output("losses.csv");
    man.write(out)?;

    eprintln!(
        "sampling {} identities x {} points",
        corpus.identities.len(),
        ctx.config.shape.samples_per_identity
    );
    let samples = sample_corpus_shapes(&corpus, &ctx.config.shape)?;
    let (space, stats) = train_shape_space(&samples, &ctx.config.shape)?;
    space.save(&out.join(SHAPE_SPACE_FILE))?;
    write_loss_csv(&out.join("losses.csv"), &stats)?;
    if let Some(last) = stats.last() {
        eprintln!("shape space trained: final loss {:.6e}", last.loss);
    }
    man.finish(out)
}

pub fn train_pose(ctx: &RunContext) -> Result<(), CliError> {
    let manifest_path = corpus_manifest_path(ctx)?;
    let shape_path = ctx.config_path(
        ctx.config.paths.shape_space.as_deref(),
        "shape_space",
        "SHAPEFLOW_SHAPE_SPACE",
    )?;
    let inputs = vec![
        input_file("corpus_manifest", &manifest_path)?,
        input_file("shape_space", &shape_path)?,
    ];
    let corpus = CorpusManifest::load(&manifest_path)?;
    let shape = ShapeSpace::load(&shape_path)?;

    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "train-pose", inputs);
    man.declare_output(POSE_SPACE_FILE);
    man.declare_output("losses.csv");
    man.write(out)?;

    eprintln!(
        "sampling {} instances x {} correspondences",
        corpus.instances.len(),
        ctx.config.pose.samples_per_instance
    );
    let samples = sample_corpus_flows(&corpus, &ctx.config.pose)?;
    let (spaces, stats) = train_pose_space(shape, &samples, &ctx.config.pose)?;
    spaces.save(&out.join(POSE_SPACE_FILE))?;
    write_loss_csv(&out.join("losses.csv"), &stats)?;
    if let Some(last) = stats.last() {
        eprintln!("pose space trained: final loss {:.6e}", last.loss);
    }
    man.finish(out)
}

pub fn train_encoders(ctx: &RunContext) -> Result<(), CliError> {
    let manifest_path = corpus_manifest_path(ctx)?;
    let pose_path = ctx.config_path(
        ctx.config.paths.pose_space.as_deref(),
        "pose_space",
        "SHAPEFLOW_POSE_SPACE",
    )?;
    let inputs = vec![
        input_file("corpus_manifest", &manifest_path)?,
        input_file("pose_space", &pose_path)?,
    ];
    let corpus = CorpusManifest::load(&manifest_path)?;
    let spaces = shapeflow::spaces::PoseSpace::load(&pose_path)?;

    let out = ctx.out_dir()?;
    let mut man = RunManifest::new(ctx, "train-encoders", inputs);
    man.declare_output(SHAPE_ENCODER_FILE);
    man.declare_output(POSE_ENCODER_FILE);
    man.declare_output("losses_shape.csv");
    man.declare_output("losses_pose.csv");
    man.write(out)?;

    let (shape_enc, pose_enc, shape_stats, pose_stats) = train_corpus_encoders(
        &corpus,
        &spaces,
        &ctx.config.encoders,
        ctx.config.fitting.occlusion_cutoff,
    )?;
    shape_enc.save(&out.join(SHAPE_ENCODER_FILE))?;
    pose_enc.save(&out.join(POSE_ENCODER_FILE))?;
    write_loss_csv(&out.join("losses_shape.csv"), &shape_stats)?;
    write_loss_csv(&out.join("losses_pose.csv"), &pose_stats)?;
    let report = |tag: &str, stats: &[shapeflow::spaces::EpochStats]| {
        if let Some(last) = stats.last() {
            eprintln!("{tag} encoder trained: final loss {:.6e}", last.loss);
        }
    };
    report("shape", &shape_stats);
    report("pose", &pose_stats);
    man.finish(out)
}

//! The latent pose space: a flow decoder conditioned on a shape code and a
//! per-instance pose code, mapping canonical-frame points to their posed
//! displacement. The shape space is frozen while this trains.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use super::shape::{encode_points, encoding_dim, read_mlp, write_mlp, ShapeSpace};
use super::{plateaued, EpochStats, SpacesError};
use crate::corpus::CorpusManifest;
use crate::derive_seed;
use serde::{Deserialize, Serialize};
use crate::math::{
    standard_normal, AdamGroup, AdamSchedule, Checkpoint, MlpConfig, MlpParams, Tape,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseConfig {
    /// Latent pose code dimension D_p.
    pub code_dim: usize,
    /// Hidden width F_p.
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub skip_layer: usize,
    /// Pose prior scale σ_p; the regularizer is ‖p‖²/σ_p².
    pub sigma: f64,
    pub epochs: usize,
    pub batch_instances: usize,
    pub subbatch: usize,
    pub samples_per_instance: usize,
    /// Wide / tight normal-offset deviations for flow pair sampling.
    pub flow_sigma_wide: f64,
    pub flow_sigma_tight: f64,
    pub lr_net: f64,
    pub lr_codes: f64,
    pub decay_interval: usize,
    pub decay_factor: f64,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub seed: u64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        PoseConfig {
            code_dim: 32,
            hidden_dim: 128,
            hidden_layers: 8,
            skip_layer: 3,
            sigma: 100.0,
            epochs: 150,
            batch_instances: 4,
            subbatch: 1024,
            samples_per_instance: 20_000,
            flow_sigma_wide: 0.02,
            flow_sigma_tight: 0.002,
            lr_net: 5e-4,
            lr_codes: 1e-3,
            decay_interval: 500,
            decay_factor: 0.5,
            plateau_window: 25,
            plateau_tolerance: 0.005,
            seed: 0,
        }
    }
}

impl PoseConfig {
    /// Published full-scale settings: the wide flow decoder and the dense
    /// correspondence pools.
    pub fn paper_scale(seed: u64) -> Self {
        PoseConfig {
            code_dim: 256,
            hidden_dim: 1024,
            subbatch: 50_000,
            samples_per_instance: 200_000,
            flow_sigma_wide: 0.01,
            seed,
            ..PoseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SpacesError> {
        if self.code_dim == 0 || self.hidden_dim == 0 {
            return Err(SpacesError::InvalidConfig("zero-width flow decoder".into()));
        }
        if self.hidden_layers < 2 || self.skip_layer == 0 || self.skip_layer >= self.hidden_layers
        {
            return Err(SpacesError::InvalidConfig(
                "skip layer must lie strictly inside the hidden stack".into(),
            ));
        }
        if self.sigma <= 0.0 {
            return Err(SpacesError::InvalidConfig("sigma must be positive".into()));
        }
        if self.epochs == 0 || self.batch_instances == 0 || self.subbatch == 0 {
            return Err(SpacesError::InvalidConfig("empty training schedule".into()));
        }
        Ok(())
    }

    pub(crate) fn mlp_config(&self, shape_code_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim: shape_code_dim + self.code_dim + encoding_dim(),
            hidden_dim: self.hidden_dim,
            output_dim: 3,
            hidden_layers: self.hidden_layers,
            skip_layer: self.skip_layer,
            tanh_output: false,
        }
    }
}

/// Flow training pool for one posed instance: γ(x) of canonical points and
/// their target displacements.
#[derive(Debug, Clone)]
pub struct InstanceSamples {
    /// Index into the shape space's identity table.
    pub identity: usize,
    pub encodings: Array2<f64>,
    pub targets: Array2<f64>,
}

/// Builds flow pools for every posed instance of a corpus (including the
/// rest pose, whose target flow is identically zero up to sampling noise).
pub fn sample_corpus_flows(
    manifest: &CorpusManifest,
    config: &PoseConfig,
) -> Result<Vec<InstanceSamples>, SpacesError> {
    let mut out = Vec::with_capacity(manifest.instances.len());
    for (j, inst) in manifest.instances.iter().enumerate() {
        let canonical =
            manifest.load_mesh(&manifest.identities[inst.identity].canonical_mesh)?;
        let posed = manifest.load_mesh(&inst.mesh)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            "pose/samples",
            j as u64,
        ));
        let pairs = crate::geometry::sample_flow_pairs(
            &canonical,
            &posed,
            config.samples_per_instance,
            config.flow_sigma_wide,
            config.flow_sigma_tight,
            inst.identity,
            inst.pose,
            &mut rng,
        )?;
        let points: Vec<[f64; 3]> = pairs.iter().map(|p| p.canonical).collect();
        let encodings = encode_points(&points);
        let mut targets = Array2::zeros((pairs.len(), 3));
        for (r, pair) in pairs.iter().enumerate() {
            let f = pair.flow();
            targets[[r, 0]] = f[0];
            targets[[r, 1]] = f[1];
            targets[[r, 2]] = f[2];
        }
        out.push(InstanceSamples {
            identity: inst.identity,
            encodings,
            targets,
        });
    }
    Ok(out)
}

/// A trained pose space bundled with the frozen shape space it conditions
/// on: the flow decoder θ_p and one latent code per posed instance.
#[derive(Debug, Clone)]
pub struct PoseSpace {
    pub shape: ShapeSpace,
    pub params: MlpParams,
    pub codes: Vec<Array2<f64>>,
    /// Identity index behind each instance code.
    pub identity_of: Vec<usize>,
    pub sigma: f64,
}

impl PoseSpace {
    pub fn instance_count(&self) -> usize {
        self.codes.len()
    }

    pub fn code_dim(&self) -> usize {
        self.codes.first().map(|c| c.ncols()).unwrap_or(0)
    }

    pub fn code(&self, instance: usize) -> &Array2<f64> {
        &self.codes[instance]
    }

    pub fn code_table(&self) -> Array2<f64> {
        let mut table = Array2::zeros((self.codes.len(), self.code_dim()));
        for (i, c) in self.codes.iter().enumerate() {
            table.row_mut(i).assign(&c.row(0));
        }
        table
    }

    /// Evaluates the flow field at canonical points for a (shape, pose) code
    /// pair.
    pub fn flow(
        &self,
        shape_code: &Array2<f64>,
        pose_code: &Array2<f64>,
        points: &[[f64; 3]],
    ) -> Vec<[f64; 3]> {
        let ds = shape_code.ncols();
        let dp = pose_code.ncols();
        assert_eq!(ds + dp + encoding_dim(), self.params.config.input_dim);
        let compiled = self.params.compile();
        let enc = encode_points(points);
        let mut input = Array2::zeros((points.len(), self.params.config.input_dim));
        for r in 0..points.len() {
            for c in 0..ds {
                input[[r, c]] = shape_code[[0, c]];
            }
            for c in 0..dp {
                input[[r, ds + c]] = pose_code[[0, c]];
            }
            for c in 0..enc.ncols() {
                input[[r, ds + dp + c]] = enc[[r, c]];
            }
        }
        let out = compiled.forward(&input.view());
        (0..points.len())
            .map(|r| [out[[r, 0]], out[[r, 1]], out[[r, 2]]])
            .collect()
    }

    /// Warps canonical points into the posed frame: x ↦ x + f(s, p, x).
    pub fn warp(
        &self,
        shape_code: &Array2<f64>,
        pose_code: &Array2<f64>,
        points: &[[f64; 3]],
    ) -> Vec<[f64; 3]> {
        self.flow(shape_code, pose_code, points)
            .iter()
            .zip(points)
            .map(|(f, p)| [p[0] + f[0], p[1] + f[1], p[2] + f[2]])
            .collect()
    }

    /// Mean unsquared ℓ2 error between predicted and target flows for one
    /// pool, evaluated at the instance's learned code.
    pub fn mean_flow_error(&self, instance: usize, pool: &InstanceSamples) -> f64 {
        let shape_code = self.shape.code(pool.identity).clone();
        let compiled = self.params.compile();
        let ds = shape_code.ncols();
        let dp = self.code_dim();
        let n = pool.encodings.nrows();
        let mut input = Array2::zeros((n, self.params.config.input_dim));
        for r in 0..n {
            for c in 0..ds {
                input[[r, c]] = shape_code[[0, c]];
            }
            for c in 0..dp {
                input[[r, ds + c]] = self.codes[instance][[0, c]];
            }
            for c in 0..pool.encodings.ncols() {
                input[[r, ds + dp + c]] = pool.encodings[[r, c]];
            }
        }
        let pred = compiled.forward(&input.view());
        let mut total = 0.0;
        for r in 0..n {
            let dx = pred[[r, 0]] - pool.targets[[r, 0]];
            let dy = pred[[r, 1]] - pool.targets[[r, 1]];
            let dz = pred[[r, 2]] - pool.targets[[r, 2]];
            total += (dx * dx + dy * dy + dz * dz).sqrt();
        }
        total / n as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), SpacesError> {
        let mut ck = Checkpoint::new();
        ck.put_str("format", "pose_space v1");
        self.shape.write_into(&mut ck, "shape");
        ck.put_f64s("pose/sigma", &[self.sigma]);
        ck.put_array("pose/codes", &self.code_table());
        let ids: Vec<u8> = self
            .identity_of
            .iter()
            .flat_map(|&i| (i as u64).to_le_bytes())
            .collect();
        ck.put_bytes("pose/identity_of", ids);
        write_mlp(&mut ck, "pose/mlp", &self.params);
        ck.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PoseSpace, SpacesError> {
        let ck = Checkpoint::load(path)?;
        let shape = ShapeSpace::read_from(&ck, "shape")?;
        let sigma = ck.f64s("pose/sigma")?[0];
        let table = ck.array("pose/codes")?;
        let codes = table
            .rows()
            .into_iter()
            .map(|r| r.insert_axis(Axis(0)).to_owned())
            .collect();
        let raw = ck.bytes("pose/identity_of")?;
        let identity_of = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let params = read_mlp(&ck, "pose/mlp")?;
        Ok(PoseSpace {
            shape,
            params,
            codes,
            identity_of,
            sigma,
        })
    }
}

/// Trains the pose space on per-instance flow pools against a frozen shape
/// space. Shape codes enter the input as constants, so neither the shape
/// decoder nor its code table receives gradients.
pub fn train_pose_space(
    shape: ShapeSpace,
    samples: &[InstanceSamples],
    config: &PoseConfig,
) -> Result<(PoseSpace, Vec<EpochStats>), SpacesError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(SpacesError::EmptyInput("pose training needs instances"));
    }
    let enc_dim = encoding_dim();
    for s in samples {
        if s.identity >= shape.identity_count() {
            return Err(SpacesError::InvalidConfig(format!(
                "instance references identity {} but the shape space has {}",
                s.identity,
                shape.identity_count()
            )));
        }
        if s.encodings.ncols() != enc_dim {
            return Err(SpacesError::Dimension {
                expected: enc_dim,
                got: s.encodings.ncols(),
                context: "instance sample encodings",
            });
        }
        if s.encodings.nrows() != s.targets.nrows() || s.targets.ncols() != 3 {
            return Err(SpacesError::InvalidConfig(
                "flow pool targets must be (n, 3) aligned with encodings".into(),
            ));
        }
    }
    let j_count = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pose/train", 0));
    let mut params = MlpParams::init(config.mlp_config(shape.code_dim()), &mut rng);
    let mut codes: Vec<Array2<f64>> = (0..j_count)
        .map(|_| {
            Array2::from_shape_simple_fn((1, config.code_dim), || {
                standard_normal(&mut rng) * 0.01
            })
        })
        .collect();

    let net_schedule = AdamSchedule {
        lr0: config.lr_net,
        decay_factor: config.decay_factor,
        decay_interval: config.decay_interval,
    };
    let code_schedule = AdamSchedule {
        lr0: config.lr_codes,
        decay_factor: config.decay_factor,
        decay_interval: config.decay_interval,
    };
    let mut net_opt = AdamGroup::new(net_schedule, &params.shapes());
    let code_shapes: Vec<(usize, usize)> = vec![(1, config.code_dim); j_count];
    let mut code_opt = AdamGroup::new(code_schedule, &code_shapes);

    let mut stats = Vec::with_capacity(config.epochs);
    let mut losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..j_count).collect();
    for epoch in 0..config.epochs {
        net_opt.set_epoch(epoch);
        code_opt.set_epoch(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_instances) {
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape, true);
            let mut code_nodes = Vec::with_capacity(chunk.len());
            let mut inst_losses = Vec::with_capacity(chunk.len());
            for &j in chunk {
                let pool = &samples[j];
                let n = config.subbatch.min(pool.encodings.nrows());
                let idx =
                    rand::seq::index::sample(&mut rng, pool.encodings.nrows(), n).into_vec();
                let enc = tape.constant(pool.encodings.select(Axis(0), &idx));
                let tgt = tape.constant(pool.targets.select(Axis(0), &idx));
                let s_code = tape.constant(shape.code(pool.identity).clone());
                let s_bc = tape.broadcast_rows(s_code, n);
                let p_code = tape.leaf(codes[j].clone(), true);
                code_nodes.push((j, p_code));
                let p_bc = tape.broadcast_rows(p_code, n);
                let sp = tape.concat_cols(s_bc, p_bc);
                let input = tape.concat_cols(sp, enc);
                let pred = params.forward(&mut tape, &binding, input);
                let diff = tape.sub(pred, tgt);
                let sq = tape.row_sum_sq(diff);
                let data = tape.mean_all(sq);
                let psq = tape.row_sum_sq(p_code);
                let reg = tape.scale(psq, 1.0 / (config.sigma * config.sigma));
                inst_losses.push(tape.add(data, reg));
            }
            let terms: Vec<(crate::math::NodeId, f64)> =
                inst_losses.iter().map(|&l| (l, 1.0)).collect();
            let total = tape.weighted_sum(&terms);
            let loss = tape.scalar(total);
            if !loss.is_finite() {
                return Err(SpacesError::Diverged(format!(
                    "pose loss became {loss} at epoch {epoch}"
                )));
            }
            let mut grads = tape.backward(total)?;
            let ids = MlpParams::binding_ids(&binding);
            let net_grads: Vec<Option<Array2<f64>>> =
                ids.iter().map(|&id| grads.take(id)).collect();
            net_opt.step(&mut params.tensors_mut(), &net_grads);
            let mut code_grads: Vec<Option<Array2<f64>>> = vec![None; j_count];
            for (j, node) in &code_nodes {
                code_grads[*j] = grads.take(*node);
            }
            let mut code_refs: Vec<&mut Array2<f64>> = codes.iter_mut().collect();
            code_opt.step(&mut code_refs, &code_grads);
            epoch_loss += loss;
            batches += 1;
        }
        let loss = epoch_loss / batches as f64;
        stats.push(EpochStats {
            epoch,
            loss,
            lr_net: net_opt.current_lr(),
            lr_codes: code_opt.current_lr(),
        });
        losses.push(loss);
        if plateaued(&losses, config.plateau_window, config.plateau_tolerance) {
            break;
        }
    }
    let identity_of = samples.iter().map(|s| s.identity).collect();
    Ok((
        PoseSpace {
            shape,
            params,
            codes,
            identity_of,
            sigma: config.sigma,
        },
        stats,
    ))
}

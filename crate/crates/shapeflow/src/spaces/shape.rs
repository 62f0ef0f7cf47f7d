//! The latent shape space: a weight-normalized SDF decoder conditioned on
//! per-identity codes, trained auto-decoder style (codes are free
//! parameters optimized jointly with the network).

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

use super::{plateaued, EpochStats, SpacesError, POSITIONAL_BANDS};
use crate::corpus::CorpusManifest;
use crate::derive_seed;
use crate::geometry::{sample_shape_points, MeshSdf, SdfGrid, TriMesh};
use serde::{Deserialize, Serialize};
use crate::math::{
    positional_encoding_dim, positional_encoding_into, standard_normal, AdamGroup, AdamSchedule,
    Checkpoint, MlpConfig, MlpParams,
};

/// Positional-encoding width γ(x) shared by both decoders.
pub fn encoding_dim() -> usize {
    positional_encoding_dim(POSITIONAL_BANDS)
}

/// Encodes a point batch into γ(x) rows.
pub fn encode_points(points: &[[f64; 3]]) -> Array2<f64> {
    let dim = encoding_dim();
    let mut data = vec![0.0; points.len() * dim];
    data.par_chunks_mut(dim)
        .zip(points.par_iter())
        .for_each(|(row, &p)| positional_encoding_into(p, POSITIONAL_BANDS, row));
    Array2::from_shape_vec((points.len(), dim), data).expect("row-major encoding buffer")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    /// Latent code dimension D_s.
    pub code_dim: usize,
    /// Hidden width F_s.
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub skip_layer: usize,
    /// SDF clamp δ for the clamped-ℓ1 data term.
    pub delta: f64,
    /// Code prior scale σ_s; the regularizer is ‖s‖²/σ_s².
    pub sigma: f64,
    pub epochs: usize,
    pub batch_identities: usize,
    /// Samples drawn per identity per step.
    pub subbatch: usize,
    /// Size of the per-identity sample pool.
    pub samples_per_identity: usize,
    /// Fraction of the pool near the surface (the rest is uniform in the
    /// unit box).
    pub near_fraction: f64,
    /// Standard deviation of the near-surface perturbation.
    pub near_sigma: f64,
    pub lr_net: f64,
    pub lr_codes: f64,
    pub decay_interval: usize,
    pub decay_factor: f64,
    /// Early-stop window in epochs (0 disables plateau detection).
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub seed: u64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            code_dim: 32,
            hidden_dim: 128,
            hidden_layers: 8,
            skip_layer: 3,
            delta: 0.1,
            sigma: 100.0,
            epochs: 1500,
            batch_identities: 4,
            subbatch: 1024,
            samples_per_identity: 30_000,
            near_fraction: 0.7,
            near_sigma: 0.02,
            lr_net: 5e-4,
            lr_codes: 1e-3,
            decay_interval: 500,
            decay_factor: 0.5,
            plateau_window: 50,
            plateau_tolerance: 0.005,
            seed: 0,
        }
    }
}

impl ShapeConfig {
    /// Published full-scale settings: the wide decoder, the long schedule,
    /// and the dense per-identity sample pools.
    pub fn paper_scale(seed: u64) -> Self {
        ShapeConfig {
            code_dim: 256,
            hidden_dim: 512,
            epochs: 4000,
            subbatch: 50_000,
            samples_per_identity: 400_000,
            near_sigma: 0.05,
            seed,
            ..ShapeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SpacesError> {
        if self.code_dim == 0 || self.hidden_dim == 0 {
            return Err(SpacesError::InvalidConfig("zero-width decoder".into()));
        }
        if self.hidden_layers < 2 || self.skip_layer == 0 || self.skip_layer >= self.hidden_layers
        {
            return Err(SpacesError::InvalidConfig(
                "skip layer must lie strictly inside the hidden stack".into(),
            ));
        }
        if !(self.delta > 0.0 && self.sigma > 0.0) {
            return Err(SpacesError::InvalidConfig("delta and sigma must be positive".into()));
        }
        if self.epochs == 0 || self.batch_identities == 0 || self.subbatch == 0 {
            return Err(SpacesError::InvalidConfig("empty training schedule".into()));
        }
        if !(0.0..=1.0).contains(&self.near_fraction) {
            return Err(SpacesError::InvalidConfig("near_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub(crate) fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            input_dim: self.code_dim + encoding_dim(),
            hidden_dim: self.hidden_dim,
            output_dim: 1,
            hidden_layers: self.hidden_layers,
            skip_layer: self.skip_layer,
            tanh_output: true,
        }
    }
}

/// Precomputed training pool for one identity: γ(x) rows and raw signed
/// distances (clamping happens inside the loss).
#[derive(Debug, Clone)]
pub struct IdentitySamples {
    pub encodings: Array2<f64>,
    pub targets: Array2<f64>,
}

/// Samples a pool for one canonical mesh: `near_fraction` of the points are
/// surface points displaced by a Gaussian confined to the clamp band, the
/// rest uniform in the unit box.
pub fn sample_identity_sdf(
    mesh: &TriMesh,
    config: &ShapeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<IdentitySamples, SpacesError> {
    let sdf = MeshSdf::build(mesh.clone())?;
    let n_near = (config.samples_per_identity as f64 * config.near_fraction).round() as usize;
    let n_uniform = config.samples_per_identity - n_near;
    let samples = sample_shape_points(
        &sdf,
        n_near,
        n_uniform,
        config.delta,
        config.near_sigma,
        rng,
    )?;
    let points: Vec<[f64; 3]> = samples.iter().map(|s| s.point).collect();
    let encodings = encode_points(&points);
    let mut targets = Array2::zeros((samples.len(), 1));
    for (i, s) in samples.iter().enumerate() {
        targets[[i, 0]] = s.sdf;
    }
    Ok(IdentitySamples { encodings, targets })
}

/// Builds sample pools for every identity of a corpus.
pub fn sample_corpus_shapes(
    manifest: &CorpusManifest,
    config: &ShapeConfig,
) -> Result<Vec<IdentitySamples>, SpacesError> {
    manifest
        .identities
        .iter()
        .map(|entry| {
            let mesh = manifest.load_mesh(&entry.canonical_mesh)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed,
                "shape/samples",
                entry.index as u64,
            ));
            sample_identity_sdf(&mesh, config, &mut rng)
        })
        .collect()
}

/// A trained shape space: the SDF decoder θ_s and one latent code per
/// identity.
#[derive(Debug, Clone)]
pub struct ShapeSpace {
    pub params: MlpParams,
    pub codes: Vec<Array2<f64>>,
    pub delta: f64,
    pub sigma: f64,
}

impl ShapeSpace {
    pub fn identity_count(&self) -> usize {
        self.codes.len()
    }

    pub fn code_dim(&self) -> usize {
        self.codes.first().map(|c| c.ncols()).unwrap_or(0)
    }

    pub fn code(&self, identity: usize) -> &Array2<f64> {
        &self.codes[identity]
    }

    /// Stacks the code table into one (S, D_s) matrix.
    pub fn code_table(&self) -> Array2<f64> {
        let mut table = Array2::zeros((self.codes.len(), self.code_dim()));
        for (i, c) in self.codes.iter().enumerate() {
            table.row_mut(i).assign(&c.row(0));
        }
        table
    }

    /// Decodes SDF values at `points` for a given code (double precision).
    pub fn decode(&self, code: &Array2<f64>, points: &[[f64; 3]]) -> Vec<f64> {
        assert_eq!(code.dim(), (1, self.code_dim()), "bad code shape");
        let compiled = self.params.compile();
        let dim = encoding_dim();
        points
            .par_chunks(8192)
            .flat_map_iter(|chunk| {
                let mut input = Array2::zeros((chunk.len(), self.code_dim() + dim));
                for (r, &p) in chunk.iter().enumerate() {
                    for (c, v) in code.row(0).iter().enumerate() {
                        input[[r, c]] = *v;
                    }
                    positional_encoding_into(
                        p,
                        POSITIONAL_BANDS,
                        &mut input
                            .row_mut(r)
                            .into_slice()
                            .unwrap()[self.code_dim()..],
                    );
                }
                let out = compiled.forward(&input.view());
                out.column(0).to_vec()
            })
            .collect()
    }

    /// Decodes the SDF on an n³ node grid over the unit box in single
    /// precision (grid decodes dominate reconstruction time). With
    /// `close_boundary` the outermost nodes are clamped to a small positive
    /// value so the zero level set is always closed inside the box.
    pub fn decode_grid(&self, code: &Array2<f64>, res: usize, close_boundary: bool) -> SdfGrid {
        assert!(res >= 2);
        let compiled = self.params.compile_f32();
        let code_f32: Vec<f32> = code.row(0).iter().map(|v| *v as f32).collect();
        let dim = encoding_dim();
        let d = self.code_dim();
        let voxel = 1.0 / (res - 1) as f64;
        let slabs: Vec<Vec<f64>> = (0..res)
            .into_par_iter()
            .map(|k| {
                let z = -0.5 + k as f64 * voxel;
                let mut input = Array2::<f32>::zeros((res * res, d + dim));
                let mut enc = vec![0.0f64; dim];
                for j in 0..res {
                    let y = -0.5 + j as f64 * voxel;
                    for i in 0..res {
                        let x = -0.5 + i as f64 * voxel;
                        let r = j * res + i;
                        for (c, v) in code_f32.iter().enumerate() {
                            input[[r, c]] = *v;
                        }
                        positional_encoding_into([x, y, z], POSITIONAL_BANDS, &mut enc);
                        for (c, v) in enc.iter().enumerate() {
                            input[[r, d + c]] = *v as f32;
                        }
                    }
                }
                let out = compiled.forward(&input.view());
                out.column(0).iter().map(|v| *v as f64).collect()
            })
            .collect();
        let mut grid = SdfGrid::new([res, res, res], [-0.5; 3], voxel);
        for (k, slab) in slabs.into_iter().enumerate() {
            let base = k * res * res;
            grid.values[base..base + res * res].copy_from_slice(&slab);
        }
        if close_boundary {
            let last = res - 1;
            for k in 0..res {
                for j in 0..res {
                    for i in 0..res {
                        if i == 0 || j == 0 || k == 0 || i == last || j == last || k == last {
                            let idx = (k * res + j) * res + i;
                            grid.values[idx] = grid.values[idx].max(1e-4);
                        }
                    }
                }
            }
        }
        grid
    }

    pub(crate) fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_f64s(&format!("{prefix}/delta"), &[self.delta]);
        ck.put_f64s(&format!("{prefix}/sigma"), &[self.sigma]);
        ck.put_array(&format!("{prefix}/codes"), &self.code_table());
        write_mlp(ck, &format!("{prefix}/mlp"), &self.params);
    }

    pub(crate) fn read_from(ck: &Checkpoint, prefix: &str) -> Result<ShapeSpace, SpacesError> {
        let delta = ck.f64s(&format!("{prefix}/delta"))?[0];
        let sigma = ck.f64s(&format!("{prefix}/sigma"))?[0];
        let table = ck.array(&format!("{prefix}/codes"))?;
        let codes = table
            .rows()
            .into_iter()
            .map(|r| r.insert_axis(Axis(0)).to_owned())
            .collect();
        let params = read_mlp(ck, &format!("{prefix}/mlp"))?;
        Ok(ShapeSpace {
            params,
            codes,
            delta,
            sigma,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SpacesError> {
        let mut ck = Checkpoint::new();
        ck.put_str("format", "shape_space v1");
        self.write_into(&mut ck, "shape");
        ck.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ShapeSpace, SpacesError> {
        let ck = Checkpoint::load(path)?;
        Self::read_from(&ck, "shape")
    }
}

pub(crate) fn write_mlp(ck: &mut Checkpoint, prefix: &str, params: &MlpParams) {
    let c = params.config;
    ck.put_u64(&format!("{prefix}/input_dim"), c.input_dim as u64);
    ck.put_u64(&format!("{prefix}/hidden_dim"), c.hidden_dim as u64);
    ck.put_u64(&format!("{prefix}/output_dim"), c.output_dim as u64);
    ck.put_u64(&format!("{prefix}/hidden_layers"), c.hidden_layers as u64);
    ck.put_u64(&format!("{prefix}/skip_layer"), c.skip_layer as u64);
    ck.put_u64(&format!("{prefix}/tanh_output"), c.tanh_output as u64);
    for (l, layer) in params.layers.iter().enumerate() {
        ck.put_array(&format!("{prefix}/layer{l}/v"), &layer.v);
        ck.put_array(&format!("{prefix}/layer{l}/g"), &layer.g);
        ck.put_array(&format!("{prefix}/layer{l}/b"), &layer.b);
    }
}

pub(crate) fn read_mlp(ck: &Checkpoint, prefix: &str) -> Result<MlpParams, SpacesError> {
    let config = MlpConfig {
        input_dim: ck.u64(&format!("{prefix}/input_dim"))? as usize,
        hidden_dim: ck.u64(&format!("{prefix}/hidden_dim"))? as usize,
        output_dim: ck.u64(&format!("{prefix}/output_dim"))? as usize,
        hidden_layers: ck.u64(&format!("{prefix}/hidden_layers"))? as usize,
        skip_layer: ck.u64(&format!("{prefix}/skip_layer"))? as usize,
        tanh_output: ck.u64(&format!("{prefix}/tanh_output"))? != 0,
    };
    let mut layers = Vec::with_capacity(config.hidden_layers + 1);
    for l in 0..=config.hidden_layers {
        layers.push(crate::math::mlp::WnLayer {
            v: ck.array(&format!("{prefix}/layer{l}/v"))?,
            g: ck.array(&format!("{prefix}/layer{l}/g"))?,
            b: ck.array(&format!("{prefix}/layer{l}/b"))?,
        });
    }
    Ok(MlpParams { config, layers })
}

/// Trains the shape space on per-identity SDF sample pools.
///
/// Every step draws a sub-batch per identity in the batch, evaluates the
/// clamped-ℓ1 data term plus the code prior ‖s‖²/σ_s², and updates the
/// decoder and the in-batch codes with separate Adam groups (codes outside
/// the batch keep their optimizer state untouched).
pub fn train_shape_space(
    samples: &[IdentitySamples],
    config: &ShapeConfig,
) -> Result<(ShapeSpace, Vec<EpochStats>), SpacesError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(SpacesError::EmptyInput("shape training needs identities"));
    }
    let enc_dim = encoding_dim();
    for s in samples {
        if s.encodings.ncols() != enc_dim {
            return Err(SpacesError::Dimension {
                expected: enc_dim,
                got: s.encodings.ncols(),
                context: "identity sample encodings",
            });
        }
        if s.encodings.nrows() != s.targets.nrows() || s.targets.ncols() != 1 {
            return Err(SpacesError::InvalidConfig(
                "sample pool targets must be (n, 1) aligned with encodings".into(),
            ));
        }
    }
    let s_count = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shape/train", 0));
    let mut params = MlpParams::init(config.mlp_config(), &mut rng);
    let mut codes: Vec<Array2<f64>> = (0..s_count)
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
    let code_shapes: Vec<(usize, usize)> = vec![(1, config.code_dim); s_count];
    let mut code_opt = AdamGroup::new(code_schedule, &code_shapes);

    let mut stats = Vec::with_capacity(config.epochs);
    let mut losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..s_count).collect();
    for epoch in 0..config.epochs {
        net_opt.set_epoch(epoch);
        code_opt.set_epoch(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_identities) {
            let mut tape = crate::math::Tape::new();
            let binding = params.bind(&mut tape, true);
            let mut code_nodes = Vec::with_capacity(chunk.len());
            let mut id_losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pool = &samples[i];
                let n = config.subbatch.min(pool.encodings.nrows());
                let idx =
                    rand::seq::index::sample(&mut rng, pool.encodings.nrows(), n).into_vec();
                let enc = tape.constant(pool.encodings.select(Axis(0), &idx));
                let tgt = tape.constant(pool.targets.select(Axis(0), &idx));
                let code = tape.leaf(codes[i].clone(), true);
                code_nodes.push((i, code));
                let bc = tape.broadcast_rows(code, n);
                let input = tape.concat_cols(bc, enc);
                let pred = params.forward(&mut tape, &binding, input);
                let elem = tape.clamped_l1(pred, tgt, config.delta);
                let data = tape.mean_all(elem);
                let sq = tape.row_sum_sq(code);
                let reg = tape.scale(sq, 1.0 / (config.sigma * config.sigma));
                id_losses.push(tape.add(data, reg));
            }
            let terms: Vec<(crate::math::NodeId, f64)> =
                id_losses.iter().map(|&l| (l, 1.0)).collect();
            let total = tape.weighted_sum(&terms);
            let loss = tape.scalar(total);
            if !loss.is_finite() {
                return Err(SpacesError::Diverged(format!(
                    "shape loss became {loss} at epoch {epoch}"
                )));
            }
            let mut grads = tape.backward(total)?;
            let ids = MlpParams::binding_ids(&binding);
            let net_grads: Vec<Option<Array2<f64>>> =
                ids.iter().map(|&id| grads.take(id)).collect();
            net_opt.step(&mut params.tensors_mut(), &net_grads);
            let mut code_grads: Vec<Option<Array2<f64>>> = vec![None; s_count];
            for (i, node) in &code_nodes {
                code_grads[*i] = grads.take(*node);
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
    Ok((
        ShapeSpace {
            params,
            codes,
            delta: config.delta,
            sigma: config.sigma,
        },
        stats,
    ))
}

//! Voxel-grid-to-latent-code encoders used to initialize fitting: strided
//! 3D conv stacks regressed onto the code tables of a trained space with a
//! mean-squared-error objective.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use super::{plateaued, EpochStats, SpacesError};
use crate::derive_seed;
use crate::math::{AdamGroup, AdamSchedule, Checkpoint, Tape, VoxelConvStack};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Cubic input resolution of the occupancy grid.
    pub input_res: usize,
    /// Output channels of the stride-2 conv blocks.
    pub channels: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay_interval: usize,
    pub decay_factor: f64,
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_res: 32,
            channels: vec![16, 32, 64, 128, 256],
            epochs: 200,
            batch: 8,
            lr: 1e-3,
            decay_interval: 500,
            decay_factor: 0.5,
            plateau_window: 25,
            plateau_tolerance: 0.005,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Published full-scale settings: dense input grids and the six-block
    /// convolution stack.
    pub fn paper_scale(seed: u64) -> Self {
        EncoderConfig {
            input_res: 256,
            channels: vec![16, 32, 64, 128, 256, 256],
            seed,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SpacesError> {
        if self.channels.is_empty() {
            return Err(SpacesError::InvalidConfig("encoder needs conv blocks".into()));
        }
        if self.input_res < (1 << self.channels.len()) {
            return Err(SpacesError::InvalidConfig(format!(
                "input resolution {} too small for {} stride-2 blocks",
                self.input_res,
                self.channels.len()
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(SpacesError::InvalidConfig("empty training schedule".into()));
        }
        Ok(())
    }
}

/// One encoder training pair: a flattened occupancy grid (x-fastest layout,
/// res³ entries) and the code it should regress to.
#[derive(Debug, Clone)]
pub struct EncoderSample {
    pub grid: Vec<f64>,
    pub target: Array2<f64>,
}

/// A trained voxel encoder.
#[derive(Debug, Clone)]
pub struct VoxelEncoder {
    pub stack: VoxelConvStack,
}

impl VoxelEncoder {
    pub fn input_res(&self) -> usize {
        self.stack.input_res
    }

    pub fn code_dim(&self) -> usize {
        self.stack.code_dim
    }

    /// Maps an occupancy grid to a latent code estimate.
    pub fn encode(&self, grid: &[f64]) -> Result<Array2<f64>, SpacesError> {
        let expected = self.stack.input_res.pow(3);
        if grid.len() != expected {
            return Err(SpacesError::Dimension {
                expected,
                got: grid.len(),
                context: "encoder input grid",
            });
        }
        Ok(self.stack.infer(grid))
    }

    pub fn save(&self, path: &Path) -> Result<(), SpacesError> {
        let mut ck = Checkpoint::new();
        ck.put_str("format", "voxel_encoder v1");
        self.write_into(&mut ck, "encoder");
        ck.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VoxelEncoder, SpacesError> {
        let ck = Checkpoint::load(path)?;
        Self::read_from(&ck, "encoder")
    }

    pub(crate) fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_u64(&format!("{prefix}/input_res"), self.stack.input_res as u64);
        ck.put_u64(&format!("{prefix}/code_dim"), self.stack.code_dim as u64);
        let widths: Vec<u8> = self
            .stack
            .channels
            .iter()
            .flat_map(|&c| (c as u64).to_le_bytes())
            .collect();
        ck.put_bytes(&format!("{prefix}/channels"), widths);
        for (i, layer) in self.stack.convs.iter().enumerate() {
            ck.put_array(&format!("{prefix}/conv{i}/w"), &layer.w);
            ck.put_array(&format!("{prefix}/conv{i}/b"), &layer.b);
        }
        ck.put_array(&format!("{prefix}/fc/w"), &self.stack.fc_w);
        ck.put_array(&format!("{prefix}/fc/b"), &self.stack.fc_b);
    }

    pub(crate) fn read_from(ck: &Checkpoint, prefix: &str) -> Result<VoxelEncoder, SpacesError> {
        let input_res = ck.u64(&format!("{prefix}/input_res"))? as usize;
        let code_dim = ck.u64(&format!("{prefix}/code_dim"))? as usize;
        let channels: Vec<usize> = ck
            .bytes(&format!("{prefix}/channels"))?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let mut convs = Vec::with_capacity(channels.len());
        for i in 0..channels.len() {
            convs.push(crate::math::conv::ConvLayer {
                w: ck.array(&format!("{prefix}/conv{i}/w"))?,
                b: ck.array(&format!("{prefix}/conv{i}/b"))?,
            });
        }
        Ok(VoxelEncoder {
            stack: VoxelConvStack {
                input_res,
                channels,
                code_dim,
                convs,
                fc_w: ck.array(&format!("{prefix}/fc/w"))?,
                fc_b: ck.array(&format!("{prefix}/fc/b"))?,
            },
        })
    }
}

/// Trains a voxel encoder to regress latent codes from occupancy grids with
/// mean squared error.
pub fn train_voxel_encoder(
    samples: &[EncoderSample],
    config: &EncoderConfig,
) -> Result<(VoxelEncoder, Vec<EpochStats>), SpacesError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(SpacesError::EmptyInput("encoder training needs samples"));
    }
    let voxels = config.input_res.pow(3);
    let code_dim = samples[0].target.ncols();
    for s in samples {
        if s.grid.len() != voxels {
            return Err(SpacesError::Dimension {
                expected: voxels,
                got: s.grid.len(),
                context: "encoder training grid",
            });
        }
        if s.target.dim() != (1, code_dim) {
            return Err(SpacesError::InvalidConfig(
                "encoder targets must share one (1, D) shape".into(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "encoder/train", 0));
    let mut stack = VoxelConvStack::init(config.input_res, &config.channels, code_dim, &mut rng);
    let schedule = AdamSchedule {
        lr0: config.lr,
        decay_factor: config.decay_factor,
        decay_interval: config.decay_interval,
    };
    let mut opt = AdamGroup::new(schedule, &stack.shapes());

    let mut stats = Vec::with_capacity(config.epochs);
    let mut losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let mut tape = Tape::new();
            let binding = stack.bind(&mut tape, true);
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sample = &samples[i];
                let x = tape.constant(
                    Array2::from_shape_vec((voxels, 1), sample.grid.clone())
                        .expect("validated grid length"),
                );
                let pred = stack.forward(&mut tape, &binding, x);
                let tgt = tape.constant(sample.target.clone());
                let diff = tape.sub(pred, tgt);
                let sq = tape.row_sum_sq(diff);
                terms.push(tape.scale(sq, 1.0 / code_dim as f64));
            }
            let weights: Vec<(crate::math::NodeId, f64)> = terms
                .iter()
                .map(|&t| (t, 1.0 / chunk.len() as f64))
                .collect();
            let total = tape.weighted_sum(&weights);
            let loss = tape.scalar(total);
            if !loss.is_finite() {
                return Err(SpacesError::Diverged(format!(
                    "encoder loss became {loss} at epoch {epoch}"
                )));
            }
            let mut grads = tape.backward(total)?;
            let ids = VoxelConvStack::binding_ids(&binding);
            let g: Vec<Option<Array2<f64>>> = ids.iter().map(|&id| grads.take(id)).collect();
            opt.step(&mut stack.tensors_mut(), &g);
            epoch_loss += loss;
            batches += 1;
        }
        let loss = epoch_loss / batches as f64;
        stats.push(EpochStats {
            epoch,
            loss,
            lr_net: opt.current_lr(),
            lr_codes: opt.current_lr(),
        });
        losses.push(loss);
        if plateaued(&losses, config.plateau_window, config.plateau_tolerance) {
            break;
        }
    }
    Ok((VoxelEncoder { stack }, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(epochs: usize) -> EncoderConfig {
        EncoderConfig {
            input_res: 16,
            channels: vec![8, 16, 32, 64],
            epochs,
            batch: 4,
            plateau_window: 0,
            seed: 3,
            ..EncoderConfig::default()
        }
    }

    fn random_grid(res: usize, fill: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..res * res * res)
            .map(|_| if rng.gen::<f64>() < fill { 1.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn constant_target_converges_to_that_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = ndarray::array![[0.4, -0.2, 0.1, 0.3]];
        let samples: Vec<EncoderSample> = (0..10)
            .map(|_| EncoderSample {
                grid: random_grid(16, 0.2, &mut rng),
                target: target.clone(),
            })
            .collect();
        let config = tiny_config(150);
        let (enc, stats) = train_voxel_encoder(&samples, &config).unwrap();
        assert!(stats.last().unwrap().loss < 1e-4, "final MSE {}", stats.last().unwrap().loss);
        // Any grid, even one never seen, regresses to the single target.
        let probe = random_grid(16, 0.2, &mut rng);
        let code = enc.encode(&probe).unwrap();
        for (p, t) in code.iter().zip(target.iter()) {
            assert!((p - t).abs() < 0.05, "predicted {p} vs target {t}");
        }
    }

    #[test]
    fn mse_decreases_over_windows_with_distinct_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<EncoderSample> = (0..8)
            .map(|i| EncoderSample {
                grid: random_grid(16, 0.15 + 0.05 * (i % 3) as f64, &mut rng),
                target: ndarray::array![[
                    0.1 * i as f64 - 0.3,
                    0.05 * (i as f64).sin(),
                    -0.1,
                    0.2
                ]],
            })
            .collect();
        let config = tiny_config(120);
        let (_, stats) = train_voxel_encoder(&samples, &config).unwrap();
        let w = 30;
        let first: f64 = stats[..w].iter().map(|s| s.loss).sum::<f64>() / w as f64;
        let last: f64 = stats[stats.len() - w..].iter().map(|s| s.loss).sum::<f64>() / w as f64;
        assert!(last < first, "windowed MSE should fall: {first} -> {last}");
    }

    #[test]
    fn empty_grid_encodes_to_finite_code_and_mismatch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = vec![EncoderSample {
            grid: random_grid(16, 0.2, &mut rng),
            target: ndarray::array![[0.1, 0.2, 0.3, 0.4]],
        }];
        let config = tiny_config(2);
        let (enc, _) = train_voxel_encoder(&samples, &config).unwrap();
        let empty = vec![0.0; 16 * 16 * 16];
        let code = enc.encode(&empty).unwrap();
        assert!(code.iter().all(|v| v.is_finite()));
        assert_eq!(code.dim(), (1, 4));

        let err = enc.encode(&vec![0.0; 10]).unwrap_err();
        assert!(matches!(err, SpacesError::Dimension { .. }));
    }

    #[test]
    fn identical_inputs_give_identical_codes_and_training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<EncoderSample> = (0..6)
            .map(|i| EncoderSample {
                grid: random_grid(16, 0.2, &mut rng),
                target: ndarray::array![[0.05 * i as f64, -0.1, 0.0, 0.1]],
            })
            .collect();
        let config = tiny_config(10);
        let (a, sa) = train_voxel_encoder(&samples, &config).unwrap();
        let (b, sb) = train_voxel_encoder(&samples, &config).unwrap();
        assert_eq!(
            sa.last().unwrap().loss.to_bits(),
            sb.last().unwrap().loss.to_bits()
        );
        let ca = a.encode(&samples[0].grid).unwrap();
        let cb = b.encode(&samples[0].grid).unwrap();
        assert_eq!(ca, cb);
        // Duplicated frames encode identically within one encoder.
        let dup = samples[2].grid.clone();
        assert_eq!(a.encode(&dup).unwrap(), a.encode(&samples[2].grid).unwrap());
    }

    #[test]
    fn save_load_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = vec![EncoderSample {
            grid: random_grid(16, 0.25, &mut rng),
            target: ndarray::array![[0.3, -0.3, 0.2, -0.2]],
        }];
        let config = tiny_config(3);
        let (enc, _) = train_voxel_encoder(&samples, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.ck");
        enc.save(&path).unwrap();
        let loaded = VoxelEncoder::load(&path).unwrap();
        assert_eq!(enc.stack.channels, loaded.stack.channels);
        assert_eq!(enc.stack.fc_w, loaded.stack.fc_w);
        let probe = random_grid(16, 0.2, &mut rng);
        assert_eq!(enc.encode(&probe).unwrap(), loaded.encode(&probe).unwrap());
    }
}

//! The shared decoder architecture: a weight-normalized fully-connected
//! network with ReLU activations and a mid-network skip connection that
//! re-injects the raw input. The SDF head applies tanh to its scalar
//! output; the flow head emits an unsquashed 3-vector.

use ndarray::{concatenate, Array2, ArrayView2, Axis, NdFloat};
use rand::Rng;

use super::standard_normal;
use super::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Number of hidden (ReLU) layers; the output projection is extra.
    pub hidden_layers: usize,
    /// Hidden layer whose input is `[h | input]` instead of `h` (0-based,
    /// must be in `1..hidden_layers`).
    pub skip_layer: usize,
    pub tanh_output: bool,
}

impl MlpConfig {
    /// Input width seen by hidden layer `l`.
    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else if l == self.skip_layer {
            self.hidden_dim + self.input_dim
        } else {
            self.hidden_dim
        }
    }
}

/// One weight-normalized layer: direction matrix `v` (out, in), per-row
/// magnitude `g` (1, out) and bias `b` (1, out). The effective weight row is
/// `g_r * v_r / ||v_r||`.
#[derive(Debug, Clone)]
pub struct WnLayer {
    pub v: Array2<f64>,
    pub g: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub config: MlpConfig,
    /// `hidden_layers` ReLU layers followed by the output projection.
    pub layers: Vec<WnLayer>,
}

/// Tape handles for one bound network.
pub struct MlpBinding {
    layers: Vec<(NodeId, NodeId, NodeId)>,
}

impl MlpParams {
    /// Random init: fan-in-scaled normal directions, magnitudes set to the
    /// direction norms (so the effective weights start equal to `v`), zero
    /// biases.
    pub fn init<R: Rng>(config: MlpConfig, rng: &mut R) -> Self {
        assert!(config.hidden_layers >= 2, "need at least two hidden layers");
        assert!(
            config.skip_layer >= 1 && config.skip_layer < config.hidden_layers,
            "skip layer out of range"
        );
        let mut layers = Vec::with_capacity(config.hidden_layers + 1);
        for l in 0..=config.hidden_layers {
            let (out_dim, in_dim, gain) = if l == config.hidden_layers {
                (config.output_dim, config.hidden_dim, 1.0)
            } else {
                (config.hidden_dim, config.layer_in(l), 2.0f64)
            };
            let std = (gain / in_dim as f64).sqrt();
            let v = Array2::from_shape_simple_fn((out_dim, in_dim), || standard_normal(rng) * std);
            let mut g = Array2::zeros((1, out_dim));
            for (r, row) in v.rows().into_iter().enumerate() {
                g[[0, r]] = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            }
            let b = Array2::zeros((1, out_dim));
            layers.push(WnLayer { v, g, b });
        }
        MlpParams { config, layers }
    }

    /// Registers every parameter tensor on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpBinding {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.v.clone(), trainable),
                    tape.leaf(l.g.clone(), trainable),
                    tape.leaf(l.b.clone(), trainable),
                )
            })
            .collect();
        MlpBinding { layers }
    }

    /// Recorded forward pass over a batch; `input` is (n, input_dim).
    pub fn forward(&self, tape: &mut Tape, binding: &MlpBinding, input: NodeId) -> NodeId {
        let mut h = input;
        for l in 0..self.config.hidden_layers {
            let xin = if l == self.config.skip_layer {
                tape.concat_cols(h, input)
            } else {
                h
            };
            let (v, g, b) = binding.layers[l];
            let lin = tape.linear_wn(xin, v, g, b);
            h = tape.relu(lin);
        }
        let (v, g, b) = binding.layers[self.config.hidden_layers];
        let out = tape.linear_wn(h, v, g, b);
        if self.config.tanh_output {
            tape.tanh(out)
        } else {
            out
        }
    }

    /// Folds magnitudes into plain weight matrices for tape-free inference.
    pub fn compile(&self) -> CompiledMlp<f64> {
        let mut w = Vec::with_capacity(self.layers.len());
        let mut b = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut w_eff = layer.v.clone();
            for (r, mut row) in w_eff.rows_mut().into_iter().enumerate() {
                let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
                let scale = layer.g[[0, r]] / norm;
                row.mapv_inplace(|a| a * scale);
            }
            w.push(w_eff);
            b.push(layer.b.clone());
        }
        CompiledMlp {
            config: self.config,
            w,
            b,
        }
    }

    /// Single-precision compilation for bulk grid decoding.
    pub fn compile_f32(&self) -> CompiledMlp<f32> {
        let c = self.compile();
        CompiledMlp {
            config: c.config,
            w: c.w.iter().map(|m| m.mapv(|a| a as f32)).collect(),
            b: c.b.iter().map(|m| m.mapv(|a| a as f32)).collect(),
        }
    }

    /// Convenience one-shot inference (compiles every call).
    pub fn infer(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.compile().forward(x)
    }

    /// Parameter tensors in a stable order (v, g, b per layer), matching
    /// `binding_ids` and the optimizer group layout.
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.v);
            out.push(&mut l.g);
            out.push(&mut l.b);
        }
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.v.dim());
            out.push(l.g.dim());
            out.push(l.b.dim());
        }
        out
    }

    pub fn binding_ids(binding: &MlpBinding) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(v, g, b) in &binding.layers {
            out.push(v);
            out.push(g);
            out.push(b);
        }
        out
    }
}

/// Weight-folded network for fast repeated inference.
#[derive(Debug, Clone)]
pub struct CompiledMlp<T> {
    pub config: MlpConfig,
    w: Vec<Array2<T>>,
    b: Vec<Array2<T>>,
}

impl<T: NdFloat> CompiledMlp<T> {
    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        assert_eq!(x.ncols(), self.config.input_dim, "mlp input width");
        let zero = T::zero();
        let one = T::one();
        let mut h = x.to_owned();
        for l in 0..self.config.hidden_layers {
            let xin = if l == self.config.skip_layer {
                concatenate(Axis(1), &[h.view(), x.view()]).expect("skip concat")
            } else {
                h
            };
            let mut y = xin.dot(&self.w[l].t());
            y += &self.b[l];
            y.mapv_inplace(|a| if a > zero { a } else { zero });
            h = y;
        }
        let l = self.config.hidden_layers;
        let mut y = h.dot(&self.w[l].t());
        y += &self.b[l];
        if self.config.tanh_output {
            // tanh via exp keeps the generic bound small.
            y.mapv_inplace(|a| {
                let e = (a + a).exp();
                (e - one) / (e + one)
            });
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::{finite_diff, max_rel_error};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> MlpConfig {
        MlpConfig {
            input_dim: 7,
            hidden_dim: 6,
            output_dim: 3,
            hidden_layers: 5,
            skip_layer: 2,
            tanh_output: true,
        }
    }

    #[test]
    fn layer_shapes_follow_skip_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MlpConfig {
            input_dim: 51 + 32,
            hidden_dim: 128,
            output_dim: 1,
            hidden_layers: 8,
            skip_layer: 3,
            tanh_output: true,
        };
        let net = MlpParams::init(cfg, &mut rng);
        assert_eq!(net.layers.len(), 9);
        assert_eq!(net.layers[0].v.dim(), (128, 83));
        assert_eq!(net.layers[1].v.dim(), (128, 128));
        assert_eq!(net.layers[3].v.dim(), (128, 128 + 83));
        assert_eq!(net.layers[7].v.dim(), (128, 128));
        assert_eq!(net.layers[8].v.dim(), (1, 128));
        assert_eq!(net.layers[8].g.dim(), (1, 1));
    }

    #[test]
    fn magnitudes_start_strictly_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = MlpParams::init(tiny_config(), &mut rng);
        for l in &net.layers {
            assert!(l.g.iter().all(|&g| g > 0.0));
        }
    }

    /// Rescaling a direction row leaves the function unchanged (the
    /// normalization divides it back out).
    #[test]
    fn direction_scale_is_a_null_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = MlpParams::init(tiny_config(), &mut rng);
        let x = Array2::from_shape_simple_fn((4, 7), || standard_normal(&mut rng) * 0.5);
        let base = net.infer(&x.view());
        let mut scaled = net.clone();
        for row in scaled.layers[1].v.rows_mut() {
            let mut row = row;
            row.mapv_inplace(|a| a * 3.7);
        }
        let out = scaled.infer(&x.view());
        for (a, b) in base.iter().zip(out.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_compiled_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = MlpParams::init(tiny_config(), &mut rng);
        let x = Array2::from_shape_simple_fn((5, 7), || standard_normal(&mut rng) * 0.3);
        let mut tape = Tape::new();
        let binding = net.bind(&mut tape, false);
        let xid = tape.constant(x.clone());
        let out = net.forward(&mut tape, &binding, xid);
        let direct = net.infer(&x.view());
        for (a, b) in tape.value(out).iter().zip(direct.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn f32_compilation_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MlpParams::init(tiny_config(), &mut rng);
        let x = Array2::from_shape_simple_fn((16, 7), || standard_normal(&mut rng) * 0.4);
        let y64 = net.compile().forward(&x.view());
        let x32 = x.mapv(|a| a as f32);
        let y32 = net.compile_f32().forward(&x32.view());
        for (a, b) in y64.iter().zip(y32.iter()) {
            assert!((a - *b as f64).abs() < 1e-4, "f32 drift: {a} vs {b}");
        }
    }

    /// End-to-end gradient check through all layers including the skip
    /// concatenation, tanh output and a clamped-l1 data term.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = MlpConfig {
            input_dim: 4,
            hidden_dim: 5,
            output_dim: 1,
            hidden_layers: 3,
            skip_layer: 1,
            tanh_output: true,
        };
        let net = MlpParams::init(cfg, &mut rng);
        let x = Array2::from_shape_simple_fn((6, 4), || standard_normal(&mut rng) * 0.5);
        let target = Array2::from_shape_simple_fn((6, 1), || standard_normal(&mut rng) * 0.05);

        let flat = |n: &MlpParams| -> Vec<f64> {
            let mut out = Vec::new();
            for l in &n.layers {
                out.extend(l.v.iter());
                out.extend(l.g.iter());
                out.extend(l.b.iter());
            }
            out
        };
        let unflat = |n: &MlpParams, theta: &[f64]| -> MlpParams {
            let mut n = n.clone();
            let mut k = 0;
            for l in &mut n.layers {
                for slot in l.v.iter_mut().chain(l.g.iter_mut()).chain(l.b.iter_mut()) {
                    *slot = theta[k];
                    k += 1;
                }
            }
            assert_eq!(k, theta.len());
            n
        };
        let run = |n: &MlpParams| -> (Tape, NodeId, MlpBinding) {
            let mut tape = Tape::new();
            let binding = n.bind(&mut tape, true);
            let xid = tape.constant(x.clone());
            let pred = n.forward(&mut tape, &binding, xid);
            let tid = tape.constant(target.clone());
            let l = tape.clamped_l1(pred, tid, 0.1);
            let loss = tape.mean_all(l);
            (tape, loss, binding)
        };

        let (tape, loss, binding) = run(&net);
        let grads = tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for id in MlpParams::binding_ids(&binding) {
            analytic.extend(grads.get(id).unwrap().iter());
        }
        let mut theta = flat(&net);
        let numeric = finite_diff(
            &mut |t: &[f64]| {
                let n = unflat(&net, t);
                let (tape, loss, _) = run(&n);
                tape.scalar(loss)
            },
            &mut theta,
            1e-5,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "rel err {err}");
    }
}

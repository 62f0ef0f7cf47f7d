//! Strided 3-D convolution stacks for the voxel-grid code regressors.
//!
//! Convolutions are lowered to matrix multiplies via im2col. Every layer
//! uses a 3x3x3 kernel, stride 2 and padding 1, so each block halves the
//! spatial resolution; a final fully-connected layer maps the last feature
//! volume to a latent code. Voxel tensors are stored as (voxels, channels)
//! matrices with x-fastest voxel order: `index = i + nx*(j + ny*k)`.

use ndarray::Array2;
use rand::Rng;

use super::standard_normal;
use super::tape::{NodeId, Tape};

/// Geometry of one conv layer (kernel 3, stride 2, pad 1 fixed).
#[derive(Debug, Clone, Copy)]
pub struct Conv3dSpec {
    pub in_dims: [usize; 3],
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3dSpec {
    pub fn out_dims(&self) -> [usize; 3] {
        // floor((n + 2*1 - 3) / 2) + 1
        [
            (self.in_dims[0] - 1) / 2 + 1,
            (self.in_dims[1] - 1) / 2 + 1,
            (self.in_dims[2] - 1) / 2 + 1,
        ]
    }

    pub fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims().iter().product()
    }
}

/// Unfolds the receptive field of every output voxel into one row.
/// Result is (out_voxels, in_ch * 27); out-of-bounds taps read as zero.
/// Column layout: channel-major, then kz, ky, kx.
pub fn im2col(x: &Array2<f64>, spec: &Conv3dSpec) -> Array2<f64> {
    let [nx, ny, nz] = spec.in_dims;
    let [ox, oy, oz] = spec.out_dims();
    debug_assert_eq!(x.dim(), (spec.in_voxels(), spec.in_ch));
    let mut col = Array2::zeros((ox * oy * oz, spec.in_ch * 27));
    for ck in 0..oz {
        for cj in 0..oy {
            for ci in 0..ox {
                let ov = ci + ox * (cj + oy * ck);
                for kz in 0..3usize {
                    let kk = (2 * ck + kz).wrapping_sub(1);
                    if kk >= nz {
                        continue;
                    }
                    for ky in 0..3usize {
                        let jj = (2 * cj + ky).wrapping_sub(1);
                        if jj >= ny {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ii = (2 * ci + kx).wrapping_sub(1);
                            if ii >= nx {
                                continue;
                            }
                            let iv = ii + nx * (jj + ny * kk);
                            let tap = kz * 9 + ky * 3 + kx;
                            for ic in 0..spec.in_ch {
                                col[[ov, ic * 27 + tap]] = x[[iv, ic]];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: scatters column gradients back onto the input
/// voxel tensor, accumulating where receptive fields overlap.
pub fn col2im_accumulate(dcol: &Array2<f64>, spec: &Conv3dSpec, dx: &mut Array2<f64>) {
    let [nx, ny, nz] = spec.in_dims;
    let [ox, oy, oz] = spec.out_dims();
    debug_assert_eq!(dcol.dim(), (spec.out_voxels(), spec.in_ch * 27));
    debug_assert_eq!(dx.dim(), (spec.in_voxels(), spec.in_ch));
    for ck in 0..oz {
        for cj in 0..oy {
            for ci in 0..ox {
                let ov = ci + ox * (cj + oy * ck);
                for kz in 0..3usize {
                    let kk = (2 * ck + kz).wrapping_sub(1);
                    if kk >= nz {
                        continue;
                    }
                    for ky in 0..3usize {
                        let jj = (2 * cj + ky).wrapping_sub(1);
                        if jj >= ny {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ii = (2 * ci + kx).wrapping_sub(1);
                            if ii >= nx {
                                continue;
                            }
                            let iv = ii + nx * (jj + ny * kk);
                            let tap = kz * 9 + ky * 3 + kx;
                            for ic in 0..spec.in_ch {
                                dx[[iv, ic]] += dcol[[ov, ic * 27 + tap]];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// One conv block's parameters: `w` is (out_ch, in_ch*27), `b` is (1, out_ch).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

/// A voxel-grid-to-latent-code regressor: stacked stride-2 conv+ReLU blocks
/// followed by a fully-connected projection to the code dimension.
#[derive(Debug, Clone)]
pub struct VoxelConvStack {
    pub input_res: usize,
    pub channels: Vec<usize>,
    pub code_dim: usize,
    pub convs: Vec<ConvLayer>,
    pub fc_w: Array2<f64>,
    pub fc_b: Array2<f64>,
}

/// Tape handles for one bound stack.
pub struct ConvBinding {
    convs: Vec<(NodeId, NodeId)>,
    fc: (NodeId, NodeId),
}

impl VoxelConvStack {
    /// He-style random init. `channels` lists the output channels of each
    /// conv block; the input grid has a single channel.
    pub fn init<R: Rng>(input_res: usize, channels: &[usize], code_dim: usize, rng: &mut R) -> Self {
        assert!(!channels.is_empty());
        assert!(input_res >= 1 << channels.len(), "stack deeper than grid");
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_ch = 1usize;
        for &out_ch in channels {
            let fan_in = in_ch * 27;
            let std = (2.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((out_ch, fan_in), || standard_normal(rng) * std);
            let b = Array2::zeros((1, out_ch));
            convs.push(ConvLayer { w, b });
            in_ch = out_ch;
        }
        let mut res = input_res;
        for _ in channels {
            res = (res - 1) / 2 + 1;
        }
        let fc_in = in_ch * res * res * res;
        let std = 1.0 / (fc_in as f64).sqrt();
        let fc_w = Array2::from_shape_simple_fn((code_dim, fc_in), || standard_normal(rng) * std);
        let fc_b = Array2::zeros((1, code_dim));
        VoxelConvStack {
            input_res,
            channels: channels.to_vec(),
            code_dim,
            convs,
            fc_w,
            fc_b,
        }
    }

    fn layer_specs(&self) -> Vec<Conv3dSpec> {
        let mut specs = Vec::with_capacity(self.convs.len());
        let mut dims = [self.input_res; 3];
        let mut in_ch = 1usize;
        for &out_ch in &self.channels {
            let spec = Conv3dSpec {
                in_dims: dims,
                in_ch,
                out_ch,
            };
            dims = spec.out_dims();
            in_ch = out_ch;
            specs.push(spec);
        }
        specs
    }

    /// Registers all parameters on a tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ConvBinding {
        let convs = self
            .convs
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.w.clone(), trainable),
                    tape.leaf(l.b.clone(), trainable),
                )
            })
            .collect();
        let fc = (
            tape.leaf(self.fc_w.clone(), trainable),
            tape.leaf(self.fc_b.clone(), trainable),
        );
        ConvBinding { convs, fc }
    }

    /// Recorded forward pass; `x` is the (res^3, 1) voxel tensor. Returns the
    /// (1, code_dim) regressed code node.
    pub fn forward(&self, tape: &mut Tape, binding: &ConvBinding, x: NodeId) -> NodeId {
        let mut h = x;
        for (spec, &(w, b)) in self.layer_specs().iter().zip(&binding.convs) {
            h = tape.conv3d(h, w, b, *spec);
            h = tape.relu(h);
        }
        let flat = tape.flatten_row(h);
        tape.linear(flat, binding.fc.0, binding.fc.1)
    }

    /// Tape-free forward for inference. `grid` holds res^3 voxel values in
    /// x-fastest order; returns the (1, code_dim) code.
    pub fn infer(&self, grid: &[f64]) -> Array2<f64> {
        let n = self.input_res * self.input_res * self.input_res;
        assert_eq!(grid.len(), n, "grid size mismatch");
        let mut h = Array2::from_shape_vec((n, 1), grid.to_vec()).expect("grid shape");
        for (spec, layer) in self.layer_specs().iter().zip(&self.convs) {
            let col = im2col(&h, spec);
            let mut y = col.dot(&layer.w.t());
            y += &layer.b;
            y.mapv_inplace(|a| a.max(0.0));
            h = y;
        }
        let flat: Vec<f64> = h.iter().copied().collect();
        let flat = Array2::from_shape_vec((1, flat.len()), flat).expect("flatten");
        let mut out = flat.dot(&self.fc_w.t());
        out += &self.fc_b;
        out
    }

    /// Parameter tensors in a stable order (conv w/b pairs, then fc w/b),
    /// matching `binding_ids` and the optimizer group layout.
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        for l in &mut self.convs {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for l in &self.convs {
            out.push(l.w.dim());
            out.push(l.b.dim());
        }
        out.push(self.fc_w.dim());
        out.push(self.fc_b.dim());
        out
    }

    /// Node ids in the same order as `tensors_mut`.
    pub fn binding_ids(binding: &ConvBinding) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(w, b) in &binding.convs {
            out.push(w);
            out.push(b);
        }
        out.push(binding.fc.0);
        out.push(binding.fc.1);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::{finite_diff, max_rel_error};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn out_dims_halve() {
        let spec = Conv3dSpec {
            in_dims: [32, 32, 32],
            in_ch: 1,
            out_ch: 16,
        };
        assert_eq!(spec.out_dims(), [16, 16, 16]);
        let spec = Conv3dSpec {
            in_dims: [5, 4, 3],
            in_ch: 1,
            out_ch: 1,
        };
        assert_eq!(spec.out_dims(), [3, 2, 2]);
    }

    /// A kernel that is 1 at the center tap reproduces the strided input.
    #[test]
    fn center_tap_is_strided_identity() {
        let spec = Conv3dSpec {
            in_dims: [2, 2, 2],
            in_ch: 1,
            out_ch: 1,
        };
        let x = Array2::from_shape_vec((8, 1), (0..8).map(|i| i as f64 + 1.0).collect()).unwrap();
        let col = im2col(&x, &spec);
        assert_eq!(col.dim(), (1, 27));
        let mut w = Array2::zeros((1, 27));
        w[[0, 13]] = 1.0; // kz=1, ky=1, kx=1
        let y = col.dot(&w.t());
        // Output voxel (0,0,0) reads input voxel (2*0+1-1, ...) = (0,0,0).
        assert_abs_diff_eq!(y[[0, 0]], 1.0);
    }

    /// <col2im(d), x> == <d, im2col(x)> for random tensors (adjoint check).
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = Conv3dSpec {
            in_dims: [4, 3, 5],
            in_ch: 2,
            out_ch: 1,
        };
        let x = Array2::from_shape_simple_fn((spec.in_voxels(), 2), || standard_normal(&mut rng));
        let d =
            Array2::from_shape_simple_fn((spec.out_voxels(), 54), || standard_normal(&mut rng));
        let col = im2col(&x, &spec);
        let lhs: f64 = (&col * &d).sum();
        let mut dx = Array2::zeros(x.dim());
        col2im_accumulate(&d, &spec, &mut dx);
        let rhs: f64 = (&dx * &x).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn stack_output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = VoxelConvStack::init(8, &[4, 8], 6, &mut rng);
        let grid: Vec<f64> = (0..512).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let a = stack.infer(&grid);
        let b = stack.infer(&grid);
        assert_eq!(a.dim(), (1, 6));
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// Tape forward equals tape-free inference, and parameter gradients of a
    /// scalar loss match finite differences.
    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let stack = VoxelConvStack::init(4, &[2, 3], 2, &mut rng);
        let grid: Vec<f64> = (0..64).map(|_| standard_normal(&mut rng) * 0.1).collect();

        let flat = |s: &VoxelConvStack| -> Vec<f64> {
            let mut out = Vec::new();
            for l in &s.convs {
                out.extend(l.w.iter());
                out.extend(l.b.iter());
            }
            out.extend(s.fc_w.iter());
            out.extend(s.fc_b.iter());
            out
        };
        let unflat = |s: &VoxelConvStack, theta: &[f64]| -> VoxelConvStack {
            let mut s = s.clone();
            let mut k = 0;
            for l in &mut s.convs {
                for v in l.w.iter_mut() {
                    *v = theta[k];
                    k += 1;
                }
                for v in l.b.iter_mut() {
                    *v = theta[k];
                    k += 1;
                }
            }
            for v in s.fc_w.iter_mut() {
                *v = theta[k];
                k += 1;
            }
            for v in s.fc_b.iter_mut() {
                *v = theta[k];
                k += 1;
            }
            assert_eq!(k, theta.len());
            s
        };

        let run = |s: &VoxelConvStack| -> (Tape, NodeId, ConvBinding) {
            let mut tape = Tape::new();
            let binding = s.bind(&mut tape, true);
            let x = tape.constant(Array2::from_shape_vec((64, 1), grid.clone()).unwrap());
            let code = s.forward(&mut tape, &binding, x);
            let sq = tape.row_sum_sq(code);
            let loss = tape.sum_all(sq);
            (tape, loss, binding)
        };

        let (tape, loss, binding) = run(&stack);
        // Tape forward agrees with infer().
        let direct = stack.infer(&grid);
        let sq_direct: f64 = direct.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(tape.scalar(loss), sq_direct, epsilon = 1e-12);

        let grads = tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for id in VoxelConvStack::binding_ids(&binding) {
            analytic.extend(grads.get(id).unwrap().iter());
        }

        let mut theta = flat(&stack);
        let numeric = finite_diff(
            &mut |t: &[f64]| {
                let s = unflat(&stack, t);
                let (tape, loss, _) = run(&s);
                tape.scalar(loss)
            },
            &mut theta,
            1e-5,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "rel err {err}");
    }
}

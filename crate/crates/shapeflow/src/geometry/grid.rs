//! Regular volumetric scalar grids with trilinear interpolation, per-node
//! observation masks, and a little-endian binary container.
//!
//! Values live on grid nodes: node (i, j, k) sits at
//! `origin + voxel * (i, j, k)`, stored x-fastest. The grid covers the box
//! `[origin, origin + voxel * (res - 1)]`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::math::tape::{DiffField3, FieldValue};

use super::GeometryError;

const MAGIC: &[u8; 4] = b"SFGD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub res: [usize; 3],
    pub origin: [f64; 3],
    pub voxel: f64,
    /// Node values, x-fastest: `index = i + res_x * (j + res_y * k)`.
    pub values: Vec<f64>,
    /// Observation mask (true = observed); `None` means fully observed.
    pub mask: Option<Vec<bool>>,
}

impl SdfGrid {
    pub fn new(res: [usize; 3], origin: [f64; 3], voxel: f64) -> Self {
        assert!(res.iter().all(|&r| r >= 2), "grid needs at least 2 nodes per axis");
        assert!(voxel > 0.0);
        SdfGrid {
            res,
            origin,
            voxel,
            values: vec![0.0; res[0] * res[1] * res[2]],
            mask: None,
        }
    }

    /// Fills a grid by evaluating `f` at every node position.
    pub fn from_fn(
        res: [usize; 3],
        origin: [f64; 3],
        voxel: f64,
        mut f: impl FnMut([f64; 3]) -> f64,
    ) -> Self {
        let mut g = SdfGrid::new(res, origin, voxel);
        for k in 0..res[2] {
            for j in 0..res[1] {
                for i in 0..res[0] {
                    let idx = g.index(i, j, k);
                    g.values[idx] = f(g.node_pos(i, j, k));
                }
            }
        }
        g
    }

    /// A grid spanning the unit box [-0.5, 0.5]^3 with `n` nodes per axis.
    pub fn unit_box(n: usize) -> Self {
        let voxel = 1.0 / (n - 1) as f64;
        SdfGrid::new([n, n, n], [-0.5; 3], voxel)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.res[0] && j < self.res[1] && k < self.res[2]);
        i + self.res[0] * (j + self.res[1] * k)
    }

    pub fn node_pos(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.voxel * i as f64,
            self.origin[1] + self.voxel * j as f64,
            self.origin[2] + self.voxel * k as f64,
        ]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Locates the cell containing `p` and the fractional position inside
    /// it. Points within 1e-9 voxels outside the boundary are clamped.
    fn locate(&self, p: [f64; 3]) -> Result<([usize; 3], [f64; 3]), GeometryError> {
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for c in 0..3 {
            let local = (p[c] - self.origin[c]) / self.voxel;
            let max = (self.res[c] - 1) as f64;
            if local < -1e-9 || local > max + 1e-9 {
                return Err(GeometryError::OutOfBounds(p[0], p[1], p[2]));
            }
            let clamped = local.clamp(0.0, max);
            let i = (clamped.floor() as usize).min(self.res[c] - 2);
            cell[c] = i;
            frac[c] = clamped - i as f64;
        }
        Ok((cell, frac))
    }

    fn corner_values(&self, cell: [usize; 3]) -> [f64; 8] {
        let [i, j, k] = cell;
        [
            self.values[self.index(i, j, k)],
            self.values[self.index(i + 1, j, k)],
            self.values[self.index(i, j + 1, k)],
            self.values[self.index(i + 1, j + 1, k)],
            self.values[self.index(i, j, k + 1)],
            self.values[self.index(i + 1, j, k + 1)],
            self.values[self.index(i, j + 1, k + 1)],
            self.values[self.index(i + 1, j + 1, k + 1)],
        ]
    }

    /// Trilinear interpolation at `p`; errors outside the grid bounds.
    pub fn trilinear(&self, p: [f64; 3]) -> Result<f64, GeometryError> {
        let (cell, f) = self.locate(p)?;
        let v = self.corner_values(cell);
        Ok(trilinear_blend(&v, f))
    }

    /// Trilinear value plus the cell's observation status: a point counts as
    /// observed only when all 8 surrounding nodes are observed.
    pub fn trilinear_masked(&self, p: [f64; 3]) -> Result<(f64, bool), GeometryError> {
        let (cell, f) = self.locate(p)?;
        let v = self.corner_values(cell);
        Ok((trilinear_blend(&v, f), self.cell_observed(cell)))
    }

    fn cell_observed(&self, cell: [usize; 3]) -> bool {
        let Some(mask) = &self.mask else { return true };
        let [i, j, k] = cell;
        mask[self.index(i, j, k)]
            && mask[self.index(i + 1, j, k)]
            && mask[self.index(i, j + 1, k)]
            && mask[self.index(i + 1, j + 1, k)]
            && mask[self.index(i, j, k + 1)]
            && mask[self.index(i + 1, j, k + 1)]
            && mask[self.index(i, j + 1, k + 1)]
            && mask[self.index(i + 1, j + 1, k + 1)]
    }

    /// Fraction of nodes marked observed (1.0 when no mask is present).
    pub fn observed_fraction(&self) -> f64 {
        match &self.mask {
            None => 1.0,
            Some(m) => m.iter().filter(|&&b| b).count() as f64 / m.len().max(1) as f64,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let mut w = io::BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for c in 0..3 {
            w.write_all(&(self.res[c] as u64).to_le_bytes())?;
        }
        for c in 0..3 {
            w.write_all(&self.origin[c].to_le_bytes())?;
        }
        w.write_all(&self.voxel.to_le_bytes())?;
        w.write_all(&[u8::from(self.mask.is_some())])?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(mask) = &self.mask {
            let bytes: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let mut r = io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GeometryError::Format("bad grid magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(GeometryError::Format(format!(
                "unsupported grid version {version}"
            )));
        }
        let mut u64buf = [0u8; 8];
        let mut res = [0usize; 3];
        for slot in &mut res {
            r.read_exact(&mut u64buf)?;
            *slot = u64::from_le_bytes(u64buf) as usize;
        }
        let mut origin = [0.0f64; 3];
        for slot in &mut origin {
            r.read_exact(&mut u64buf)?;
            *slot = f64::from_le_bytes(u64buf);
        }
        r.read_exact(&mut u64buf)?;
        let voxel = f64::from_le_bytes(u64buf);
        if voxel <= 0.0 || res.iter().any(|&n| n < 2) {
            return Err(GeometryError::Format("invalid grid header".into()));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let n = res[0] * res[1] * res[2];
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf)?;
            values.push(f64::from_le_bytes(u64buf));
        }
        let mask = if flag[0] != 0 {
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)?;
            Some(bytes.into_iter().map(|b| b != 0).collect())
        } else {
            None
        };
        Ok(SdfGrid {
            res,
            origin,
            voxel,
            values,
            mask,
        })
    }
}

fn trilinear_blend(v: &[f64; 8], f: [f64; 3]) -> f64 {
    let [fx, fy, fz] = f;
    let c00 = v[0] * (1.0 - fx) + v[1] * fx;
    let c10 = v[2] * (1.0 - fx) + v[3] * fx;
    let c01 = v[4] * (1.0 - fx) + v[5] * fx;
    let c11 = v[6] * (1.0 - fx) + v[7] * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

fn trilinear_gradient(v: &[f64; 8], f: [f64; 3], voxel: f64) -> [f64; 3] {
    let [fx, fy, fz] = f;
    // d/dfx: difference along x of the bilinear blends in (y, z).
    let gx = ((v[1] - v[0]) * (1.0 - fy) + (v[3] - v[2]) * fy) * (1.0 - fz)
        + ((v[5] - v[4]) * (1.0 - fy) + (v[7] - v[6]) * fy) * fz;
    let gy = ((v[2] - v[0]) * (1.0 - fx) + (v[3] - v[1]) * fx) * (1.0 - fz)
        + ((v[6] - v[4]) * (1.0 - fx) + (v[7] - v[5]) * fx) * fz;
    let gz = ((v[4] - v[0]) * (1.0 - fx) + (v[5] - v[1]) * fx) * (1.0 - fy)
        + ((v[6] - v[2]) * (1.0 - fx) + (v[7] - v[3]) * fx) * fy;
    [gx / voxel, gy / voxel, gz / voxel]
}

/// The fitting energy samples the observation grid through the tape;
/// out-of-bounds or occluded queries are reported invalid (they carry no
/// loss and no gradient).
impl DiffField3 for SdfGrid {
    fn sample(&self, p: [f64; 3]) -> FieldValue {
        match self.locate(p) {
            Err(_) => FieldValue {
                value: 0.0,
                grad: [0.0; 3],
                valid: false,
            },
            Ok((cell, f)) => {
                let v = self.corner_values(cell);
                FieldValue {
                    value: trilinear_blend(&v, f),
                    grad: trilinear_gradient(&v, f, self.voxel),
                    valid: self.cell_observed(cell),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trilinear_poly(p: [f64; 3]) -> f64 {
        let [x, y, z] = p;
        2.0 + 3.0 * x - y + 0.5 * z + x * y - 2.0 * x * z + y * z + 1.5 * x * y * z
    }

    #[test]
    fn node_query_returns_node_value() {
        let g = SdfGrid::from_fn([4, 5, 3], [-0.5; 3], 0.25, trilinear_poly);
        for k in 0..3 {
            for j in 0..5 {
                for i in 0..4 {
                    let p = g.node_pos(i, j, k);
                    assert_abs_diff_eq!(
                        g.trilinear(p).unwrap(),
                        g.values[g.index(i, j, k)],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let mut g = SdfGrid::new([2, 2, 2], [0.0; 3], 1.0);
        g.values = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let v = g.trilinear([0.5, 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(v, 4.5, epsilon = 1e-12);
    }

    #[test]
    fn trilinear_polynomials_are_reproduced_exactly() {
        let g = SdfGrid::from_fn([7, 6, 8], [-0.5; 3], 0.17, trilinear_poly);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = [
                rng.gen_range(-0.5..-0.5 + 0.17 * 6.0),
                rng.gen_range(-0.5..-0.5 + 0.17 * 5.0),
                rng.gen_range(-0.5..-0.5 + 0.17 * 7.0),
            ];
            assert_abs_diff_eq!(g.trilinear(p).unwrap(), trilinear_poly(p), epsilon = 1e-12);
        }
    }

    #[test]
    fn continuous_across_cell_faces() {
        let g = SdfGrid::from_fn([5, 5, 5], [0.0; 3], 0.25, |p| {
            (p[0] * 7.3).sin() + (p[1] * 3.1).cos() * p[2]
        });
        // Probe points straddling the x = 0.25 cell boundary.
        for &(y, z) in &[(0.3, 0.55), (0.61, 0.9), (0.12, 0.33)] {
            let a = g.trilinear([0.25 - 1e-10, y, z]).unwrap();
            let b = g.trilinear([0.25 + 1e-10, y, z]).unwrap();
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        let g = SdfGrid::unit_box(4);
        assert!(g.trilinear([0.51, 0.0, 0.0]).is_err());
        assert!(g.trilinear([0.0, -0.6, 0.0]).is_err());
        assert!(g.trilinear([0.5, 0.5, 0.5]).is_ok()); // exact corner
    }

    #[test]
    fn occluded_corner_masks_the_whole_cell() {
        let mut g = SdfGrid::new([3, 3, 3], [0.0; 3], 0.5);
        let mut mask = vec![true; 27];
        mask[g.index(1, 1, 1)] = false;
        g.mask = Some(mask);
        // Cell (0,0,0) has corner (1,1,1): occluded.
        let (_, obs) = g.trilinear_masked([0.25, 0.25, 0.25]).unwrap();
        assert!(!obs);
        // Cell (1,1,1) also touches node (1,1,1): occluded.
        let (_, obs) = g.trilinear_masked([0.75, 0.75, 0.75]).unwrap();
        assert!(!obs);
    }

    #[test]
    fn io_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.bin");
        let mut g = SdfGrid::from_fn([4, 3, 5], [-0.25, 0.0, 0.125], 0.125, trilinear_poly);
        g.mask = Some((0..60).map(|i| i % 3 != 0).collect());
        g.save(&path).unwrap();
        let back = SdfGrid::load(&path).unwrap();
        assert_eq!(g.res, back.res);
        assert_eq!(g.mask, back.mask);
        for (a, b) in g.values.iter().zip(back.values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn field_gradient_matches_finite_differences() {
        let g = SdfGrid::from_fn([6, 6, 6], [-0.5; 3], 0.2, |p| {
            (p[0] * 5.0).sin() * (p[1] * 3.0).cos() + p[2] * p[2]
        });
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            // Stay inside one cell so the field is smooth around the probe.
            let p = [
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.45..0.45),
            ];
            let s = g.sample(p);
            assert!(s.valid);
            let h = 1e-7;
            for c in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[c] += h;
                pm[c] -= h;
                let fd =
                    (g.trilinear(pp).unwrap() - g.trilinear(pm).unwrap()) / (2.0 * h);
                assert!(
                    (s.grad[c] - fd).abs() < 1e-5,
                    "axis {c}: analytic {} vs fd {}",
                    s.grad[c],
                    fd
                );
            }
        }
    }

    #[test]
    fn field_sample_reports_out_of_bounds_invalid() {
        let g = SdfGrid::unit_box(4);
        let s = g.sample([0.7, 0.0, 0.0]);
        assert!(!s.valid);
        assert_eq!(s.value, 0.0);
        assert_eq!(s.grad, [0.0; 3]);
    }
}

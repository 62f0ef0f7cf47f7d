//! Training-sample generation: area-weighted surface sampling, SDF samples
//! for the shape energy, and corresponding point pairs for the flow energy.

use rand::Rng;

use super::mesh::TriMesh;
use super::sdf::MeshSdf;
use super::vec3;
use super::GeometryError;
use crate::math::standard_normal;

/// Area-weighted triangle picker over one mesh.
#[derive(Debug, Clone)]
pub struct SurfaceSampler {
    cumulative: Vec<f64>,
    total: f64,
}

/// One point on a surface, remembered by triangle and barycentric weights so
/// it can be transported to any mesh with the same triangulation.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    pub triangle: usize,
    /// Barycentric weights (w_a, w_b, w_c), summing to 1.
    pub bary: [f64; 3],
    pub position: [f64; 3],
}

impl SurfaceSampler {
    pub fn new(mesh: &TriMesh) -> Result<Self, GeometryError> {
        if mesh.triangles.is_empty() {
            return Err(GeometryError::EmptyInput("surface sampler"));
        }
        let mut cumulative = Vec::with_capacity(mesh.triangles.len());
        let mut total = 0.0;
        for t in 0..mesh.triangles.len() {
            total += mesh.triangle_area(t);
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Err(GeometryError::InvalidMesh(
                "mesh has zero surface area".into(),
            ));
        }
        Ok(SurfaceSampler { cumulative, total })
    }

    /// Draws one area-uniform surface point.
    pub fn sample<R: Rng>(&self, mesh: &TriMesh, rng: &mut R) -> SurfacePoint {
        let u = rng.gen::<f64>() * self.total;
        let triangle = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.min(self.cumulative.len() - 1),
        };
        // Square-root trick for uniform barycentric coordinates.
        let r1: f64 = rng.gen();
        let r2: f64 = rng.gen();
        let s = r1.sqrt();
        let bary = [1.0 - s, s * (1.0 - r2), s * r2];
        SurfacePoint {
            triangle,
            bary,
            position: barycentric_point(mesh, triangle, bary),
        }
    }
}

pub fn barycentric_point(mesh: &TriMesh, triangle: usize, bary: [f64; 3]) -> [f64; 3] {
    let [a, b, c] = mesh.tri_vertices(triangle);
    [
        bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0],
        bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1],
        bary[0] * a[2] + bary[1] * b[2] + bary[2] * c[2],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    NearSurface,
    Uniform,
}

/// One supervised SDF sample for the shape energy.
#[derive(Debug, Clone, Copy)]
pub struct SdfSample {
    pub point: [f64; 3],
    pub sdf: f64,
    pub source: SampleSource,
}

/// Draws `n_near` near-surface samples (surface point plus isotropic
/// Gaussian offset, re-drawn until the offset is inside `band`) and
/// `n_uniform` uniform samples in the unit box, each labeled with its true
/// signed distance.
pub fn sample_shape_points<R: Rng>(
    sdf: &MeshSdf,
    n_near: usize,
    n_uniform: usize,
    band: f64,
    perturb_sigma: f64,
    rng: &mut R,
) -> Result<Vec<SdfSample>, GeometryError> {
    assert!(band > 0.0 && perturb_sigma > 0.0);
    let sampler = SurfaceSampler::new(sdf.mesh())?;
    let mut points = Vec::with_capacity(n_near + n_uniform);
    let mut sources = Vec::with_capacity(n_near + n_uniform);
    for _ in 0..n_near {
        let base = sampler.sample(sdf.mesh(), rng).position;
        let offset = loop {
            let o = [
                standard_normal(rng) * perturb_sigma,
                standard_normal(rng) * perturb_sigma,
                standard_normal(rng) * perturb_sigma,
            ];
            // Distance to the surface is at most the offset length, so this
            // guarantees |sdf| <= band.
            if vec3::norm(o) <= band {
                break o;
            }
        };
        points.push(vec3::add(base, offset));
        sources.push(SampleSource::NearSurface);
    }
    for _ in 0..n_uniform {
        points.push([
            rng.gen_range(-0.5..=0.5),
            rng.gen_range(-0.5..=0.5),
            rng.gen_range(-0.5..=0.5),
        ]);
        sources.push(SampleSource::Uniform);
    }
    let sdfs = sdf.signed_distance_batch(&points);
    Ok(points
        .into_iter()
        .zip(sdfs)
        .zip(sources)
        .map(|((point, sdf), source)| SdfSample { point, sdf, source })
        .collect())
}

/// One supervised correspondence for the flow energy: the same triangle,
/// barycentric weights and normal offset evaluated on the canonical and on
/// the posed mesh.
#[derive(Debug, Clone, Copy)]
pub struct FlowSample {
    pub canonical: [f64; 3],
    pub posed: [f64; 3],
    pub identity: usize,
    pub pose: usize,
}

impl FlowSample {
    pub fn flow(&self) -> [f64; 3] {
        vec3::sub(self.posed, self.canonical)
    }
}

/// Draws `n` corresponding near-surface pairs. The offset distance δn is
/// N(0, σ²) with σ picked half the time from `sigma_wide` and half from
/// `sigma_tight`; the offset is applied along each mesh's own face normal at
/// the corresponding triangle.
#[allow(clippy::too_many_arguments)]
pub fn sample_flow_pairs<R: Rng>(
    canonical: &TriMesh,
    posed: &TriMesh,
    n: usize,
    sigma_wide: f64,
    sigma_tight: f64,
    identity: usize,
    pose: usize,
    rng: &mut R,
) -> Result<Vec<FlowSample>, GeometryError> {
    if canonical.vertices.len() != posed.vertices.len()
        || canonical.triangles != posed.triangles
    {
        return Err(GeometryError::TopologyMismatch {
            expected_vertices: canonical.vertices.len(),
            expected_triangles: canonical.triangles.len(),
            got_vertices: posed.vertices.len(),
            got_triangles: posed.triangles.len(),
        });
    }
    let sampler = SurfaceSampler::new(canonical)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let sp = sampler.sample(canonical, rng);
        let sigma = if rng.gen::<bool>() {
            sigma_wide
        } else {
            sigma_tight
        };
        let dn = standard_normal(rng) * sigma;
        let nc = canonical.face_normal(sp.triangle);
        let np = posed.face_normal(sp.triangle);
        let xc = vec3::add(sp.position, vec3::scale(nc, dn));
        let xp = vec3::add(
            barycentric_point(posed, sp.triangle, sp.bary),
            vec3::scale(np, dn),
        );
        out.push(FlowSample {
            canonical: xc,
            posed: xp,
            identity,
            pose,
        });
    }
    Ok(out)
}

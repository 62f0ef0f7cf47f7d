//! Mesh and volumetric geometry: signed-distance queries, normalization,
//! training-sample generation, isosurface extraction, trilinear grids and
//! nearest-neighbor search.

pub mod bvh;
pub mod grid;
pub mod isosurface;
pub mod knn;
pub mod mesh;
pub mod sampling;
pub mod sdf;
pub mod vec3;

pub use bvh::Bvh;
pub use grid::SdfGrid;
pub use isosurface::extract_isosurface;
pub use knn::PointIndex;
pub use mesh::{corpus_normalization, TriMesh, UnitScale};
pub use sampling::{
    sample_flow_pairs, sample_shape_points, FlowSample, SampleSource, SdfSample, SurfacePoint,
    SurfaceSampler,
};
pub use sdf::MeshSdf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("mesh is not watertight")]
    NotWatertight,
    #[error("topology mismatch: expected {expected_vertices} vertices / {expected_triangles} triangles, got {got_vertices} / {got_triangles}")]
    TopologyMismatch {
        expected_vertices: usize,
        expected_triangles: usize,
        got_vertices: usize,
        got_triangles: usize,
    },
    #[error("query point ({0}, {1}, {2}) is outside the grid bounds")]
    OutOfBounds(f64, f64, f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("isosurface is empty")]
    EmptyIsosurface,
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

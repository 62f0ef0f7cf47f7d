//! Scratch bring-up probe (not part of the test suite; removed before release).

use shapeflow::corpus::CorpusManifest;
use shapeflow::metrics::{chamfer_l2, iou};
use shapeflow::spaces::ShapeSpace;

#[test]
#[ignore]
fn canonical_quality() {
    let manifest = CorpusManifest::load("/tmp/acc/corpus/manifest.toml".as_ref()).unwrap();
    let space = ShapeSpace::load("/tmp/acc/shape/shape_space.ckpt".as_ref()).unwrap();
    for (i, id) in manifest.identities.iter().enumerate() {
        let gt = manifest.load_mesh(&id.canonical_mesh).unwrap();
        let t0 = std::time::Instant::now();
        let grid = space.decode_grid(space.code(i), 128, true);
        let mesh = shapeflow::geometry::extract_isosurface(&grid, 0.0);
        let decode_s = t0.elapsed().as_secs_f64();
        let t1 = std::time::Instant::now();
        let c = chamfer_l2(&mesh, &gt, 50_000, 11).unwrap();
        let v = iou(&mesh, &gt, 200_000, 11).unwrap();
        println!(
            "identity {i}: chamfer={c:.3e} iou={v:.4} (decode {decode_s:.1}s metrics {:.1}s, {} verts)",
            t1.elapsed().as_secs_f64(),
            mesh.vertices.len()
        );
    }
}

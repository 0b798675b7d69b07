//! Star-convex polygon candidates and greedy non-maximum suppression.
//!
//!     cargo run --example star_nms

use cellvit::postproc::{rasterize_star_polygon, star_nms_with, stardist_nms, StarParams, StarPolygonSet};

fn main() -> cellvit::Result<()> {
    let k = 16;
    let disc = |r: f32| vec![r; k];
    let centers = vec![[20, 20], [22, 21], [20, 44], [44, 30], [45, 31]];
    let probs = vec![0.9, 0.8, 0.7, 0.6, 0.95];
    let mut radii = Vec::new();
    for r in [8.0, 8.0, 6.0, 7.0, 6.5] {
        radii.extend(disc(r));
    }
    let polys = StarPolygonSet::new(k, centers, probs, radii)?;

    for i in 0..polys.len() {
        let c = polys.centers[i];
        let mask = rasterize_star_polygon([c[0] as isize, c[1] as isize], polys.radii_of(i), 64, 64)?;
        let area = mask.iter().filter(|&&m| m).count();
        println!("candidate {i} at {:?} prob {:.2} area {area}", c, polys.probs[i]);
    }

    let params = StarParams::default();
    println!("kept {:?}", star_nms_with(&polys, 64, 64, &params)?);
    let inst = stardist_nms(&polys, 64, 64, &params)?;
    println!("instances painted: {}", inst.count);
    Ok(())
}

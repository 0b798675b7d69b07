//! Separates touching nuclei from ideal probability and distance maps with
//! the marker-controlled watershed, then scores against the ground truth.
//!
//!     cargo run --release --example hovernet_postproc

use cellvit::metrics::{match_segments, panoptic_quality};
use cellvit::postproc::{edge_map, hovernet_separate, HovernetParams};
use cellvit::synth::{fixture_scene, BundleOptions};

fn main() -> cellvit::Result<()> {
    let scene = fixture_scene(96, 5, true, 3)?;
    println!("{} nuclei, touching pairs {:?}", scene.nuclei.len(), scene.touching_pairs);

    let bundle = scene.ideal_bundle((0, 0), 96, 96, &BundleOptions::default());
    let edges = edge_map(&bundle.hv_map)?;
    let ridge = edges.iter().filter(|&&e| e > 0.4).count();
    println!("edge pixels above 0.4: {ridge}");

    let inst = hovernet_separate(&bundle, &HovernetParams::default())?;
    let gt = scene.gt();
    let m = match_segments(&gt, &inst)?;
    let pq = panoptic_quality(&m);
    println!("found {} instances (truth {})", inst.count, gt.count);
    println!("pq {:.4}  dq {:.4}  sq {:.4}", pq.pq, pq.dq, pq.sq);

    // coarse picture of the result
    for r in (0..96).step_by(4) {
        let line: String = (0..96)
            .step_by(2)
            .map(|c| match inst.label(r, c) {
                0 => '.',
                l => char::from_digit(l % 36, 36).unwrap(),
            })
            .collect();
        println!("{line}");
    }
    Ok(())
}

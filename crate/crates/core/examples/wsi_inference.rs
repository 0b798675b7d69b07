//! Tiled whole-slide inference on a synthetic 2048 x 2048 slide with an
//! oracle predictor, comparing overlapping small tiles against one pass.
//!
//!     cargo run --release --example wsi_inference

use std::time::Instant;

use cellvit::metrics::{detection_scores, match_centroids};
use cellvit::pipeline::{plan_tiles, run_wsi, OraclePredictor, PipelineConfig, SyntheticSource};
use cellvit::synth::{BundleOptions, Layout, LayoutParams};

fn main() -> cellvit::Result<()> {
    let layout = Layout::random(2048, 2048, 2500, &LayoutParams::default(), 5);
    let source = SyntheticSource { layout: layout.clone(), seed: 5 };
    let predictor = OraclePredictor::new(layout, BundleOptions::default());

    let mut results = Vec::new();
    for (tile, overlap) in [(2048, 0), (1024, 64), (256, 64)] {
        let grid = plan_tiles(2048, 2048, tile, overlap)?;
        let cfg = PipelineConfig { tile_size: tile, overlap, workers: 2, ..Default::default() };
        let t = Instant::now();
        let r = run_wsi(&source, &predictor, &cfg)?;
        println!(
            "tile {tile:>4}/{overlap:<2}  {:>3} tiles  {:>8} px  {:>5} nuclei  {:.2}s",
            grid.tiles.len(),
            grid.processed_pixels(),
            r.records.len(),
            t.elapsed().as_secs_f64()
        );
        results.push(r);
    }
    for r in &results[1..] {
        let m = match_centroids(&results[0].records, &r.records, 6.0);
        let d = detection_scores(&m);
        println!("tile {} vs single pass: F1 {:.4}", r.grid.tile_size, d.f1);
    }
    Ok(())
}

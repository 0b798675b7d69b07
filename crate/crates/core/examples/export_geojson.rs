//! Segments a synthetic tile, writes result JSON and GeoJSON, and checks
//! that re-exporting the parsed JSON reproduces the same bytes.
//!
//!     cargo run --release --example export_geojson -- out_dir

use std::path::PathBuf;

use cellvit::pipeline::{geojson_string, parse_result_json, process_bundle, result_json, validate_geojson, PipelineConfig};
use cellvit::synth::{BundleOptions, Layout, LayoutParams};

fn main() -> cellvit::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&dir).map_err(|e| cellvit::Error::io(&dir, e))?;

    let layout = Layout::random(512, 512, 150, &LayoutParams::default(), 9);
    let bundle = layout.ideal_bundle((0, 0), 512, 512, &BundleOptions::default());
    let tile = process_bundle(&bundle, &PipelineConfig::default())?;

    let json = result_json(&tile.records, 0.25, "synthetic-oracle", true);
    let again = result_json(&parse_result_json(&json)?.records, 0.25, "synthetic-oracle", true);
    println!("{} nuclei, JSON {} bytes, round trip identical: {}", tile.records.len(), json.len(), json == again);

    let geo = geojson_string(&tile.records);
    println!("GeoJSON features: {}", validate_geojson(&geo)?);

    for (name, text) in [("result.json", &json), ("result.geojson", &geo)] {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| cellvit::Error::io(&p, e))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

//! Runs a randomly initialized network on a synthetic 256 x 256 tile and
//! prints the output shapes.
//!
//!     cargo run --release --example forward_pass

use cellvit::model::{CellVit, ModelConfig};
use cellvit::synth::{Layout, LayoutParams};

fn main() -> cellvit::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = CellVit::random(cfg.clone(), 7)?;

    let layout = Layout::random(256, 256, 40, &LayoutParams::default(), 1);
    let image = layout.image_window((0, 0), 256, 256, 1);
    let out = model.forward(&image)?;

    println!("image      {:?}", image.shape());
    println!("np_map     {:?}", out.np_map.shape());
    println!("hv_map     {:?}", out.hv_map.shape());
    println!("nt_map     {:?}", out.nt_map.shape());
    println!("tissue     {} logits", out.tissue_logits.len());
    println!("tokens     {:?} on a {:?} grid", out.tokens_final.shape(), out.token_grid);

    let worst = out
        .np_map
        .data()
        .chunks(2)
        .map(|p| ((p[0] + p[1]) as f64 - 1.0).abs())
        .fold(0.0, f64::max);
    println!("max |sum(np) - 1| = {worst:.2e}");
    Ok(())
}

//! Writes a freshly initialized weight file and reloads it.
//!
//!     cargo run --example init_weights -- /tmp/tiny.cvtw

use cellvit::model::{load_weights, save_weights, CellVit, ModelConfig, Weights};

fn main() -> cellvit::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "tiny.cvtw".into());
    let cfg = ModelConfig::tiny();
    let weights = Weights::init(&cfg, 0)?;
    let params: usize = weights.iter().filter(|(n, _)| !n.starts_with("config.")).map(|(_, t)| t.len()).sum();
    save_weights(&weights, &path)?;
    println!("wrote {path}: {} tensors, {params} parameters", weights.len());

    let back = load_weights(&path)?;
    assert_eq!(back, weights);
    let model = CellVit::from_weights(back)?;
    println!("reloaded config {:?}", model.config());
    Ok(())
}

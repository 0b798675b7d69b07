//! Tissue and cell-class oversampling weights on a small index, and one
//! epoch drawn from them.
//!
//!     cargo run --example oversampling

use cellvit::sampling::{draw_epoch, sampling_weights, DatasetIndex, IndexEntry, DEFAULT_GAMMA_S};

fn main() -> cellvit::Result<()> {
    // tissue id plus presence flags for five nucleus classes
    let rows = [
        ("breast_0", 0, [1, 1, 0, 0, 0]),
        ("breast_1", 0, [1, 0, 1, 0, 0]),
        ("breast_2", 0, [1, 1, 1, 0, 0]),
        ("colon_0", 1, [0, 1, 1, 0, 1]),
        ("skin_0", 2, [1, 0, 0, 1, 0]),
        ("skin_1", 2, [0, 0, 0, 0, 0]),
    ];
    let index = DatasetIndex::new(
        rows.iter()
            .map(|(id, t, c)| IndexEntry { id: id.to_string(), tissue: *t, cells: c.to_vec() })
            .collect(),
    )?;

    for gamma in [0.0, 0.5, DEFAULT_GAMMA_S, 1.0] {
        let p = sampling_weights(&index, gamma)?;
        let shown: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
        println!("gamma {gamma:<4} p = [{}]", shown.join(", "));
    }

    let p = sampling_weights(&index, DEFAULT_GAMMA_S)?;
    let epoch = draw_epoch(&p, 6_000, 42)?;
    let mut counts = vec![0usize; p.len()];
    for i in epoch {
        counts[i] += 1;
    }
    let total: f64 = p.iter().sum();
    for ((e, c), w) in index.entries.iter().zip(&counts).zip(&p) {
        println!("{:<9} drawn {:>5}  expected {:>7.1}", e.id, c, 6_000.0 * w / total);
    }
    Ok(())
}

//! Panoptic quality, detection and per-class classification scores for a
//! prediction that merges two nuclei, misses one and mislabels another.
//!
//!     cargo run --release --example evaluate

use cellvit::metrics::evaluate;
use cellvit::postproc::InstanceMap;
use cellvit::synth::{Layout, LayoutParams};

fn main() -> cellvit::Result<()> {
    let params = LayoutParams { num_classes: 3, ..Default::default() };
    let layout = Layout::random(160, 160, 18, &params, 11);
    let gt = layout.gt();

    let mut labels = gt.labels.clone();
    let mut classes = gt.classes.clone();
    // drop instance 1, relabel instance 2, merge 4 into 3
    for l in labels.iter_mut() {
        match *l {
            1 => *l = 0,
            4 => *l = 3,
            _ => {}
        }
    }
    classes.remove(&1);
    classes.remove(&4);
    if let Some(c) = classes.get_mut(&2) {
        *c = *c % 3 + 1;
    }
    let pred = InstanceMap::from_raw(labels, gt.height, gt.width, &classes)?;

    let report = evaluate(&[gt], &[pred], 4, 12.0)?;
    println!("{}", report.to_json()?);
    Ok(())
}

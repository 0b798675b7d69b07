//! Finite-difference check of every loss, followed by the same run with a
//! deliberately corrupted gradient.
//!
//!     cargo run --release --example gradcheck

use cellvit::losses::{run_gradcheck, GradcheckConfig};

fn main() {
    let cfg = GradcheckConfig { trials: 20, ..Default::default() };
    let report = run_gradcheck(&cfg);
    print!("{}", report.render());

    let broken = run_gradcheck(&GradcheckConfig { perturb_analytic: true, ..cfg });
    println!("\nwith a corrupted dice gradient: pass = {}", broken.pass());
}

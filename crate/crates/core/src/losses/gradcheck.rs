//! Central finite-difference verification of every analytic loss gradient.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances per loss.
    pub trials: usize,
    /// Step of the fourth-order central difference stencil.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Entries closer than this to a clamp boundary (0 or 1 for
    /// probabilities) are not checked.
    pub boundary_margin: f64,
    /// Corrupts one analytic Dice gradient entry; the suite must then fail.
    pub perturb_analytic: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 50,
            step: 1e-4,
            tolerance: 1e-4,
            boundary_margin: 1e-3,
            perturb_analytic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub name: &'static str,
    pub trials: usize,
    pub entries: usize,
    pub worst_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// One line per loss; byte-stable for a fixed configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<16} trials={:<3} entries={:<6} worst_rel_err={:.3e} {}",
                c.name,
                c.trials,
                c.entries,
                c.worst_rel_err,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "overall: {} (tolerance {:.0e})",
            if self.pass() { "PASS" } else { "FAIL" },
            self.tolerance
        );
        s
    }
}

/// Relative error with an absolute floor so vanishing gradients do not
/// divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-6)
}

/// Like [`relative_error`] with an explicit floor on the denominator.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Denominator floor for an objective of magnitude `value`. A difference
/// quotient cannot resolve entries far below `1e-6 * |f|` in f64, so the
/// floor grows with the loss value for the large composite totals.
pub fn floor_for(value: f64) -> f64 {
    1e-6 * value.abs().max(1.0)
}

type Objective<'a> = Box<dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a>;

/// One random instance: parameters, which of them are checked, and the
/// objective closure.
struct Instance<'a> {
    x: Vec<f64>,
    checked: Vec<bool>,
    f: Objective<'a>,
}

fn probs(rng: &mut ChaCha8Rng, px: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(px * classes);
    for _ in 0..px {
        let logits: Vec<f64> = (0..classes).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        out.extend(logits.iter().map(|l| (l - m).exp() / z));
    }
    out
}

fn one_hot(rng: &mut ChaCha8Rng, px: usize, classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; px * classes];
    for i in 0..px {
        out[i * classes + rng.random_range(0..classes)] = 1.0;
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn interior(x: &[f64], lo: f64, hi: f64, margin: f64) -> Vec<bool> {
    x.iter().map(|&v| v > lo + margin && v < hi - margin).collect()
}

const LOSSES: [&str; 9] = [
    "bce",
    "dice",
    "focal_tversky",
    "tissue_ce",
    "mse_hv",
    "msge_hv",
    "total_hovernet",
    "total_stardist",
    "total_cppnet",
];

fn instance(name: &str, rng: &mut ChaCha8Rng, margin: f64) -> Instance<'static> {
    let h = rng.random_range(2..=8usize);
    let w = rng.random_range(2..=8usize);
    let c = rng.random_range(2..=4usize);
    let px = h * w;
    let lw = LossWeights::default();
    match name {
        "bce" | "dice" | "focal_tversky" => {
            let x = probs(rng, px, c);
            let gt = one_hot(rng, px, c);
            let checked = interior(&x, 0.0, 1.0, margin);
            let f: Objective = match name {
                "bce" => Box::new(move |p| bce_f64(p, &gt, c).expect("positive probabilities")),
                "dice" => Box::new(move |p| dice_f64(p, &gt, c, lw.epsilon)),
                _ => Box::new(move |p| {
                    focal_tversky_f64(p, &gt, c, lw.alpha_ft, lw.beta_ft, lw.gamma_ft, lw.epsilon)
                }),
            };
            Instance { x, checked, f }
        }
        "tissue_ce" => {
            let k = rng.random_range(2..=19usize);
            let x: Vec<f64> = (0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let class = rng.random_range(0..k);
            Instance {
                checked: vec![true; k],
                x,
                f: Box::new(move |l| ce_logits_f64(l, class)),
            }
        }
        "mse_hv" | "msge_hv" => {
            let x = uniform(rng, px * 2, -1.0, 1.0);
            let gt = uniform(rng, px * 2, -1.0, 1.0);
            let mask: Vec<f64> = (0..px).map(|_| f64::from(rng.random_bool(0.6))).collect();
            let checked = interior(&x, -1.0, 1.0, margin);
            let f: Objective = if name == "mse_hv" {
                Box::new(move |p| mse_f64(p, &gt))
            } else {
                Box::new(move |p| msge_f64(p, &gt, &mask, h, w))
            };
            Instance { x, checked, f }
        }
        "total_hovernet" => {
            let np = probs(rng, px, 2);
            let hv = uniform(rng, px * 2, -1.0, 1.0);
            let nt = probs(rng, px, c);
            let t = 19;
            let logits: Vec<f64> = (0..t).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let gt_np = one_hot(rng, px, 2);
            let gt_hv = uniform(rng, px * 2, -1.0, 1.0);
            let gt_nt = one_hot(rng, px, c);
            let tissue = rng.random_range(0..t);

            let mut checked = interior(&np, 0.0, 1.0, margin);
            checked.extend(interior(&hv, -1.0, 1.0, margin));
            checked.extend(interior(&nt, 0.0, 1.0, margin));
            checked.extend(std::iter::repeat_n(true, t));
            let (n_np, n_hv, n_nt) = (np.len(), hv.len(), nt.len());
            let x: Vec<f64> = [np, hv, nt, logits].concat();
            let f = move |x: &[f64]| {
                let (np, rest) = x.split_at(n_np);
                let (hv, rest) = rest.split_at(n_hv);
                let (nt, logits) = rest.split_at(n_nt);
                let inputs = HovernetInputs {
                    np,
                    hv,
                    nt,
                    logits,
                    gt_np: &gt_np,
                    gt_hv: &gt_hv,
                    gt_nt: &gt_nt,
                    tissue,
                    h,
                    w,
                    nt_classes: c,
                };
                let (v, g) = hovernet_loss_f64(&inputs, &lw).expect("positive probabilities");
                (v, [g.np, g.hv, g.nt, g.logits].concat())
            };
            Instance {
                x,
                checked,
                f: Box::new(f),
            }
        }
        _ => {
            let variant = if name == "total_cppnet" {
                StarVariant::Cppnet
            } else {
                StarVariant::Stardist
            };
            let k = rng.random_range(3..=8usize);
            let pd = uniform(rng, px, 0.01, 0.99);
            let rd = uniform(rng, px * k, 0.0, 10.0);
            let nt = probs(rng, px, c);
            let gt_pd = uniform(rng, px, 0.0, 1.0);
            let gt_rd = uniform(rng, px * k, 0.0, 10.0);
            let gt_nt = one_hot(rng, px, c);
            let mut checked = interior(&pd, 0.0, 1.0, margin);
            checked.extend(std::iter::repeat_n(true, rd.len()));
            checked.extend(interior(&nt, 0.0, 1.0, margin));
            let (n_pd, n_rd) = (pd.len(), rd.len());
            let x: Vec<f64> = [pd, rd, nt].concat();
            let sw = StarLossWeights::for_variant(variant);
            let f = move |x: &[f64]| {
                let (pd, rest) = x.split_at(n_pd);
                let (rd, nt) = rest.split_at(n_rd);
                let (v, a, b, cc) =
                    star_loss_f64(pd, rd, nt, &gt_pd, &gt_rd, &gt_nt, k, c, &sw, &lw)
                        .expect("probabilities inside (0, 1)");
                (v, [a, b, cc].concat())
            };
            Instance {
                x,
                checked,
                f: Box::new(f),
            }
        }
    }
}

/// `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`, leaving `x` unchanged.
fn central_difference(f: &Objective<'_>, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    let mut at = |d: f64| {
        x[i] = orig + d;
        f(x).0
    };
    let v = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
    x[i] = orig;
    v
}

/// Runs every loss through `trials` random instances and compares each
/// checked gradient entry to a central difference.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut checks = Vec::with_capacity(LOSSES.len());
    for (li, &name) in LOSSES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(li as u64));
        let mut worst = 0.0f64;
        let mut entries = 0;
        for trial in 0..cfg.trials {
            let inst = instance(name, &mut rng, cfg.boundary_margin);
            let (value, mut grad) = (inst.f)(&inst.x);
            let floor = floor_for(value);
            if cfg.perturb_analytic && name == "dice" && trial == 0 {
                grad[0] += 1e-2 * (grad[0].abs() + 1.0);
            }
            let mut x = inst.x.clone();
            for i in 0..x.len() {
                if !inst.checked[i] {
                    continue;
                }
                let numeric = central_difference(&inst.f, &mut x, i, cfg.step);
                worst = worst.max(relative_error_floored(grad[i], numeric, floor));
                entries += 1;
            }
        }
        checks.push(LossCheck {
            name,
            trials: cfg.trials,
            entries,
            worst_rel_err: worst,
            pass: worst < cfg.tolerance,
        });
    }
    GradcheckReport {
        tolerance: cfg.tolerance,
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_gradcheck(&GradcheckConfig {
            trials: 50,
            ..Default::default()
        });
        assert!(report.pass(), "{}", report.render());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let report = run_gradcheck(&GradcheckConfig {
            trials: 2,
            perturb_analytic: true,
            ..Default::default()
        });
        assert!(!report.pass());
        let dice = report.checks.iter().find(|c| c.name == "dice").unwrap();
        assert!(!dice.pass);
    }

    #[test]
    fn passes_across_seeds() {
        for seed in 1..12 {
            let report = run_gradcheck(&GradcheckConfig {
                seed,
                trials: 50,
                ..Default::default()
            });
            assert!(report.pass(), "seed {seed}\n{}", report.render());
        }
    }
}

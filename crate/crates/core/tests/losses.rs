mod common;

use cellvit::losses::*;
use common::*;
use rand::Rng;

// scalar-loop references, written per pixel and class without the library helpers

fn dice_ref(p: &[f64], y: &[f64], c: usize, eps: f64) -> f64 {
    (0..c)
        .map(|k| {
            let (mut i, mut sp, mut sy) = (0.0, 0.0, 0.0);
            for px in 0..p.len() / c {
                i += p[px * c + k] * y[px * c + k];
                sp += p[px * c + k];
                sy += y[px * c + k];
            }
            1.0 - (2.0 * i + eps) / (sp + sy + eps)
        })
        .sum()
}

fn ft_ref(p: &[f64], y: &[f64], c: usize, a: f64, b: f64, g: f64, eps: f64) -> f64 {
    (0..c)
        .map(|k| {
            let (mut tp, mut fneg, mut fpos) = (0.0, 0.0, 0.0);
            for px in 0..p.len() / c {
                let (pp, yy) = (p[px * c + k], y[px * c + k]);
                tp += pp * yy;
                fneg += yy * (1.0 - pp);
                fpos += (1.0 - yy) * pp;
            }
            let ti = (tp + eps) / (tp + a * fneg + b * fpos + eps);
            (1.0 - ti).powf(1.0 / g)
        })
        .sum()
}

fn bce_ref(p: &[f64], y: &[f64], c: usize) -> f64 {
    let n = p.len() / c;
    let mut s = 0.0;
    for px in 0..n {
        for k in 0..c {
            if y[px * c + k] > 0.0 {
                s -= y[px * c + k] * p[px * c + k].ln();
            }
        }
    }
    s / n as f64
}

fn sobel_ref(x: &[f64], h: usize, w: usize, ch: usize, horizontal: bool) -> Vec<f64> {
    let get = |r: i64, c: i64| x[((r.clamp(0, h as i64 - 1) as usize) * w + c.clamp(0, w as i64 - 1) as usize) * 2 + ch];
    let mut out = vec![0.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            out[r as usize * w + c as usize] = if horizontal {
                (get(r - 1, c + 1) + 2.0 * get(r, c + 1) + get(r + 1, c + 1))
                    - (get(r - 1, c - 1) + 2.0 * get(r, c - 1) + get(r + 1, c - 1))
            } else {
                (get(r + 1, c - 1) + 2.0 * get(r + 1, c) + get(r + 1, c + 1))
                    - (get(r - 1, c - 1) + 2.0 * get(r - 1, c) + get(r - 1, c + 1))
            };
        }
    }
    out
}

fn msge_ref(p: &[f64], y: &[f64], mask: &[f64], h: usize, w: usize) -> f64 {
    let m: f64 = mask.iter().sum();
    if m == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (ch, horiz) in [(0, true), (1, false)] {
        let sp = sobel_ref(p, h, w, ch, horiz);
        let sy = sobel_ref(y, h, w, ch, horiz);
        total += (0..h * w).map(|i| mask[i] * (sp[i] - sy[i]).powi(2)).sum::<f64>() / m;
    }
    total
}

fn ce_ref(l: &[f64], class: usize) -> f64 {
    let z: f64 = l.iter().map(|v| v.exp()).sum();
    -(l[class].exp() / z).ln()
}

#[test]
fn dice_trivial_cases() {
    let y = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let eps = 1e-6;
    // single class so that the identity is exact
    let r = dice_loss(&tensor(&[6, 1], &y), &tensor(&[6, 1], &y), eps).unwrap();
    assert!(r.value.abs() < 1e-12);
    let r = dice_loss(&tensor(&[6, 1], &[0.0; 6]), &tensor(&[6, 1], &y), eps).unwrap();
    assert!((r.value - (1.0 - eps / (3.0 + eps))).abs() < 1e-12);
}

#[test]
fn dice_matches_scalar_oracle() {
    let mut g = rng(1);
    for _ in 0..10 {
        let p = random_simplex(&mut g, 64, 3);
        let y = random_onehot(&mut g, 64, 3);
        let r = dice_loss(&tensor(&[8, 8, 3], &p), &tensor(&[8, 8, 3], &y), 1e-6).unwrap();
        let p32: Vec<f64> = p.iter().map(|&v| v as f32 as f64).collect();
        assert!((r.value - dice_ref(&p32, &y, 3, 1e-6)).abs() < 1e-6);
    }
}

#[test]
fn focal_tversky_matches_scalar_oracle() {
    let lw = LossWeights::default();
    let mut g = rng(2);
    for _ in 0..10 {
        let p = random_simplex(&mut g, 36, 3);
        let y = random_onehot(&mut g, 36, 3);
        let r = focal_tversky_loss(&tensor(&[6, 6, 3], &p), &tensor(&[6, 6, 3], &y), lw.alpha_ft, lw.beta_ft, lw.gamma_ft, lw.epsilon)
            .unwrap();
        let p32: Vec<f64> = p.iter().map(|&v| v as f32 as f64).collect();
        let want = ft_ref(&p32, &y, 3, lw.alpha_ft, lw.beta_ft, lw.gamma_ft, lw.epsilon);
        assert!((r.value - want).abs() < 1e-6, "{} vs {want}", r.value);
    }
    // perfect prediction
    let y = random_onehot(&mut g, 36, 3);
    let r = focal_tversky_loss(&tensor(&[6, 6, 3], &y), &tensor(&[6, 6, 3], &y), 0.7, 0.3, 4.0 / 3.0, 1e-6).unwrap();
    assert!(r.value.abs() < 1e-9);
}

#[test]
fn bce_matches_scalar_oracle() {
    let mut g = rng(3);
    let p = random_simplex(&mut g, 25, 4);
    let y = random_onehot(&mut g, 25, 4);
    let r = bce_loss(&tensor(&[5, 5, 4], &p), &tensor(&[5, 5, 4], &y)).unwrap();
    let p32: Vec<f64> = p.iter().map(|&v| v as f32 as f64).collect();
    assert!((r.value - bce_ref(&p32, &y, 4)).abs() < 1e-6);
    // zero probability on the target class is a domain error, not infinity
    let mut p0 = p.clone();
    let k = y.iter().position(|&v| v == 1.0).unwrap();
    p0[k] = 0.0;
    assert!(bce_loss(&tensor(&[5, 5, 4], &p0), &tensor(&[5, 5, 4], &y)).is_err());
}

#[test]
fn mse_trivial_and_random() {
    let mut g = rng(4);
    let y: Vec<f64> = (0..50).map(|_| g.random_range(-1.0..1.0)).collect();
    let t = tensor(&[5, 5, 2], &y);
    assert_eq!(mse_hv(&t, &t).unwrap().value, 0.0);
    let shifted: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
    let r = mse_hv(&tensor(&[5, 5, 2], &shifted), &t).unwrap();
    assert!((r.value - 1.0).abs() < 1e-6);
    let p: Vec<f64> = (0..50).map(|_| g.random_range(-1.0..1.0)).collect();
    let want = p.iter().zip(&y).map(|(a, b)| ((*a as f32 as f64) - (*b as f32 as f64)).powi(2)).sum::<f64>() / 50.0;
    assert!((mse_hv(&tensor(&[5, 5, 2], &p), &t).unwrap().value - want).abs() < 1e-6);
}

#[test]
fn msge_cases() {
    let (h, w) = (7, 9);
    let full = vec![1.0f32; h * w];
    // constant maps have no gradient anywhere
    let c1 = tensor(&[h, w, 2], &vec![0.3; h * w * 2]);
    let c2 = tensor(&[h, w, 2], &vec![-0.6; h * w * 2]);
    let r = msge_hv(&c1, &c2, &full).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.grad.data().iter().all(|&g| g == 0.0));

    // horizontal ramp of slope a in channel 0 vs flat map
    let a = 0.125;
    let mut ramp = vec![0.0; h * w * 2];
    for r in 0..h {
        for c in 0..w {
            ramp[(r * w + c) * 2] = a * c as f64;
        }
    }
    let flat = vec![0.0; h * w * 2];
    let got = msge_hv(&tensor(&[h, w, 2], &ramp), &tensor(&[h, w, 2], &flat), &full).unwrap().value;
    // interior columns see 8a, the two border columns 4a under edge replication
    let interior = (w - 2) as f64 * (8.0 * a).powi(2);
    let border = 2.0 * (4.0 * a).powi(2);
    let want = h as f64 * (interior + border) / (h * w) as f64;
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");

    let mut g = rng(5);
    let p: Vec<f64> = (0..h * w * 2).map(|_| g.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..h * w * 2).map(|_| g.random_range(-1.0..1.0)).collect();
    let mask: Vec<f64> = (0..h * w).map(|_| if g.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let m32: Vec<f32> = mask.iter().map(|&v| v as f32).collect();
    let got = msge_hv(&tensor(&[h, w, 2], &p), &tensor(&[h, w, 2], &y), &m32).unwrap().value;
    let r32 = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
    assert!((got - msge_ref(&r32(&p), &r32(&y), &mask, h, w)).abs() < 1e-6);
    assert_eq!(msge_hv(&tensor(&[h, w, 2], &p), &tensor(&[h, w, 2], &y), &vec![0.0; h * w]).unwrap().value, 0.0);
}

#[test]
fn cross_entropy_cases() {
    let uniform = vec![0.0f32; 19];
    assert!((tissue_ce(&uniform, 4).unwrap().value - 19f64.ln()).abs() < 1e-12);
    let mut sharp = vec![-20.0f32; 19];
    sharp[3] = 20.0;
    assert!(tissue_ce(&sharp, 3).unwrap().value < 1e-12);
    let mut g = rng(6);
    let l: Vec<f32> = (0..19).map(|_| g.random_range(-3.0..3.0)).collect();
    let l64: Vec<f64> = l.iter().map(|&v| v as f64).collect();
    assert!((tissue_ce(&l, 11).unwrap().value - ce_ref(&l64, 11)).abs() < 1e-9);
    assert!(tissue_ce(&l, 19).is_err());
}

#[test]
fn hovernet_total_is_weighted_sum_of_terms() {
    let (h, w, c) = (6, 6, 5);
    let mut g = rng(7);
    let np = random_simplex(&mut g, h * w, 2);
    let gnp = random_onehot(&mut g, h * w, 2);
    let hv: Vec<f64> = (0..h * w * 2).map(|_| g.random_range(-1.0..1.0)).collect();
    let ghv: Vec<f64> = (0..h * w * 2).map(|_| g.random_range(-1.0..1.0)).collect();
    let nt = random_simplex(&mut g, h * w, c);
    let gnt = random_onehot(&mut g, h * w, c);
    let logits: Vec<f64> = (0..19).map(|_| g.random_range(-2.0..2.0)).collect();
    let lw = LossWeights::default();
    let x = HovernetInputs {
        np: &np,
        hv: &hv,
        nt: &nt,
        logits: &logits,
        gt_np: &gnp,
        gt_hv: &ghv,
        gt_nt: &gnt,
        tissue: 2,
        h,
        w,
        nt_classes: c,
    };
    let (total, _) = hovernet_loss_f64(&x, &lw).unwrap();
    let mask: Vec<f64> = (0..h * w).map(|i| gnp[i * 2 + 1]).collect();
    let want = lw.lambda_np_ft * ft_ref(&np, &gnp, 2, 0.7, 0.3, 4.0 / 3.0, 1e-6)
        + lw.lambda_np_dice * dice_ref(&np, &gnp, 2, 1e-6)
        + lw.lambda_hv_mse * hv.iter().zip(&ghv).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (h * w * 2) as f64
        + lw.lambda_hv_msge * msge_ref(&hv, &ghv, &mask, h, w)
        + lw.lambda_nt_ft * ft_ref(&nt, &gnt, c, 0.7, 0.3, 4.0 / 3.0, 1e-6)
        + lw.lambda_nt_dice * dice_ref(&nt, &gnt, c, 1e-6)
        + lw.lambda_nt_bce * bce_ref(&nt, &gnt, c)
        + lw.lambda_tc_ce * ce_ref(&logits, 2);
    assert!((total - want).abs() < 1e-9 * want.max(1.0), "{total} vs {want}");

    let (zero, grads) = hovernet_loss_f64(&x, &lw.zero_lambdas()).unwrap();
    assert_eq!(zero, 0.0);
    assert!(grads.np.iter().chain(&grads.hv).chain(&grads.nt).all(|&v| v == 0.0));
}

#[test]
fn star_total_is_weighted_sum_of_terms() {
    let (n, k, c) = (20, 8, 4);
    let mut g = rng(8);
    let pd: Vec<f64> = (0..n).map(|_| g.random_range(0.05..0.95)).collect();
    let gpd: Vec<f64> = (0..n).map(|_| g.random_range(0.0..1.0)).collect();
    let rd: Vec<f64> = (0..n * k).map(|_| g.random_range(0.0..10.0)).collect();
    let grd: Vec<f64> = (0..n * k).map(|_| g.random_range(0.0..10.0)).collect();
    let nt = random_simplex(&mut g, n, c);
    let gnt = random_onehot(&mut g, n, c);
    let lw = LossWeights::default();
    for variant in [StarVariant::Stardist, StarVariant::Cppnet] {
        let sw = StarLossWeights::for_variant(variant);
        let (v, ..) = star_loss_f64(&pd, &rd, &nt, &gpd, &grd, &gnt, k, c, &sw, &lw).unwrap();
        let bin: f64 = pd.iter().zip(&gpd).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / n as f64;
        let rdm: f64 = (0..n * k).map(|i| gpd[i / k] * (rd[i] - grd[i]).powi(2)).sum::<f64>() / (n * k) as f64;
        let want = sw.pd_bce * bin
            + sw.rd_mse * rdm
            + sw.nt_ft * ft_ref(&nt, &gnt, c, 0.7, 0.3, 4.0 / 3.0, 1e-6)
            + sw.nt_dice * dice_ref(&nt, &gnt, c, 1e-6)
            + sw.nt_bce * bce_ref(&nt, &gnt, c);
        assert!((v - want).abs() < 1e-9 * want.max(1.0), "{variant:?}: {v} vs {want}");
    }
}

#[test]
fn gradcheck_suite_and_negative_control() {
    let report = run_gradcheck(&GradcheckConfig { trials: 10, ..Default::default() });
    assert!(report.pass(), "{}", report.render());
    let broken = run_gradcheck(&GradcheckConfig { trials: 10, perturb_analytic: true, ..Default::default() });
    assert!(!broken.pass());
}

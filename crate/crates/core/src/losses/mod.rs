//! Segmentation and classification losses with analytic gradients with
//! respect to the predictions.
//!
//! Every loss is evaluated in `f64`. The `*_f64` kernels are public so that
//! finite-difference checks can perturb inputs at full precision; the tensor
//! wrappers convert at the boundary.

mod gradcheck;

pub use gradcheck::{
    floor_for, relative_error, relative_error_floored, run_gradcheck, GradcheckConfig, GradcheckReport, LossCheck,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictionBundle;
use crate::tensor::TensorF32;

/// Branch weights and Focal Tversky hyperparameters. Defaults are the
/// published training values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_np_ft: f64,
    pub lambda_np_dice: f64,
    pub lambda_hv_mse: f64,
    pub lambda_hv_msge: f64,
    pub lambda_nt_ft: f64,
    pub lambda_nt_dice: f64,
    pub lambda_nt_bce: f64,
    pub lambda_tc_ce: f64,
    pub alpha_ft: f64,
    pub beta_ft: f64,
    pub gamma_ft: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_np_ft: 1.0,
            lambda_np_dice: 1.0,
            lambda_hv_mse: 2.5,
            lambda_hv_msge: 8.0,
            lambda_nt_ft: 0.5,
            lambda_nt_dice: 0.2,
            lambda_nt_bce: 0.5,
            lambda_tc_ce: 0.1,
            alpha_ft: 0.7,
            beta_ft: 0.3,
            gamma_ft: 4.0 / 3.0,
            epsilon: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn zero_lambdas(self) -> Self {
        Self {
            lambda_np_ft: 0.0,
            lambda_np_dice: 0.0,
            lambda_hv_mse: 0.0,
            lambda_hv_msge: 0.0,
            lambda_nt_ft: 0.0,
            lambda_nt_dice: 0.0,
            lambda_nt_bce: 0.0,
            lambda_tc_ce: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_np_ft,
            self.lambda_np_dice,
            self.lambda_hv_mse,
            self.lambda_hv_msge,
            self.lambda_nt_ft,
            self.lambda_nt_dice,
            self.lambda_nt_bce,
            self.lambda_tc_ce,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if !(self.epsilon > 0.0) || !(self.gamma_ft > 0.0) {
            return Err(Error::InvalidConfig("epsilon and gamma_ft must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueWithGrad {
    pub value: f64,
    /// Same shape as the prediction.
    pub grad: TensorF32,
}

fn to_f64(t: &TensorF32) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: &[usize], g: Vec<f64>) -> TensorF32 {
    TensorF32::new(shape, g.into_iter().map(|v| v as f32).collect()).expect("gradient shape")
}

fn same_shape(pred: &TensorF32, gt: &TensorF32) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn wrap(pred: &TensorF32, (value, grad): (f64, Vec<f64>)) -> LossValueWithGrad {
    LossValueWithGrad {
        value,
        grad: to_tensor(pred.shape(), grad),
    }
}

/// Pixel-wise categorical cross-entropy over the last axis:
/// `-(1/n) sum_i sum_c y_ic log p_ic` with `n` the pixel count.
pub fn bce_loss(pred: &TensorF32, gt: &TensorF32) -> Result<LossValueWithGrad> {
    same_shape(pred, gt)?;
    let r = bce_f64(&to_f64(pred), &to_f64(gt), pred.last_dim())?;
    Ok(wrap(pred, r))
}

/// Dice loss summed over classes (last axis).
pub fn dice_loss(pred: &TensorF32, gt: &TensorF32, epsilon: f64) -> Result<LossValueWithGrad> {
    same_shape(pred, gt)?;
    Ok(wrap(pred, dice_f64(&to_f64(pred), &to_f64(gt), pred.last_dim(), epsilon)))
}

/// Focal Tversky loss summed over classes (last axis).
pub fn focal_tversky_loss(
    pred: &TensorF32,
    gt: &TensorF32,
    alpha: f64,
    beta: f64,
    gamma: f64,
    epsilon: f64,
) -> Result<LossValueWithGrad> {
    same_shape(pred, gt)?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig("gamma must be positive".into()));
    }
    Ok(wrap(
        pred,
        focal_tversky_f64(&to_f64(pred), &to_f64(gt), pred.last_dim(), alpha, beta, gamma, epsilon),
    ))
}

/// Mean squared error over all pixels and both HV channels.
pub fn mse_hv(pred: &TensorF32, gt: &TensorF32) -> Result<LossValueWithGrad> {
    same_shape(pred, gt)?;
    Ok(wrap(pred, mse_f64(&to_f64(pred), &to_f64(gt))))
}

/// Mean squared error between Sobel gradients of the HV maps: horizontal
/// derivative of channel 0 and vertical derivative of channel 1, each
/// averaged over the focus mask and then summed. An empty mask gives 0.
pub fn msge_hv(pred: &TensorF32, gt: &TensorF32, focus_mask: &[f32]) -> Result<LossValueWithGrad> {
    same_shape(pred, gt)?;
    let (h, w, c) = pred.hwc()?;
    if c != 2 {
        return Err(Error::shape(format!("HV maps need 2 channels, got {c}")));
    }
    if focus_mask.len() != h * w {
        return Err(Error::shape(format!(
            "focus mask has {} pixels, maps have {}",
            focus_mask.len(),
            h * w
        )));
    }
    let mask: Vec<f64> = focus_mask.iter().map(|&m| if m > 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(wrap(pred, msge_f64(&to_f64(pred), &to_f64(gt), &mask, h, w)))
}

/// Softmax cross-entropy of tissue logits; the gradient is with respect to
/// the logits.
pub fn tissue_ce(logits: &[f32], class: usize) -> Result<LossValueWithGrad> {
    if class >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: class,
            len: logits.len(),
        });
    }
    let l: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let (value, grad) = ce_logits_f64(&l, class);
    Ok(LossValueWithGrad {
        value,
        grad: to_tensor(&[logits.len()], grad),
    })
}

// ---------------------------------------------------------------------------
// f64 kernels

pub fn bce_f64(pred: &[f64], gt: &[f64], classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = (pred.len() / classes) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p, &y)) in pred.iter().zip(gt).enumerate() {
        if y == 0.0 {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::DomainError(format!(
                "probability {p} at element {i} where target is {y}"
            )));
        }
        value -= y * p.ln();
        grad[i] = -y / (p * n);
    }
    Ok((value / n, grad))
}

pub fn dice_f64(pred: &[f64], gt: &[f64], classes: usize, eps: f64) -> (f64, Vec<f64>) {
    let mut inter = vec![0.0; classes];
    let mut sum_y = vec![0.0; classes];
    let mut sum_p = vec![0.0; classes];
    for (i, (&p, &y)) in pred.iter().zip(gt).enumerate() {
        let c = i % classes;
        inter[c] += p * y;
        sum_y[c] += y;
        sum_p[c] += p;
    }
    let mut value = 0.0;
    for c in 0..classes {
        value += 1.0 - (2.0 * inter[c] + eps) / (sum_y[c] + sum_p[c] + eps);
    }
    let grad = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (_, &y))| {
            let c = i % classes;
            let num = 2.0 * inter[c] + eps;
            let den = sum_y[c] + sum_p[c] + eps;
            -(2.0 * y * den - num) / (den * den)
        })
        .collect();
    (value, grad)
}

/// Per class `TI = (TP + eps) / (TP + alpha FN + beta FP + eps)`, loss
/// `sum_c (1 - TI_c)^(1/gamma)`.
pub fn focal_tversky_f64(
    pred: &[f64],
    gt: &[f64],
    classes: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    eps: f64,
) -> (f64, Vec<f64>) {
    let mut tp = vec![0.0; classes];
    let mut fn_ = vec![0.0; classes];
    let mut fp = vec![0.0; classes];
    for (i, (&p, &y)) in pred.iter().zip(gt).enumerate() {
        let c = i % classes;
        tp[c] += p * y;
        fn_[c] += y * (1.0 - p);
        fp[c] += (1.0 - y) * p;
    }
    let inv_gamma = 1.0 / gamma;
    let mut value = 0.0;
    // d loss_c / d TI_c
    let mut dti = vec![0.0; classes];
    let mut num = vec![0.0; classes];
    let mut den = vec![0.0; classes];
    for c in 0..classes {
        num[c] = tp[c] + eps;
        den[c] = tp[c] + alpha * fn_[c] + beta * fp[c] + eps;
        let ti = num[c] / den[c];
        let one_minus = (1.0 - ti).max(0.0);
        value += one_minus.powf(inv_gamma);
        dti[c] = if one_minus > 0.0 {
            -inv_gamma * one_minus.powf(inv_gamma - 1.0)
        } else {
            0.0
        };
    }
    let grad = gt
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let c = i % classes;
            let dnum = y;
            let dden = y - alpha * y + beta * (1.0 - y);
            let d_ti = (dnum * den[c] - num[c] * dden) / (den[c] * den[c]);
            dti[c] * d_ti
        })
        .collect();
    (value, grad)
}

pub fn mse_f64(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let d = p - y;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    (value / n, grad)
}

const SOBEL_SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

/// Sobel derivative of one channel of an interleaved `(H, W, 2)` buffer with
/// edge-replicated borders. `along_cols` selects the horizontal derivative.
pub fn sobel_f64(x: &[f64], h: usize, w: usize, ch: usize, along_cols: bool) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        x[(r * w + c) * 2 + ch]
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for (k, &s) in SOBEL_SMOOTH.iter().enumerate() {
                let o = k as isize - 1;
                acc += if along_cols {
                    s * (at(r + o, c + 1) - at(r + o, c - 1))
                } else {
                    s * (at(r + 1, c + o) - at(r - 1, c + o))
                };
            }
            out[r as usize * w + c as usize] = acc;
        }
    }
    out
}

/// Adjoint of [`sobel_f64`]: scatters `g` (per output pixel) back onto the
/// input channel `ch`, accumulating into `dst`.
fn sobel_adjoint(g: &[f64], h: usize, w: usize, ch: usize, along_cols: bool, dst: &mut [f64]) {
    let idx = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        (r * w + c) * 2 + ch
    };
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gv = g[r as usize * w + c as usize];
            if gv == 0.0 {
                continue;
            }
            for (k, &s) in SOBEL_SMOOTH.iter().enumerate() {
                let o = k as isize - 1;
                if along_cols {
                    dst[idx(r + o, c + 1)] += s * gv;
                    dst[idx(r + o, c - 1)] -= s * gv;
                } else {
                    dst[idx(r + 1, c + o)] += s * gv;
                    dst[idx(r - 1, c + o)] -= s * gv;
                }
            }
        }
    }
}

pub fn msge_f64(pred: &[f64], gt: &[f64], mask: &[f64], h: usize, w: usize) -> (f64, Vec<f64>) {
    let count: f64 = mask.iter().sum();
    let mut grad = vec![0.0; pred.len()];
    if count == 0.0 {
        return (0.0, grad);
    }
    let diff: Vec<f64> = pred.iter().zip(gt).map(|(p, y)| p - y).collect();
    let mut value = 0.0;
    for (ch, along_cols) in [(0, true), (1, false)] {
        let s = sobel_f64(&diff, h, w, ch, along_cols);
        let mut g = vec![0.0; h * w];
        for i in 0..h * w {
            if mask[i] != 0.0 {
                value += s[i] * s[i] / count;
                g[i] = 2.0 * s[i] / count;
            }
        }
        sobel_adjoint(&g, h, w, ch, along_cols, &mut grad);
    }
    (value, grad)
}

pub fn ce_logits_f64(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let value = log_z - logits[class];
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (l - log_z).exp() - if i == class { 1.0 } else { 0.0 })
        .collect();
    (value, grad)
}

// ---------------------------------------------------------------------------
// Composite objectives

/// Ground truth for the HoVer-style objective.
#[derive(Debug, Clone, PartialEq)]
pub struct HovernetTarget {
    /// `(H, W, 2)` one-hot background / nucleus.
    pub np: TensorF32,
    /// `(H, W, 2)`.
    pub hv: TensorF32,
    /// `(H, W, C)` one-hot nuclei types.
    pub nt: TensorF32,
    pub tissue: usize,
}

/// Total loss with gradients for each prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct HovernetLoss {
    pub value: f64,
    pub np: f64,
    pub hv: f64,
    pub nt: f64,
    pub tc: f64,
    pub grad_np: TensorF32,
    pub grad_hv: TensorF32,
    pub grad_nt: TensorF32,
    pub grad_tissue: Vec<f32>,
}

/// Raw `f64` inputs of the HoVer-style objective.
#[derive(Debug, Clone)]
pub struct HovernetInputs<'a> {
    pub np: &'a [f64],
    pub hv: &'a [f64],
    pub nt: &'a [f64],
    pub logits: &'a [f64],
    pub gt_np: &'a [f64],
    pub gt_hv: &'a [f64],
    pub gt_nt: &'a [f64],
    pub tissue: usize,
    pub h: usize,
    pub w: usize,
    pub nt_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HovernetGrads {
    pub branch: [f64; 4],
    pub np: Vec<f64>,
    pub hv: Vec<f64>,
    pub nt: Vec<f64>,
    pub logits: Vec<f64>,
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// `L_NP + L_HV + L_NT + L_TC` with
/// `L_NP = l1 FT + l2 Dice`, `L_HV = l3 MSE + l4 MSGE`,
/// `L_NT = l5 FT + l6 Dice + l7 BCE`, `L_TC = l8 CE`. The MSGE focus mask is
/// the target nucleus channel.
pub fn hovernet_loss_f64(x: &HovernetInputs<'_>, lw: &LossWeights) -> Result<(f64, HovernetGrads)> {
    let (a, b, g, e) = (lw.alpha_ft, lw.beta_ft, lw.gamma_ft, lw.epsilon);
    let mut grads = HovernetGrads {
        branch: [0.0; 4],
        np: vec![0.0; x.np.len()],
        hv: vec![0.0; x.hv.len()],
        nt: vec![0.0; x.nt.len()],
        logits: vec![0.0; x.logits.len()],
    };

    let (ft, gft) = focal_tversky_f64(x.np, x.gt_np, 2, a, b, g, e);
    let (dc, gdc) = dice_f64(x.np, x.gt_np, 2, e);
    grads.branch[0] = lw.lambda_np_ft * ft + lw.lambda_np_dice * dc;
    axpy(&mut grads.np, lw.lambda_np_ft, &gft);
    axpy(&mut grads.np, lw.lambda_np_dice, &gdc);

    let focus: Vec<f64> = x.gt_np.iter().skip(1).step_by(2).map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    let (mse, gmse) = mse_f64(x.hv, x.gt_hv);
    let (msge, gmsge) = msge_f64(x.hv, x.gt_hv, &focus, x.h, x.w);
    grads.branch[1] = lw.lambda_hv_mse * mse + lw.lambda_hv_msge * msge;
    axpy(&mut grads.hv, lw.lambda_hv_mse, &gmse);
    axpy(&mut grads.hv, lw.lambda_hv_msge, &gmsge);

    let c = x.nt_classes;
    let (ft, gft) = focal_tversky_f64(x.nt, x.gt_nt, c, a, b, g, e);
    let (dc, gdc) = dice_f64(x.nt, x.gt_nt, c, e);
    let (bce, gbce) = if lw.lambda_nt_bce > 0.0 {
        bce_f64(x.nt, x.gt_nt, c)?
    } else {
        (0.0, vec![0.0; x.nt.len()])
    };
    grads.branch[2] = lw.lambda_nt_ft * ft + lw.lambda_nt_dice * dc + lw.lambda_nt_bce * bce;
    axpy(&mut grads.nt, lw.lambda_nt_ft, &gft);
    axpy(&mut grads.nt, lw.lambda_nt_dice, &gdc);
    axpy(&mut grads.nt, lw.lambda_nt_bce, &gbce);

    let (ce, gce) = ce_logits_f64(x.logits, x.tissue);
    grads.branch[3] = lw.lambda_tc_ce * ce;
    axpy(&mut grads.logits, lw.lambda_tc_ce, &gce);

    Ok((grads.branch.iter().sum(), grads))
}

/// Total HoVer-style training objective of a prediction bundle.
pub fn total_loss_hovernet(
    bundle: &PredictionBundle,
    gt: &HovernetTarget,
    weights: &LossWeights,
) -> Result<HovernetLoss> {
    weights.validate()?;
    same_shape(&bundle.np_map, &gt.np)?;
    same_shape(&bundle.hv_map, &gt.hv)?;
    same_shape(&bundle.nt_map, &gt.nt)?;
    let (h, w, _) = bundle.np_map.hwc()?;
    if gt.tissue >= bundle.tissue_logits.len() {
        return Err(Error::IndexOutOfRange {
            index: gt.tissue,
            len: bundle.tissue_logits.len(),
        });
    }
    let np = to_f64(&bundle.np_map);
    let hv = to_f64(&bundle.hv_map);
    let nt = to_f64(&bundle.nt_map);
    let logits: Vec<f64> = bundle.tissue_logits.iter().map(|&v| v as f64).collect();
    let (gnp, ghv, gnt) = (to_f64(&gt.np), to_f64(&gt.hv), to_f64(&gt.nt));
    let inputs = HovernetInputs {
        np: &np,
        hv: &hv,
        nt: &nt,
        logits: &logits,
        gt_np: &gnp,
        gt_hv: &ghv,
        gt_nt: &gnt,
        tissue: gt.tissue,
        h,
        w,
        nt_classes: bundle.nt_map.last_dim(),
    };
    let (value, g) = hovernet_loss_f64(&inputs, weights)?;
    Ok(HovernetLoss {
        value,
        np: g.branch[0],
        hv: g.branch[1],
        nt: g.branch[2],
        tc: g.branch[3],
        grad_np: to_tensor(bundle.np_map.shape(), g.np),
        grad_hv: to_tensor(bundle.hv_map.shape(), g.hv),
        grad_nt: to_tensor(bundle.nt_map.shape(), g.nt),
        grad_tissue: g.logits.into_iter().map(|v| v as f32).collect(),
    })
}

/// Loss composition of the star-distance decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StarVariant {
    Stardist,
    Cppnet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarLossWeights {
    pub pd_bce: f64,
    pub rd_mse: f64,
    pub nt_ft: f64,
    pub nt_dice: f64,
    pub nt_bce: f64,
}

impl StarLossWeights {
    pub fn for_variant(v: StarVariant) -> Self {
        match v {
            StarVariant::Stardist => Self {
                pd_bce: 1.0,
                rd_mse: 1.0,
                nt_ft: 0.0,
                nt_dice: 1.0,
                nt_bce: 1.0,
            },
            StarVariant::Cppnet => Self {
                pd_bce: 1.0,
                rd_mse: 1.0,
                nt_ft: 0.5,
                nt_dice: 0.2,
                nt_bce: 0.5,
            },
        }
    }
}

/// Targets of the star-distance objective.
#[derive(Debug, Clone, PartialEq)]
pub struct StarTarget {
    /// `(N_px)` object probabilities in `[0, 1]`.
    pub pd: Vec<f32>,
    /// `(N_px, K)` radial distances.
    pub rd: TensorF32,
    /// `(N_px, C)` one-hot nuclei types.
    pub nt: TensorF32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StarLoss {
    pub value: f64,
    pub grad_pd: Vec<f32>,
    pub grad_rd: TensorF32,
    pub grad_nt: TensorF32,
}

/// Two-class cross-entropy of object probabilities:
/// `-(1/n) sum_i [y log p + (1 - y) log(1 - p)]`.
pub fn binary_bce_f64(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p, &y)) in pred.iter().zip(gt).enumerate() {
        if (y > 0.0 && !(p > 0.0)) || (y < 1.0 && !(p < 1.0)) {
            return Err(Error::DomainError(format!("probability {p} at pixel {i}")));
        }
        if y > 0.0 {
            value -= y * p.ln();
            grad[i] -= y / (p * n);
        }
        if y < 1.0 {
            value -= (1.0 - y) * (1.0 - p).ln();
            grad[i] += (1.0 - y) / ((1.0 - p) * n);
        }
    }
    Ok((value / n, grad))
}

/// Squared ray-distance error weighted per pixel by the target object
/// probability, averaged over pixels and rays.
pub fn weighted_rd_mse_f64(pred: &[f64], gt: &[f64], weight: &[f64], rays: usize) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (&p, &y))| {
            let wgt = weight[i / rays];
            let d = p - y;
            value += wgt * d * d;
            2.0 * wgt * d / n
        })
        .collect();
    (value / n, grad)
}

#[allow(clippy::too_many_arguments)]
pub fn star_loss_f64(
    pd: &[f64],
    rd: &[f64],
    nt: &[f64],
    gt_pd: &[f64],
    gt_rd: &[f64],
    gt_nt: &[f64],
    rays: usize,
    classes: usize,
    sw: &StarLossWeights,
    lw: &LossWeights,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (pdv, gpd) = binary_bce_f64(pd, gt_pd)?;
    let (rdv, grd) = weighted_rd_mse_f64(rd, gt_rd, gt_pd, rays);
    let (ftv, gft) = focal_tversky_f64(nt, gt_nt, classes, lw.alpha_ft, lw.beta_ft, lw.gamma_ft, lw.epsilon);
    let (dcv, gdc) = dice_f64(nt, gt_nt, classes, lw.epsilon);
    let (bcev, gbce) = bce_f64(nt, gt_nt, classes)?;

    let value = sw.pd_bce * pdv + sw.rd_mse * rdv + sw.nt_ft * ftv + sw.nt_dice * dcv + sw.nt_bce * bcev;
    let grad_pd = gpd.iter().map(|g| sw.pd_bce * g).collect();
    let grad_rd = grd.iter().map(|g| sw.rd_mse * g).collect();
    let mut grad_nt = vec![0.0; nt.len()];
    axpy(&mut grad_nt, sw.nt_ft, &gft);
    axpy(&mut grad_nt, sw.nt_dice, &gdc);
    axpy(&mut grad_nt, sw.nt_bce, &gbce);
    Ok((value, grad_pd, grad_rd, grad_nt))
}

/// `L_PD + L_RD + L_NT` for the STARDIST (unit weights, Dice + BCE types)
/// or CPP-Net (0.5 FT + 0.2 Dice + 0.5 BCE types) decoders.
pub fn total_loss_stardist(
    pd_pred: &[f32],
    rd_pred: &TensorF32,
    nt_pred: &TensorF32,
    gt: &StarTarget,
    variant: StarVariant,
) -> Result<StarLoss> {
    let n = pd_pred.len();
    if gt.pd.len() != n || rd_pred.shape()[0] != n || nt_pred.shape()[0] != n {
        return Err(Error::shape("star loss inputs disagree on pixel count"));
    }
    same_shape(rd_pred, &gt.rd)?;
    same_shape(nt_pred, &gt.nt)?;
    let lw = LossWeights::default();
    let sw = StarLossWeights::for_variant(variant);
    let f = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let (value, gpd, grd, gnt) = star_loss_f64(
        &f(pd_pred),
        &to_f64(rd_pred),
        &to_f64(nt_pred),
        &f(&gt.pd),
        &to_f64(&gt.rd),
        &to_f64(&gt.nt),
        rd_pred.last_dim(),
        nt_pred.last_dim(),
        &sw,
        &lw,
    )?;
    Ok(StarLoss {
        value,
        grad_pd: gpd.into_iter().map(|v| v as f32).collect(),
        grad_rd: to_tensor(rd_pred.shape(), grd),
        grad_nt: to_tensor(nt_pred.shape(), gnt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f32>) -> TensorF32 {
        TensorF32::new(shape, v).unwrap()
    }

    #[test]
    fn bce_uniform_two_class_is_ln2() {
        let pred = TensorF32::full(&[4, 2], 0.5);
        let gt = t(&[4, 2], vec![1., 0., 0., 1., 1., 0., 0., 1.]);
        let r = bce_loss(&pred, &gt).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_near_perfect_is_tiny() {
        let s = 1.0 - 1e-7;
        let pred = t(&[2, 2], vec![s, 1.0 - s, 1.0 - s, s]);
        let gt = t(&[2, 2], vec![1., 0., 0., 1.]);
        let v = bce_loss(&pred, &gt).unwrap().value;
        // f32 rounds 1 - 1e-7 to the nearest representable value
        let expected = -(s as f64).ln();
        assert!((v - expected).abs() < 1e-12 && v < 2e-7);
    }

    #[test]
    fn bce_rejects_zero_probability_on_target() {
        let pred = t(&[1, 2], vec![0.0, 1.0]);
        let gt = t(&[1, 2], vec![1.0, 0.0]);
        assert!(matches!(bce_loss(&pred, &gt), Err(Error::DomainError(_))));
    }

    #[test]
    fn dice_perfect_and_empty_prediction() {
        let gt = t(&[4, 1], vec![1., 1., 0., 1.]);
        assert_eq!(dice_loss(&gt, &gt, 1e-6).unwrap().value, 0.0);
        let zero = TensorF32::zeros(&[4, 1]);
        let v = dice_loss(&zero, &gt, 1e-6).unwrap().value;
        assert!((v - (1.0 - 1e-6 / (3.0 + 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn focal_tversky_zero_at_perfection() {
        let gt = t(&[3, 2], vec![1., 0., 0., 1., 1., 0.]);
        let r = focal_tversky_loss(&gt, &gt, 0.7, 0.3, 4.0 / 3.0, 1e-6).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn mse_offset_by_one() {
        let gt = TensorF32::from_fn(&[3, 3, 2], |i| (i as f32 * 0.1).sin());
        let pred = TensorF32::from_fn(&[3, 3, 2], |i| (i as f32 * 0.1).sin() + 1.0);
        assert!((mse_hv(&pred, &gt).unwrap().value - 1.0).abs() < 1e-6);
        assert_eq!(mse_hv(&gt, &gt).unwrap().value, 0.0);
    }

    #[test]
    fn msge_constant_maps_and_empty_mask() {
        let a = TensorF32::full(&[5, 5, 2], 0.3);
        let b = TensorF32::full(&[5, 5, 2], -0.7);
        let mask = vec![1.0; 25];
        assert_eq!(msge_hv(&a, &b, &mask).unwrap().value, 0.0);
        let ramp = TensorF32::from_fn(&[5, 5, 2], |i| i as f32);
        let r = msge_hv(&ramp, &b, &[0.0; 25]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn tissue_ce_uniform_is_ln19() {
        let r = tissue_ce(&[0.0; 19], 4).unwrap();
        assert!((r.value - 19f64.ln()).abs() < 1e-12);
        let mut l = [0.0f32; 19];
        l[3] = 50.0;
        assert!(tissue_ce(&l, 3).unwrap().value < 1e-12);
        assert!(tissue_ce(&l, 19).is_err());
    }

    #[test]
    fn star_loss_variant_weights() {
        let s = StarLossWeights::for_variant(StarVariant::Stardist);
        assert_eq!((s.pd_bce, s.rd_mse, s.nt_dice, s.nt_bce, s.nt_ft), (1.0, 1.0, 1.0, 1.0, 0.0));
        let c = StarLossWeights::for_variant(StarVariant::Cppnet);
        assert_eq!((c.nt_ft, c.nt_dice, c.nt_bce), (0.5, 0.2, 0.5));
    }

    #[test]
    fn default_weights_match_training_table() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_hv_mse, 2.5);
        assert_eq!(w.lambda_hv_msge, 8.0);
        assert_eq!((w.lambda_nt_ft, w.lambda_nt_dice, w.lambda_nt_bce), (0.5, 0.2, 0.5));
        assert_eq!(w.lambda_tc_ce, 0.1);
        assert_eq!((w.alpha_ft, w.beta_ft, w.gamma_ft), (0.7, 0.3, 4.0 / 3.0));
        assert_eq!(w.epsilon, 1e-6);
    }
}

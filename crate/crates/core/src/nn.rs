//! Forward-only layer kernels on row-major `f32` buffers.
//!
//! Spatial tensors are `(H, W, C)`. Linear weights are stored `(in, out)`,
//! 3x3 convolutions `(3, 3, in, out)` and 2x2 stride-2 transposed
//! convolutions `(in, 2, 2, out)`, so every kernel reduces to a GEMM.

use crate::error::Result;
use crate::tensor::TensorF32;

/// `c = a (m x k) * b (k x n)`, overwriting `c`.
pub fn gemm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        // SAFETY: the slice lengths match the row-major strides given.
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (m x k) * b^T` where `b` is `(n x k)`.
pub fn gemm_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        // SAFETY: b is read with column stride k, i.e. as its transpose.
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise affine map `x (rows x in) * w (in x out) + bias`.
pub fn linear(x: &[f32], rows: usize, w: &TensorF32, bias: &TensorF32) -> Vec<f32> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    gemm(x, w.data(), &mut out, rows, k, n);
    add_bias(&mut out, bias.data());
    out
}

pub fn add_bias(x: &mut [f32], bias: &[f32]) {
    if bias.iter().all(|&b| b == 0.0) {
        return;
    }
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-6;

pub fn layer_norm(x: &[f32], dim: usize, gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / dim as f64;
        let var = src
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / dim as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
        for i in 0..dim {
            dst[i] = ((src[i] as f64 - mean) * inv) as f32 * gain[i] + bias[i];
        }
    }
    out
}

/// Tanh approximation of GELU.
pub fn gelu_inplace(x: &mut [f32]) {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    for v in x {
        let u = *v;
        *v = 0.5 * u * (1.0 + (C * (u + 0.044_715 * u * u * u)).tanh());
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn softmax_rows_inplace(x: &mut [f32], dim: usize) {
    for row in x.chunks_exact_mut(dim) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub fn sigmoid_inplace(x: &mut [f32]) {
    for v in x {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// 3x3 convolution, stride 1, zero padding. Rows are processed in bands so the
/// im2col buffer stays bounded for large inputs.
pub fn conv3x3(x: &TensorF32, w: &TensorF32, bias: &TensorF32) -> Result<TensorF32> {
    let (h, wd, cin) = x.hwc()?;
    let cout = w.last_dim();
    w.ensure_shape(&[3, 3, cin, cout], "conv3x3 kernel")?;
    bias.ensure_shape(&[cout], "conv3x3 bias")?;

    let k = 9 * cin;
    let band = (1usize << 18).div_ceil(wd * k).clamp(1, h);
    let src = x.data();
    let mut out = vec![0.0f32; h * wd * cout];
    let mut cols = vec![0.0f32; band * wd * k];

    let mut r0 = 0;
    while r0 < h {
        let rows = band.min(h - r0);
        let cols = &mut cols[..rows * wd * k];
        cols.fill(0.0);
        for r in 0..rows {
            let y = r0 + r;
            for xcol in 0..wd {
                let dst = &mut cols[(r * wd + xcol) * k..][..k];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xcol as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let s = (sy as usize * wd + sx as usize) * cin;
                        dst[(ky * 3 + kx) * cin..][..cin].copy_from_slice(&src[s..s + cin]);
                    }
                }
            }
        }
        let o = &mut out[r0 * wd * cout..(r0 + rows) * wd * cout];
        gemm(cols, w.data(), o, rows * wd, k, cout);
        r0 += rows;
    }
    add_bias(&mut out, bias.data());
    TensorF32::new(&[h, wd, cout], out)
}

/// Transposed convolution with a 2x2 kernel and stride 2: doubles both
/// spatial extents.
pub fn deconv2x2(x: &TensorF32, w: &TensorF32, bias: &TensorF32) -> Result<TensorF32> {
    let (h, wd, cin) = x.hwc()?;
    let cout = w.last_dim();
    w.ensure_shape(&[cin, 2, 2, cout], "deconv2x2 kernel")?;
    bias.ensure_shape(&[cout], "deconv2x2 bias")?;

    let mut tmp = vec![0.0f32; h * wd * 4 * cout];
    gemm(x.data(), w.data(), &mut tmp, h * wd, cin, 4 * cout);

    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0f32; oh * ow * cout];
    for y in 0..h {
        for xc in 0..wd {
            let src = &tmp[(y * wd + xc) * 4 * cout..][..4 * cout];
            for dy in 0..2 {
                for dx in 0..2 {
                    let o = ((2 * y + dy) * ow + 2 * xc + dx) * cout;
                    out[o..o + cout].copy_from_slice(&src[(dy * 2 + dx) * cout..][..cout]);
                }
            }
        }
    }
    add_bias(&mut out, bias.data());
    TensorF32::new(&[oh, ow, cout], out)
}

/// Pixel-wise linear map of an `(H, W, C)` tensor.
pub fn conv1x1(x: &TensorF32, w: &TensorF32, bias: &TensorF32) -> Result<TensorF32> {
    let (h, wd, cin) = x.hwc()?;
    let cout = w.last_dim();
    w.ensure_shape(&[cin, cout], "conv1x1 kernel")?;
    bias.ensure_shape(&[cout], "conv1x1 bias")?;
    let out = linear(x.data(), h * wd, w, bias);
    TensorF32::new(&[h, wd, cout], out)
}

pub fn concat_channels(a: &TensorF32, b: &TensorF32) -> Result<TensorF32> {
    let (h, w, ca) = a.hwc()?;
    let (hb, wb, cb) = b.hwc()?;
    if (h, w) != (hb, wb) {
        return Err(crate::Error::shape(format!(
            "cannot concat {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    TensorF32::new(&[h, w, ca + cb], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3x3(x: &TensorF32, w: &TensorF32, b: &TensorF32) -> Vec<f32> {
        let (h, wd, cin) = x.hwc().unwrap();
        let cout = w.last_dim();
        let mut out = vec![0.0f32; h * wd * cout];
        for y in 0..h as isize {
            for xc in 0..wd as isize {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (sy, sx) = (y + ky - 1, xc + kx - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let wv = w.data()
                                    [(((ky * 3 + kx) as usize * cin) + ci) * cout + co];
                                acc += wv * x.at3(sy as usize, sx as usize, ci);
                            }
                        }
                    }
                    out[(y as usize * wd + xc as usize) * cout + co] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let x = TensorF32::from_fn(&[5, 7, 3], |i| ((i * 37 % 11) as f32 - 5.0) * 0.1);
        let w = TensorF32::from_fn(&[3, 3, 3, 4], |i| ((i * 13 % 7) as f32 - 3.0) * 0.05);
        let b = TensorF32::from_fn(&[4], |i| i as f32 * 0.01);
        let fast = conv3x3(&x, &w, &b).unwrap();
        let slow = naive_conv3x3(&x, &w, &b);
        for (a, e) in fast.data().iter().zip(&slow) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn deconv_places_kernel_taps() {
        // Single input pixel, one channel: output block is the kernel itself.
        let x = TensorF32::new(&[1, 1, 1], vec![2.0]).unwrap();
        let w = TensorF32::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = TensorF32::zeros(&[1]);
        let y = deconv2x2(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        softmax_rows_inplace(&mut x, 3);
        assert!((x[..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((x[3..].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gemm_bt_matches_gemm() {
        let a: Vec<f32> = (0..6).map(|i| i as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|i| (i as f32) * 0.5).collect(); // 4x3
        let mut bt = vec![0.0; 12];
        for r in 0..4 {
            for c in 0..3 {
                bt[c * 4 + r] = b[r * 3 + c];
            }
        }
        let mut c1 = vec![0.0; 8];
        let mut c2 = vec![0.0; 8];
        gemm_bt(&a, &b, &mut c1, 2, 3, 4);
        gemm(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c1, c2);
    }
}

//! Encoder/decoder forward graph.
//!
//! An `(H, W, C)` image is cut into `P x P` tokens, projected to `D`
//! dimensions, prefixed with a class token and run through `L` pre-norm
//! transformer blocks. Block outputs at depths `L/4, 2L/4, 3L/4, L` are
//! reshaped to `(H/P, W/P, D)` maps and fed, together with a two-convolution
//! stem on the raw image, into three independent upsampling decoders (NP, HV,
//! NT) plus an optional star-distance decoder. The class token drives a linear
//! tissue classifier.

mod config;
mod weights;

pub use config::{default_widths, ModelConfig};
pub use weights::{load_weights, save_weights, Weights, CVTW_MAGIC, CVTW_VERSION};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::TensorF32;
use weights::{branch_names, skip_stage};

/// Token embeddings including the class token at row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `(N + 1, D)`.
    pub tokens: TensorF32,
    /// `(H / P, W / P)`.
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn class_token(&self) -> &[f32] {
        self.tokens.row(0)
    }

    /// Patch tokens without the class token, `(N, D)`.
    pub fn patch_tokens(&self) -> TensorF32 {
        let d = self.tokens.last_dim();
        let n = self.grid.0 * self.grid.1;
        TensorF32::new(&[n, d], self.tokens.data()[d..].to_vec()).expect("patch tokens")
    }
}

/// Encoder outputs consumed by the decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipFeatures {
    /// `(H/P, W/P, D)` maps from block depths `L/4, 2L/4, 3L/4, L`, in that
    /// order.
    pub levels: [TensorF32; 4],
    /// 1-based block indices the levels were taken from.
    pub depths: [usize; 4],
}

/// Star-convex distance outputs: object probability and `K` ray lengths per
/// pixel, plus externally refined distances when available.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMaps {
    /// `(H, W, 1)` in `[0, 1]`.
    pub prob: TensorF32,
    /// `(H, W, K)`, nonnegative.
    pub dist: TensorF32,
    /// Refined `(H, W, K)` distances; produced outside this crate.
    pub refined: Option<TensorF32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    /// `(H, W, 2)` softmax over background / nucleus.
    pub np_map: TensorF32,
    /// `(H, W, 2)` horizontal and vertical centroid offsets in `[-1, 1]`.
    pub hv_map: TensorF32,
    /// `(H, W, num_nuclei_classes)` softmax, channel 0 = background.
    pub nt_map: TensorF32,
    /// Unnormalized tissue scores from the class token.
    pub tissue_logits: Vec<f32>,
    /// `(N, D)` final-block token embeddings, class token removed.
    pub tokens_final: TensorF32,
    pub token_grid: (usize, usize),
    pub patch_size: usize,
    pub rays: Option<RayMaps>,
}

impl PredictionBundle {
    pub fn height(&self) -> usize {
        self.np_map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.np_map.shape()[1]
    }
}

/// Cuts an `(H, W, C)` image into `N = HW / P^2` raster-ordered tokens, each
/// the row-major flattening of its `P x P x C` patch.
pub fn patchify(image: &TensorF32, patch: usize) -> Result<TensorF32> {
    let (h, w, c) = image.hwc()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::NonDivisibleInput {
            height: h,
            width: w,
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let tok = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * tok);
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..patch {
                let row = ty * patch + py;
                let start = (row * w + tx * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    TensorF32::new(&[gh * gw, tok], out)
}

/// Bilinear resize (corner-aligned) of a square `g x g` grid of `d`-vectors
/// to `gh x gw`. A same-size resize returns the input unchanged.
pub fn interpolate_pos_grid(table: &[f32], g: usize, d: usize, gh: usize, gw: usize) -> Vec<f32> {
    assert_eq!(table.len(), g * g * d, "positional grid size");
    if (gh, gw) == (g, g) {
        return table.to_vec();
    }
    let scale = |dst: usize, n: usize| -> f64 {
        if n <= 1 || g <= 1 {
            0.0
        } else {
            dst as f64 * (g - 1) as f64 / (n - 1) as f64
        }
    };
    let mut out = vec![0.0f32; gh * gw * d];
    for y in 0..gh {
        let sy = scale(y, gh);
        let y0 = (sy.floor() as usize).min(g - 1);
        let y1 = (y0 + 1).min(g - 1);
        let fy = sy - y0 as f64;
        for x in 0..gw {
            let sx = scale(x, gw);
            let x0 = (sx.floor() as usize).min(g - 1);
            let x1 = (x0 + 1).min(g - 1);
            let fx = sx - x0 as f64;
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let dst = &mut out[(y * gw + x) * d..][..d];
            for (k, v) in dst.iter_mut().enumerate() {
                let at = |r: usize, c: usize| table[(r * g + c) * d + k] as f64;
                let mut acc = 0.0;
                // Skipping zero weights keeps grid-aligned samples exact.
                for (wt, r, c) in [(w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)] {
                    if wt != 0.0 {
                        acc += wt * at(r, c);
                    }
                }
                *v = acc as f32;
            }
        }
    }
    out
}

/// Model parameters bound to a validated configuration.
#[derive(Debug, Clone)]
pub struct CellVit {
    cfg: ModelConfig,
    weights: Weights,
}

impl CellVit {
    /// Builds a model from weights carrying their own `config.*` tensors.
    pub fn from_weights(weights: Weights) -> Result<Self> {
        let cfg = weights.config()?;
        Self::new(cfg, weights)
    }

    pub fn new(cfg: ModelConfig, mut weights: Weights) -> Result<Self> {
        cfg.validate()?;
        weights.check_against(&cfg)?;
        weights.set_config(&cfg);
        Ok(Self { cfg, weights })
    }

    pub fn random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let w = Weights::init(&cfg, seed)?;
        Self::new(cfg, w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    fn w(&self, name: &str) -> &TensorF32 {
        // check_against guaranteed presence at construction
        self.weights.get(name).expect("validated parameter")
    }

    /// Projects flattened tokens, prepends the class token and adds the
    /// (possibly resized) positional table.
    pub fn embed(&self, tokens: &TensorF32, grid: (usize, usize)) -> Result<TokenSequence> {
        let cfg = &self.cfg;
        let d = cfg.embed_dim;
        let tok_len = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        let n = grid.0 * grid.1;
        tokens.ensure_shape(&[n, tok_len], "flattened tokens")?;

        let proj = nn::linear(
            tokens.data(),
            n,
            self.w("patch_embed.weight"),
            self.w("patch_embed.bias"),
        );
        let pos = self.w("pos_embed").data();
        let g = cfg.trained_pos_grid;
        let spatial = interpolate_pos_grid(&pos[d..], g, d, grid.0, grid.1);

        let mut out = Vec::with_capacity((n + 1) * d);
        for (c, p) in self.w("cls_token").data().iter().zip(&pos[..d]) {
            out.push(c + p);
        }
        for (x, p) in proj.iter().zip(&spatial) {
            out.push(x + p);
        }
        Ok(TokenSequence {
            tokens: TensorF32::new(&[n + 1, d], out)?,
            grid,
        })
    }

    fn attention(&self, x: &[f32], rows: usize, block: &str) -> Vec<f32> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let hd = d / heads;
        let qkv = nn::linear(
            x,
            rows,
            self.w(&format!("{block}.attn.qkv.weight")),
            self.w(&format!("{block}.attn.qkv.bias")),
        );
        let scale = 1.0 / (hd as f32).sqrt();
        let mut q = vec![0.0f32; rows * hd];
        let mut k = vec![0.0f32; rows * hd];
        let mut v = vec![0.0f32; rows * hd];
        let mut scores = vec![0.0f32; rows * rows];
        let mut head_out = vec![0.0f32; rows * hd];
        let mut merged = vec![0.0f32; rows * d];
        for h in 0..heads {
            for r in 0..rows {
                let src = &qkv[r * 3 * d..][..3 * d];
                for j in 0..hd {
                    q[r * hd + j] = src[h * hd + j] * scale;
                    k[r * hd + j] = src[d + h * hd + j];
                    v[r * hd + j] = src[2 * d + h * hd + j];
                }
            }
            nn::gemm_bt(&q, &k, &mut scores, rows, hd, rows);
            nn::softmax_rows_inplace(&mut scores, rows);
            nn::gemm(&scores, &v, &mut head_out, rows, rows, hd);
            for r in 0..rows {
                merged[r * d + h * hd..][..hd].copy_from_slice(&head_out[r * hd..][..hd]);
            }
        }
        nn::linear(
            &merged,
            rows,
            self.w(&format!("{block}.attn.proj.weight")),
            self.w(&format!("{block}.attn.proj.bias")),
        )
    }

    fn block(&self, z: &[f32], rows: usize, i: usize) -> Vec<f32> {
        let d = self.cfg.embed_dim;
        let b = format!("blocks.{i}");
        let n1 = nn::layer_norm(
            z,
            d,
            self.w(&format!("{b}.norm1.weight")).data(),
            self.w(&format!("{b}.norm1.bias")).data(),
        );
        let mut mid = self.attention(&n1, rows, &b);
        for (m, x) in mid.iter_mut().zip(z) {
            *m += x;
        }
        let n2 = nn::layer_norm(
            &mid,
            d,
            self.w(&format!("{b}.norm2.weight")).data(),
            self.w(&format!("{b}.norm2.bias")).data(),
        );
        let mut hidden = nn::linear(
            &n2,
            rows,
            self.w(&format!("{b}.mlp.fc1.weight")),
            self.w(&format!("{b}.mlp.fc1.bias")),
        );
        nn::gelu_inplace(&mut hidden);
        let mut out = nn::linear(
            &hidden,
            rows,
            self.w(&format!("{b}.mlp.fc2.weight")),
            self.w(&format!("{b}.mlp.fc2.bias")),
        );
        for (o, m) in out.iter_mut().zip(&mid) {
            *o += m;
        }
        out
    }

    /// Runs all transformer blocks, capturing the skip levels.
    pub fn encode(&self, seq: &TokenSequence) -> Result<(TokenSequence, SkipFeatures)> {
        let cfg = &self.cfg;
        let d = cfg.embed_dim;
        let n = seq.grid.0 * seq.grid.1;
        seq.tokens.ensure_shape(&[n + 1, d], "token sequence")?;

        let depths = cfg.skip_depths();
        let mut levels: Vec<TensorF32> = Vec::with_capacity(4);
        let mut z = seq.tokens.data().to_vec();
        for i in 0..cfg.depth {
            z = self.block(&z, n + 1, i);
            if depths.contains(&(i + 1)) {
                levels.push(TensorF32::new(&[seq.grid.0, seq.grid.1, d], z[d..].to_vec())?);
            }
        }
        let levels: [TensorF32; 4] = levels
            .try_into()
            .map_err(|_| Error::DepthNotDivisibleBy4(cfg.depth))?;
        let final_seq = TokenSequence {
            tokens: TensorF32::new(&[n + 1, d], z)?,
            grid: seq.grid,
        };
        Ok((final_seq, SkipFeatures { levels, depths }))
    }

    fn deconv_relu(&self, x: &TensorF32, prefix: &str) -> Result<TensorF32> {
        let mut y = nn::deconv2x2(
            x,
            self.w(&format!("{prefix}.weight")),
            self.w(&format!("{prefix}.bias")),
        )?;
        nn::relu_inplace(y.data_mut());
        Ok(y)
    }

    fn conv_relu(&self, x: &TensorF32, prefix: &str) -> Result<TensorF32> {
        let mut y = nn::conv3x3(
            x,
            self.w(&format!("{prefix}.weight")),
            self.w(&format!("{prefix}.bias")),
        )?;
        nn::relu_inplace(y.data_mut());
        Ok(y)
    }

    /// Runs one isolated upsampling decoder over the shared skip inputs and
    /// returns the raw `(H, W, out)` head output.
    fn decode_branch(
        &self,
        name: &str,
        bottleneck: &TensorF32,
        skips: &[(usize, TensorF32)],
        stem: &TensorF32,
    ) -> Result<TensorF32> {
        let stages = self.cfg.decoder_stages();
        let b = format!("decoder.{name}");
        let mut cur = self.deconv_relu(bottleneck, &format!("{b}.bottleneck"))?;
        for s in 0..stages {
            for (_, skip) in skips.iter().filter(|(at, _)| *at == s) {
                cur = nn::concat_channels(&cur, skip)?;
            }
            if s == stages - 1 {
                cur = nn::concat_channels(&cur, stem)?;
            }
            cur = self.conv_relu(&cur, &format!("{b}.stage{s}.conv"))?;
            if s + 1 < stages {
                cur = self.deconv_relu(&cur, &format!("{b}.stage{s}.up"))?;
            }
        }
        nn::conv1x1(
            &cur,
            self.w(&format!("{b}.head.weight")),
            self.w(&format!("{b}.head.bias")),
        )
    }

    /// Decoders and tissue head. `final_seq` supplies the class token and the
    /// final token embeddings; `image` feeds the stem skip.
    pub fn decode(
        &self,
        skips: &SkipFeatures,
        final_seq: &TokenSequence,
        image: &TensorF32,
    ) -> Result<PredictionBundle> {
        let cfg = &self.cfg;
        let (h, w, c) = image.hwc()?;
        let p = cfg.patch_size;
        if c != cfg.in_channels {
            return Err(Error::shape(format!(
                "image has {c} channels, model expects {}",
                cfg.in_channels
            )));
        }
        let grid = (h / p, w / p);
        if grid != final_seq.grid || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} does not match token grid {:?}",
                final_seq.grid
            )));
        }
        for lvl in &skips.levels {
            lvl.ensure_shape(&[grid.0, grid.1, cfg.embed_dim], "skip level")?;
        }

        let stem = self.conv_relu(image, "decoder.stem.conv0")?;
        let stem = self.conv_relu(&stem, "decoder.stem.conv1")?;

        // levels[2] is 3L/4 (skip 1), levels[1] is 2L/4, levels[0] is L/4.
        let mut shared = Vec::with_capacity(3);
        for k in 1..=3 {
            let mut x = skips.levels[3 - k].clone();
            for j in 0..=skip_stage(cfg, k) {
                x = self.deconv_relu(&x, &format!("decoder.skip{k}.up{j}"))?;
            }
            shared.push((skip_stage(cfg, k), x));
        }

        let bottleneck = &skips.levels[3];
        let mut np_map = None;
        let mut hv_map = None;
        let mut nt_map = None;
        let mut rays = None;
        for (name, out_ch) in branch_names(cfg) {
            let mut y = self.decode_branch(name, bottleneck, &shared, &stem)?;
            match name {
                "np" | "nt" => {
                    nn::softmax_rows_inplace(y.data_mut(), out_ch);
                    if name == "np" {
                        np_map = Some(y);
                    } else {
                        nt_map = Some(y);
                    }
                }
                "hv" => {
                    for v in y.data_mut() {
                        *v = v.clamp(-1.0, 1.0);
                    }
                    hv_map = Some(y);
                }
                _ => {
                    let k = out_ch - 1;
                    let mut prob = y.channel(0);
                    nn::sigmoid_inplace(&mut prob);
                    let mut dist = Vec::with_capacity(h * w * k);
                    for px in y.data().chunks_exact(out_ch) {
                        dist.extend(px[1..].iter().map(|v| v.max(0.0)));
                    }
                    rays = Some(RayMaps {
                        prob: TensorF32::new(&[h, w, 1], prob)?,
                        dist: TensorF32::new(&[h, w, k], dist)?,
                        refined: None,
                    });
                }
            }
        }

        let cls = final_seq.class_token();
        let tissue_logits = nn::linear(
            cls,
            1,
            self.w("tissue_head.weight"),
            self.w("tissue_head.bias"),
        );

        Ok(PredictionBundle {
            np_map: np_map.expect("np branch"),
            hv_map: hv_map.expect("hv branch"),
            nt_map: nt_map.expect("nt branch"),
            tissue_logits,
            tokens_final: final_seq.patch_tokens(),
            token_grid: grid,
            patch_size: p,
            rays,
        })
    }

    /// `patchify -> embed -> encode -> decode`.
    pub fn forward(&self, image: &TensorF32) -> Result<PredictionBundle> {
        let p = self.cfg.patch_size;
        let tokens = patchify(image, p)?;
        let (h, w, _) = image.hwc()?;
        let seq = self.embed(&tokens, (h / p, w / p))?;
        let (final_seq, skips) = self.encode(&seq)?;
        self.decode(&skips, &final_seq, image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_identity_for_unit_patches() {
        let img = TensorF32::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = patchify(&img, 1).unwrap();
        assert_eq!(t.shape(), &[4, 1]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patchify_token_counts() {
        let img = TensorF32::zeros(&[32, 32, 3]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[4, 768]);
        let img = TensorF32::zeros(&[256, 256, 3]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[256, 768]);
    }

    #[test]
    fn patchify_rejects_ragged_input() {
        let img = TensorF32::zeros(&[30, 32, 3]);
        assert!(matches!(
            patchify(&img, 16),
            Err(Error::NonDivisibleInput { height: 30, .. })
        ));
    }

    #[test]
    fn patchify_raster_order() {
        // 4x4 single-channel image, P = 2: token 1 is the top-right patch.
        let img = TensorF32::from_fn(&[4, 4, 1], |i| i as f32);
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(t.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn same_size_interpolation_is_bit_identical() {
        let table: Vec<f32> = (0..16 * 16 * 3).map(|i| (i as f32 * 0.37).sin()).collect();
        let out = interpolate_pos_grid(&table, 16, 3, 16, 16);
        assert_eq!(out, table);
    }
}

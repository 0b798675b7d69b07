//! Seeded synthetic nucleus scenes with ideal prediction maps.
//!
//! A [`Layout`] places elliptical nuclei in slide coordinates. Every pixel is
//! owned by the nucleus with the smallest normalised elliptical distance, so
//! any window of the slide renders the same labels, HV targets and ray
//! distances regardless of where the window starts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{PredictionBundle, RayMaps};
use crate::postproc::InstanceMap;
use crate::tensor::TensorF32;

const BUCKET: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthNucleus {
    pub center: [f64; 2],
    /// semi-axes along the rotated row and column directions
    pub axes: [f64; 2],
    pub angle: f64,
    pub class: u32,
}

impl SynthNucleus {
    fn norm_dist(&self, r: f64, c: f64) -> f64 {
        let (dr, dc) = (r - self.center[0], c - self.center[1]);
        let (s, co) = self.angle.sin_cos();
        let u = dr * co + dc * s;
        let v = -dr * s + dc * co;
        ((u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2)).sqrt()
    }

    fn reach(&self) -> f64 {
        self.axes[0].max(self.axes[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutParams {
    pub radius: (f64, f64),
    /// maximum axis ratio of the ellipses
    pub elongation: f64,
    /// chance that a new nucleus is placed touching an existing one
    pub touching: f64,
    /// nucleus classes are drawn from 1..=num_classes
    pub num_classes: u32,
    /// nuclei smaller than this after ownership is resolved are dropped
    pub min_area: usize,
    /// centers keep at least this distance from the canvas border
    pub margin: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self { radius: (5.0, 9.0), elongation: 1.4, touching: 0.3, num_classes: 5, min_area: 30, margin: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Stats {
    area: usize,
    centroid: [f64; 2],
    /// min and max of (row - cr, col - cc) over owned pixels
    lo: [f64; 2],
    hi: [f64; 2],
}

/// Nuclei on a `height` x `width` canvas.
#[derive(Debug, Clone)]
pub struct Layout {
    pub height: usize,
    pub width: usize,
    pub nuclei: Vec<SynthNucleus>,
    /// indices of nuclei whose partner was placed touching them
    pub touching_pairs: Vec<(usize, usize)>,
    buckets: Vec<Vec<u32>>,
    bw: usize,
    stats: Vec<Stats>,
}

impl Layout {
    pub fn new(height: usize, width: usize, nuclei: Vec<SynthNucleus>) -> Self {
        let bw = width.div_ceil(BUCKET);
        let bh = height.div_ceil(BUCKET);
        let mut l = Self {
            height,
            width,
            nuclei,
            touching_pairs: Vec::new(),
            buckets: vec![Vec::new(); bw * bh],
            bw,
            stats: Vec::new(),
        };
        l.index();
        l
    }

    fn index(&mut self) {
        for b in &mut self.buckets {
            b.clear();
        }
        let bh = self.height.div_ceil(BUCKET);
        for (i, n) in self.nuclei.iter().enumerate() {
            let reach = n.reach() + 1.0;
            let r0 = ((n.center[0] - reach).max(0.0) as usize / BUCKET).min(bh - 1);
            let r1 = ((n.center[0] + reach).max(0.0) as usize / BUCKET).min(bh - 1);
            let c0 = ((n.center[1] - reach).max(0.0) as usize / BUCKET).min(self.bw - 1);
            let c1 = ((n.center[1] + reach).max(0.0) as usize / BUCKET).min(self.bw - 1);
            for br in r0..=r1 {
                for bc in c0..=c1 {
                    self.buckets[br * self.bw + bc].push(i as u32);
                }
            }
        }
        self.stats = self.compute_stats();
    }

    /// Index of the nucleus owning pixel (r, c), if any.
    pub fn owner(&self, r: usize, c: usize) -> Option<usize> {
        if r >= self.height || c >= self.width {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        for &i in &self.buckets[(r / BUCKET) * self.bw + c / BUCKET] {
            let d = self.nuclei[i as usize].norm_dist(r as f64, c as f64);
            if d <= 1.0 && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i as usize));
            }
        }
        best.map(|b| b.1)
    }

    fn bbox_of(&self, n: &SynthNucleus) -> (usize, usize, usize, usize) {
        let reach = n.reach() + 1.0;
        let r0 = (n.center[0] - reach).floor().max(0.0) as usize;
        let c0 = (n.center[1] - reach).floor().max(0.0) as usize;
        let r1 = ((n.center[0] + reach).ceil().max(0.0) as usize).min(self.height - 1);
        let c1 = ((n.center[1] + reach).ceil().max(0.0) as usize).min(self.width - 1);
        (r0, c0, r1, c1)
    }

    fn compute_stats(&self) -> Vec<Stats> {
        let mut out = Vec::with_capacity(self.nuclei.len());
        for (i, n) in self.nuclei.iter().enumerate() {
            let (r0, c0, r1, c1) = self.bbox_of(n);
            let mut px = Vec::new();
            for r in r0..=r1.max(r0) {
                for c in c0..=c1.max(c0) {
                    if self.owner(r, c) == Some(i) {
                        px.push((r as f64, c as f64));
                    }
                }
            }
            let mut s = Stats { area: px.len(), ..Default::default() };
            if !px.is_empty() {
                let k = px.len() as f64;
                s.centroid = [px.iter().map(|p| p.0).sum::<f64>() / k, px.iter().map(|p| p.1).sum::<f64>() / k];
                s.lo = [f64::INFINITY; 2];
                s.hi = [f64::NEG_INFINITY; 2];
                for p in &px {
                    let d = [p.0 - s.centroid[0], p.1 - s.centroid[1]];
                    for a in 0..2 {
                        s.lo[a] = s.lo[a].min(d[a]);
                        s.hi[a] = s.hi[a].max(d[a]);
                    }
                }
            }
            out.push(s);
        }
        out
    }

    /// Random layout with about `count` nuclei. Deterministic per seed.
    pub fn random(height: usize, width: usize, count: usize, params: &LayoutParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nuclei: Vec<SynthNucleus> = Vec::new();
        let mut partner: Vec<Option<usize>> = Vec::new();
        let bw = width.div_ceil(BUCKET);
        let bh = height.div_ceil(BUCKET);
        let mut grid: Vec<Vec<usize>> = vec![Vec::new(); bw * bh];
        let cell = |p: [f64; 2]| {
            let br = (p[0].max(0.0) as usize / BUCKET).min(bh - 1);
            let bc = (p[1].max(0.0) as usize / BUCKET).min(bw - 1);
            (br, bc)
        };
        let mut attempts = 0;
        while nuclei.len() < count && attempts < count * 200 {
            attempts += 1;
            let a = rng.random_range(params.radius.0..=params.radius.1);
            let b = a * rng.random_range(1.0..=params.elongation.max(1.0));
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let class = rng.random_range(1..=params.num_classes.max(1));
            let mut touch = None;
            let center = if !nuclei.is_empty() && rng.random_bool(params.touching.clamp(0.0, 1.0)) {
                let j = rng.random_range(0..nuclei.len());
                if partner[j].is_some() {
                    continue;
                }
                let other = nuclei[j];
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                let d = (a + other.axes[0]) * rng.random_range(0.8..0.92);
                touch = Some(j);
                [other.center[0] + d * t.sin(), other.center[1] + d * t.cos()]
            } else {
                let m = params.margin;
                [rng.random_range(m..height as f64 - m), rng.random_range(m..width as f64 - m)]
            };
            let m = params.margin;
            if center[0] < m || center[1] < m || center[0] >= height as f64 - m || center[1] >= width as f64 - m {
                continue;
            }
            let new = SynthNucleus { center, axes: [a, b], angle, class };
            let (br, bc) = cell(center);
            let span = (2.0 * (params.radius.1 * params.elongation.max(1.0)) as f64 / BUCKET as f64).ceil() as usize + 1;
            let mut ok = true;
            'scan: for rr in br.saturating_sub(span)..=(br + span).min(bh - 1) {
                for cc in bc.saturating_sub(span)..=(bc + span).min(bw - 1) {
                    for &k in &grid[rr * bw + cc] {
                        let o = &nuclei[k];
                        let d = ((o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2)).sqrt();
                        let limit = if Some(k) == touch {
                            // partner: centers must stay apart so both keep a body
                            0.75 * (a.min(o.axes[0]) + new.reach().min(o.reach()))
                        } else {
                            new.reach() + o.reach() + 2.0
                        };
                        if d < limit {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
            if !ok {
                continue;
            }
            let idx = nuclei.len();
            grid[br * bw + bc].push(idx);
            nuclei.push(new);
            partner.push(touch);
            if let Some(j) = touch {
                partner[j] = Some(idx);
            }
        }
        let mut layout = Self::new(height, width, nuclei);
        // drop nuclei left too small, then pair up the survivors
        let keep: Vec<bool> = layout.stats.iter().map(|s| s.area >= params.min_area).collect();
        if keep.iter().any(|k| !k) {
            let nuclei = layout.nuclei.iter().zip(&keep).filter(|(_, &k)| k).map(|(n, _)| *n).collect();
            layout = Self::new(height, width, nuclei);
        }
        let mut new_index = vec![usize::MAX; keep.len()];
        let mut next = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                new_index[i] = next;
                next += 1;
            }
        }
        for (i, p) in partner.iter().enumerate() {
            if let Some(j) = *p {
                if i < j && keep[i] && keep[j] {
                    layout.touching_pairs.push((new_index[i], new_index[j]));
                }
            }
        }
        layout
    }

    pub fn area_of(&self, i: usize) -> usize {
        self.stats[i].area
    }

    pub fn centroid_of(&self, i: usize) -> [f64; 2] {
        self.stats[i].centroid
    }

    /// Owner index + 1 for every pixel of the window, 0 for background.
    pub fn owner_window(&self, origin: (usize, usize), h: usize, w: usize) -> Vec<u32> {
        let mut out = vec![0u32; h * w];
        for r in 0..h {
            for c in 0..w {
                if let Some(i) = self.owner(origin.0 + r, origin.1 + c) {
                    out[r * w + c] = i as u32 + 1;
                }
            }
        }
        out
    }

    /// Ground-truth instance map of the window, ids renumbered in raster
    /// order of first appearance.
    pub fn gt_window(&self, origin: (usize, usize), h: usize, w: usize) -> InstanceMap {
        let owners = self.owner_window(origin, h, w);
        let classes: BTreeMap<u32, u32> =
            self.nuclei.iter().enumerate().map(|(i, n)| (i as u32 + 1, n.class)).collect();
        InstanceMap::from_raw(owners, h, w, &classes).expect("window size")
    }

    /// Ground truth of the whole canvas.
    pub fn gt(&self) -> InstanceMap {
        self.gt_window((0, 0), self.height, self.width)
    }

    /// Distance from (r, c) to the edge of its owning nucleus along the ray
    /// at angle `t`, by half-pixel marching on the ownership map.
    fn ray_length(&self, r: usize, c: usize, owner: usize, t: f64) -> f32 {
        let (dr, dc) = (t.cos(), t.sin());
        let mut s = 0.5;
        loop {
            let rr = (r as f64 + s * dr).round();
            let cc = (c as f64 + s * dc).round();
            if rr < 0.0 || cc < 0.0 || self.owner(rr as usize, cc as usize) != Some(owner) {
                return (s - 0.5) as f32;
            }
            s += 0.5;
        }
    }

    /// Ideal predictions for a window: one-hot NP/NT, centroid-offset HV
    /// maps scaled per nucleus to [-1, 1], and optional star rays.
    pub fn ideal_bundle(&self, origin: (usize, usize), h: usize, w: usize, opts: &BundleOptions) -> PredictionBundle {
        let owners = self.owner_window(origin, h, w);
        let nc = opts.nuclei_classes.max(2);
        let mut np = vec![0f32; h * w * 2];
        let mut hv = vec![0f32; h * w * 2];
        let mut nt = vec![0f32; h * w * nc];
        let k = opts.rays;
        let mut prob = vec![0f32; if k > 0 { h * w } else { 0 }];
        let mut dist = vec![0f32; h * w * k];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if owners[i] == 0 {
                    np[i * 2] = 1.0;
                    nt[i * nc] = 1.0;
                    continue;
                }
                let o = owners[i] as usize - 1;
                np[i * 2 + 1] = 1.0;
                let cls = (self.nuclei[o].class as usize).min(nc - 1);
                nt[i * nc + cls] = 1.0;
                let s = &self.stats[o];
                let (gr, gc) = ((origin.0 + r) as f64, (origin.1 + c) as f64);
                let off = [gr - s.centroid[0], gc - s.centroid[1]];
                // channel 0 follows columns, channel 1 follows rows
                for (ch, a) in [(0usize, 1usize), (1, 0)] {
                    let d = off[a];
                    hv[i * 2 + ch] = if d < 0.0 && s.lo[a] < 0.0 {
                        (d / -s.lo[a]) as f32
                    } else if d > 0.0 && s.hi[a] > 0.0 {
                        (d / s.hi[a]) as f32
                    } else {
                        0.0
                    };
                }
                if k > 0 {
                    let n = &self.nuclei[o];
                    prob[i] = (1.0 - n.norm_dist(gr, gc)).clamp(0.0, 1.0) as f32;
                    for j in 0..k {
                        let t = std::f64::consts::TAU * j as f64 / k as f64;
                        dist[i * k + j] = self.ray_length(origin.0 + r, origin.1 + c, o, t);
                    }
                }
            }
        }
        let patch = opts.patch_size.max(1);
        let grid = (h.div_ceil(patch), w.div_ceil(patch));
        let tokens = token_features(&np, h, w, patch, grid, origin);
        let rays = (k > 0).then(|| {
            let dist_t = TensorF32::new(&[h, w, k], dist.clone()).expect("ray shape");
            let noisy: Vec<f32> = dist.iter().map(|d| d * opts.raw_ray_scale).collect();
            RayMaps {
                prob: TensorF32::new(&[h, w, 1], prob).expect("prob shape"),
                dist: TensorF32::new(&[h, w, k], noisy).expect("ray shape"),
                refined: Some(dist_t),
            }
        });
        PredictionBundle {
            np_map: TensorF32::new(&[h, w, 2], np).expect("np shape"),
            hv_map: TensorF32::new(&[h, w, 2], hv).expect("hv shape"),
            nt_map: TensorF32::new(&[h, w, nc], nt).expect("nt shape"),
            tissue_logits: vec![0.0; opts.tissue_classes.max(1)],
            tokens_final: tokens,
            token_grid: grid,
            patch_size: patch,
            rays,
        }
    }

    /// H&E-like RGB window in [0, 1]: pink stroma, purple nuclei darker at
    /// the center, per-pixel noise keyed by slide position.
    pub fn image_window(&self, origin: (usize, usize), h: usize, w: usize, seed: u64) -> TensorF32 {
        let mut data = vec![0f32; h * w * 3];
        for r in 0..h {
            for c in 0..w {
                let (gr, gc) = (origin.0 + r, origin.1 + c);
                let base = match self.owner(gr, gc) {
                    Some(o) => {
                        let d = self.nuclei[o].norm_dist(gr as f64, gc as f64) as f32;
                        let shade = 0.75 + 0.25 * d;
                        [0.36 * shade, 0.18 * shade, 0.52 * shade]
                    }
                    None => [0.93, 0.78, 0.86],
                };
                for ch in 0..3 {
                    let n = unit_hash(seed, gr as u64, gc as u64, ch as u64) as f32 - 0.5;
                    data[(r * w + c) * 3 + ch] = (base[ch] + 0.06 * n).clamp(0.0, 1.0);
                }
            }
        }
        TensorF32::new(&[h, w, 3], data).expect("image shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleOptions {
    /// channels of the NT map, background included
    pub nuclei_classes: usize,
    pub tissue_classes: usize,
    pub patch_size: usize,
    /// star rays per pixel; 0 disables ray maps
    pub rays: usize,
    /// raw ray maps are the exact distances times this factor; the refined
    /// maps are exact
    pub raw_ray_scale: f32,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self { nuclei_classes: 6, tissue_classes: 19, patch_size: 16, rays: 0, raw_ray_scale: 0.9 }
    }
}

/// Small per-token descriptor: foreground fraction and the token's slide
/// position, so different tokens have different vectors.
fn token_features(np: &[f32], h: usize, w: usize, p: usize, grid: (usize, usize), origin: (usize, usize)) -> TensorF32 {
    const D: usize = 4;
    let mut out = vec![0f32; grid.0 * grid.1 * D];
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let mut fg = 0.0;
            let mut n = 0.0;
            for r in gy * p..((gy + 1) * p).min(h) {
                for c in gx * p..((gx + 1) * p).min(w) {
                    fg += np[(r * w + c) * 2 + 1];
                    n += 1.0;
                }
            }
            let t = &mut out[(gy * grid.1 + gx) * D..][..D];
            t[0] = fg / n;
            t[1] = ((origin.0 + gy * p) as f32) / 1024.0;
            t[2] = ((origin.1 + gx * p) as f32) / 1024.0;
            t[3] = 1.0;
        }
    }
    TensorF32::new(&[grid.0 * grid.1, D], out).expect("token shape")
}

/// Deterministic value in [0, 1) from a seed and three coordinates.
pub fn unit_hash(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Small scene for watershed and NMS fixtures: `count` nuclei on a canvas,
/// with at least one touching pair when `touching` is set.
pub fn fixture_scene(size: usize, count: usize, touching: bool, seed: u64) -> Result<Layout> {
    let params = LayoutParams {
        radius: (6.0, 9.0),
        elongation: 1.3,
        touching: if touching { 0.6 } else { 0.0 },
        min_area: 40,
        margin: 9.0 * 1.3 + 1.0,
        ..Default::default()
    };
    for attempt in 0..64u64 {
        let l = Layout::random(size, size, count, &params, seed.wrapping_mul(131).wrapping_add(attempt));
        let complete = l.nuclei.len() == count;
        let interior = l.nuclei.iter().all(|n| {
            let m = n.reach() + 1.0;
            n.center[0] >= m && n.center[1] >= m && n.center[0] + m < size as f64 && n.center[1] + m < size as f64
        });
        if complete && interior && (!touching || !l.touching_pairs.is_empty()) {
            return Ok(l);
        }
    }
    Err(Error::InvalidConfig(format!("could not place {count} nuclei on a {size}px canvas")))
}

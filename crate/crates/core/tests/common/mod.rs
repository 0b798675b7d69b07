#![allow(dead_code)]

use std::collections::BTreeMap;

use cellvit::postproc::InstanceMap;
use cellvit::TensorF32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random per-pixel probability vectors over the last axis, strictly inside (0, 1).
pub fn random_simplex(rng: &mut ChaCha8Rng, pixels: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels * classes);
    for _ in 0..pixels {
        let v: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        out.extend(v.iter().map(|x| x / s));
    }
    out
}

pub fn random_onehot(rng: &mut ChaCha8Rng, pixels: usize, classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels * classes];
    for p in 0..pixels {
        out[p * classes + rng.random_range(0..classes)] = 1.0;
    }
    out
}

pub fn tensor(shape: &[usize], v: &[f64]) -> TensorF32 {
    TensorF32::new(shape, v.iter().map(|&x| x as f32).collect()).unwrap()
}

pub fn f64s(t: &TensorF32) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

/// Random instance map of axis-aligned rectangles and discs painted in
/// order, later shapes overwriting earlier ones.
pub fn random_instance_map(rng: &mut ChaCha8Rng, h: usize, w: usize, max_inst: usize, classes: u32) -> InstanceMap {
    let n = rng.random_range(0..=max_inst);
    let mut labels = vec![0u32; h * w];
    let mut cls = BTreeMap::new();
    for id in 1..=n as u32 {
        let r0 = rng.random_range(0..h) as isize;
        let c0 = rng.random_range(0..w) as isize;
        let rad = rng.random_range(2..10) as isize;
        let disc = rng.random_bool(0.5);
        for r in (r0 - rad).max(0)..(r0 + rad).min(h as isize) {
            for c in (c0 - rad).max(0)..(c0 + rad).min(w as isize) {
                if !disc || (r - r0).pow(2) + (c - c0).pow(2) <= rad * rad {
                    labels[r as usize * w + c as usize] = id;
                }
            }
        }
        cls.insert(id, rng.random_range(1..=classes));
    }
    // drop classes of ids that were completely overwritten
    let present: std::collections::BTreeSet<u32> = labels.iter().copied().filter(|&l| l > 0).collect();
    cls.retain(|k, _| present.contains(k));
    InstanceMap::from_raw(labels, h, w, &cls).unwrap()
}

/// Instance id -> pixel set, straight from the label image.
pub fn pixel_sets(m: &InstanceMap) -> BTreeMap<u32, std::collections::BTreeSet<usize>> {
    let mut out: BTreeMap<u32, std::collections::BTreeSet<usize>> = BTreeMap::new();
    for (i, &l) in m.labels.iter().enumerate() {
        if l > 0 {
            out.entry(l).or_default().insert(i);
        }
    }
    out
}

/// Pixel-center point-in-polygon test for a star polygon, boundary inclusive,
/// plus the center pixel. Written against the vertex list directly.
pub fn star_mask_oracle(center: [usize; 2], radii: &[f32], h: usize, w: usize) -> Vec<bool> {
    let k = radii.len();
    let verts: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            (center[0] as f64 + radii[i] as f64 * t.cos(), center[1] as f64 + radii[i] as f64 * t.sin())
        })
        .collect();
    let mut mask = vec![false; h * w];
    for r in 0..h {
        let y = r as f64;
        let xs: Vec<f64> = (0..k)
            .filter_map(|i| {
                let (a, b) = (verts[i], verts[(i + 1) % k]);
                ((a.0 <= y) != (b.0 <= y)).then(|| a.1 + (y - a.0) * (b.1 - a.1) / (b.0 - a.0))
            })
            .collect();
        for c in 0..w {
            let x = c as f64;
            let left = xs.iter().filter(|&&v| v < x).count();
            mask[r * w + c] = left % 2 == 1 || xs.contains(&x);
        }
    }
    if center[0] < h && center[1] < w {
        mask[center[0] * w + center[1]] = true;
    }
    mask
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Exhaustive suppression: among all 2^n subsets, the kept set is the one
/// where a candidate is in exactly when no kept candidate of higher priority
/// overlaps it above `thresh`. Returns the painted label image.
pub fn nms_oracle(centers: &[[usize; 2]], probs: &[f32], radii: &[Vec<f32>], h: usize, w: usize, prob_thresh: f32, thresh: f64) -> Vec<u32> {
    let n = centers.len();
    let masks: Vec<Vec<bool>> = (0..n).map(|i| star_mask_oracle(centers[i], &radii[i], h, w)).collect();
    let mut prio: Vec<usize> = (0..n).filter(|&i| probs[i] >= prob_thresh).collect();
    prio.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let rank: Vec<Option<usize>> = (0..n).map(|i| prio.iter().position(|&j| j == i)).collect();
    let mut found = Vec::new();
    for s in 0u32..(1 << n) {
        let inside = |i: usize| s >> i & 1 == 1;
        let consistent = (0..n).all(|i| match rank[i] {
            None => !inside(i),
            Some(ri) => {
                let blocked = (0..n).any(|j| inside(j) && rank[j].is_some_and(|rj| rj < ri) && mask_iou(&masks[i], &masks[j]) > thresh);
                inside(i) == !blocked
            }
        });
        if consistent {
            found.push(s);
        }
    }
    assert_eq!(found.len(), 1, "suppression fixed point is unique");
    let kept: Vec<usize> = prio.iter().copied().filter(|&i| found[0] >> i & 1 == 1).collect();
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    for i in kept {
        let mut painted = false;
        for (px, &m) in labels.iter_mut().zip(&masks[i]) {
            if m && *px == 0 {
                *px = next + 1;
                painted = true;
            }
        }
        if painted {
            next += 1;
        }
    }
    labels
}

/// Random clustered candidate set of `n` star polygons on an `h` x `w` grid.
pub fn random_candidates(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> (Vec<[usize; 2]>, Vec<f32>, Vec<Vec<f32>>) {
    let hub = [rng.random_range(10..h - 10), rng.random_range(10..w - 10)];
    let mut centers = Vec::new();
    let mut probs = Vec::new();
    let mut radii = Vec::new();
    for _ in 0..n {
        let r = (hub[0] as i64 + rng.random_range(-12..=12)).clamp(0, h as i64 - 1) as usize;
        let c = (hub[1] as i64 + rng.random_range(-12..=12)).clamp(0, w as i64 - 1) as usize;
        centers.push([r, c]);
        probs.push(rng.random_range(0.3..1.0f32));
        let base: f32 = rng.random_range(2.0..9.0);
        radii.push((0..k).map(|_| (base + rng.random_range(-1.5..1.5f32)).max(0.0)).collect());
    }
    (centers, probs, radii)
}

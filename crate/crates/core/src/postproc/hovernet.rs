//! Marker-controlled watershed on HV-map gradients.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use super::{connected_components, majority_vote_types, neighbors4, remove_small, InstanceMap};
use crate::error::{Error, Result};
use crate::losses::sobel_f64;
use crate::model::PredictionBundle;
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HovernetParams {
    /// foreground threshold on the nucleus channel of the NP map
    pub tau_np: f32,
    /// edge strength at or above which a pixel cannot be a marker
    pub tau_e: f64,
    pub min_marker_px: usize,
    pub min_instance_px: usize,
    /// class assigned when an instance gets no non-background votes
    pub unknown_class: u32,
}

impl Default for HovernetParams {
    fn default() -> Self {
        Self { tau_np: 0.5, tau_e: 0.4, min_marker_px: 10, min_instance_px: 10, unknown_class: 0 }
    }
}

fn min_max_flip(x: &mut [f64]) {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in x.iter_mut() {
        // a flat map carries no gradient, hence no edges
        *v = if range > 1e-12 { 1.0 - (*v - lo) / range } else { 0.0 };
    }
}

/// Per-pixel edge strength in [0, 1] from the HV map: the Sobel derivative
/// of the horizontal map along columns and of the vertical map along rows,
/// each min-max normalised over the tile and flipped so the steepest
/// descent (a boundary between two nuclei) maps to 1.
pub fn edge_map(hv_map: &TensorF32) -> Result<Vec<f64>> {
    let (h, w, c) = hv_map.hwc()?;
    if c != 2 {
        return Err(Error::shape(format!("hv map needs 2 channels, got {c}")));
    }
    let hv: Vec<f64> = hv_map.data().iter().map(|&v| v as f64).collect();
    let mut sx = sobel_f64(&hv, h, w, 0, true);
    let mut sy = sobel_f64(&hv, h, w, 1, false);
    min_max_flip(&mut sx);
    min_max_flip(&mut sy);
    Ok(sx.iter().zip(&sy).map(|(a, b)| a.max(*b)).collect())
}

#[derive(PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Priority-flood watershed. Pixels are claimed in ascending `elevation`,
/// FIFO among equal elevations; only pixels with `allowed` set are flooded.
fn watershed(elevation: &[f64], markers: &mut [u32], allowed: &[bool], h: usize, w: usize) {
    let mut heap = BinaryHeap::new();
    let mut tick = 0u64;
    for i in 0..h * w {
        if markers[i] != 0 {
            heap.push(Reverse((Key(elevation[i]), tick, i)));
            tick += 1;
        }
    }
    while let Some(Reverse((_, _, p))) = heap.pop() {
        let l = markers[p];
        for q in neighbors4(p, h, w) {
            if allowed[q] && markers[q] == 0 {
                markers[q] = l;
                heap.push(Reverse((Key(elevation[q]), tick, q)));
                tick += 1;
            }
        }
    }
}

/// Separates touching nuclei using the NP foreground and HV gradients, then
/// types each instance by majority vote over the NT map.
pub fn hovernet_separate(bundle: &PredictionBundle, params: &HovernetParams) -> Result<InstanceMap> {
    let (h, w, nc) = bundle.np_map.hwc()?;
    bundle.hv_map.ensure_shape(&[h, w, 2], "hv map")?;
    let (th, tw, _) = bundle.nt_map.hwc()?;
    if (th, tw) != (h, w) {
        return Err(Error::shape(format!("nt map is {th}x{tw}, np map is {h}x{w}")));
    }
    if nc != 2 {
        return Err(Error::shape(format!("np map needs 2 channels, got {nc}")));
    }
    let fg: Vec<bool> = bundle.np_map.data().chunks_exact(2).map(|p| p[1] >= params.tau_np).collect();
    let inst = separate_foreground(&fg, &bundle.hv_map, params)?;
    majority_vote_types(&inst, &bundle.nt_map, params.unknown_class)
}

/// Watershed stage on an explicit foreground mask. Classes are left at 0.
pub fn separate_foreground(fg: &[bool], hv_map: &TensorF32, params: &HovernetParams) -> Result<InstanceMap> {
    let (h, w, _) = hv_map.hwc()?;
    if fg.len() != h * w {
        return Err(Error::shape("foreground mask does not match hv map"));
    }
    if !fg.iter().any(|&f| f) {
        return Ok(InstanceMap::empty(h, w));
    }
    let edge = edge_map(hv_map)?;
    let marker_mask: Vec<bool> = fg.iter().zip(&edge).map(|(&f, &e)| f && e < params.tau_e).collect();
    let (mut markers, n) = connected_components(&marker_mask, h, w);
    remove_small(&mut markers, n, params.min_marker_px);
    // flooding -energy where energy = 1 - edge on the foreground
    let elevation: Vec<f64> = edge.iter().map(|e| e - 1.0).collect();
    watershed(&elevation, &mut markers, fg, h, w);
    let count = markers.iter().copied().max().unwrap_or(0);
    let kept = remove_small(&mut markers, count, params.min_instance_px);
    let classes: BTreeMap<u32, u32> = (1..=kept).map(|id| (id, 0)).collect();
    Ok(InstanceMap { labels: markers, height: h, width: w, classes, count: kept })
}

//! Turning prediction maps into labelled nucleus instances.

mod hovernet;
mod records;
mod star;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::TensorF32;

pub use hovernet::{edge_map, hovernet_separate, separate_foreground, HovernetParams};
pub use records::{bbox_overlap, extract_records, moore_contour, rasterize_records, NucleusRecord, Run};
pub use star::{
    cppnet_nms, rasterize_star_polygon, star_nms_with, star_runs, stardist_nms, StarParams, StarPolygonSet,
};

/// Integer label image, 0 = background, instances numbered 1..=count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
    /// instance id -> nucleus class id
    pub classes: BTreeMap<u32, u32>,
    pub count: u32,
}

impl InstanceMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { labels: vec![0; height * width], height, width, classes: BTreeMap::new(), count: 0 }
    }

    /// Renumbers arbitrary ids to 1..=count in raster order of first
    /// appearance. `classes` is keyed by the original ids; unlisted
    /// instances get class 0.
    pub fn from_raw(labels: Vec<u32>, height: usize, width: usize, classes: &BTreeMap<u32, u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label buffer has {} entries for a {height}x{width} map",
                labels.len()
            )));
        }
        let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
        let mut out = Vec::with_capacity(labels.len());
        let mut new_classes = BTreeMap::new();
        for &l in &labels {
            if l == 0 {
                out.push(0);
                continue;
            }
            let next = remap.len() as u32 + 1;
            let id = *remap.entry(l).or_insert_with(|| {
                new_classes.insert(next, classes.get(&l).copied().unwrap_or(0));
                next
            });
            out.push(id);
        }
        Ok(Self { labels: out, height, width, classes: new_classes, count: remap.len() as u32 })
    }

    pub fn label(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }

    pub fn class_of(&self, id: u32) -> u32 {
        self.classes.get(&id).copied().unwrap_or(0)
    }

    /// Pixel counts indexed by id (entry 0 is background).
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0usize; self.count as usize + 1];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }

    /// Flat pixel indices of every instance, indexed by id - 1.
    pub fn pixel_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.count as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                lists[l as usize - 1].push(i);
            }
        }
        lists
    }

    /// Checks id contiguity and class coverage.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::shape("label buffer does not match map size"));
        }
        let areas = self.areas_checked()?;
        for id in 1..=self.count {
            if areas[id as usize] == 0 {
                return Err(Error::shape(format!("instance id {id} has no pixels")));
            }
            if !self.classes.contains_key(&id) {
                return Err(Error::shape(format!("instance id {id} has no class")));
            }
        }
        Ok(())
    }

    fn areas_checked(&self) -> Result<Vec<usize>> {
        let mut a = vec![0usize; self.count as usize + 1];
        for &l in &self.labels {
            if l > self.count {
                return Err(Error::shape(format!("label {l} exceeds count {}", self.count)));
            }
            a[l as usize] += 1;
        }
        Ok(a)
    }

    /// Same instances with every class set to `class`.
    pub fn class_erased(&self, class: u32) -> Self {
        let mut m = self.clone();
        for v in m.classes.values_mut() {
            *v = class;
        }
        m
    }

    /// Only the instances of class `class`, renumbered.
    pub fn filter_class(&self, class: u32) -> Self {
        let labels = self
            .labels
            .iter()
            .map(|&l| if l > 0 && self.class_of(l) == class { l } else { 0 })
            .collect();
        Self::from_raw(labels, self.height, self.width, &self.classes).expect("same size")
    }
}

/// Assigns each instance the most frequent per-pixel argmax class of
/// `nt_map`, ignoring background (class 0). Ties go to the lower class id;
/// instances with no non-background votes get `unknown_class`.
pub fn majority_vote_types(inst: &InstanceMap, nt_map: &TensorF32, unknown_class: u32) -> Result<InstanceMap> {
    let (h, w, c) = nt_map.hwc()?;
    if (h, w) != (inst.height, inst.width) {
        return Err(Error::shape(format!(
            "nt map is {h}x{w}, instance map is {}x{}",
            inst.height, inst.width
        )));
    }
    let mut votes = vec![vec![0usize; c]; inst.count as usize + 1];
    let data = nt_map.data();
    for (i, &l) in inst.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let px = &data[i * c..(i + 1) * c];
        let mut best = 0;
        for k in 1..c {
            if px[k] > px[best] {
                best = k;
            }
        }
        votes[l as usize][best] += 1;
    }
    let mut out = inst.clone();
    for id in 1..=inst.count {
        let v = &votes[id as usize];
        let mut best: Option<usize> = None;
        for k in 1..c {
            if v[k] > 0 && best.is_none_or(|b| v[k] > v[b]) {
                best = Some(k);
            }
        }
        out.classes.insert(id, best.map_or(unknown_class, |k| k as u32));
    }
    Ok(out)
}

pub(crate) fn neighbors4(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let r = i / w;
    let c = i % w;
    let up = (r > 0).then(|| i - w);
    let down = (r + 1 < h).then(|| i + w);
    let left = (c > 0).then(|| i - 1);
    let right = (c + 1 < w).then(|| i + 1);
    [up, left, right, down].into_iter().flatten()
}

/// 4-connected component labelling of `mask`, ids in raster order.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for s in 0..h * w {
        if !mask[s] || labels[s] != 0 {
            continue;
        }
        next += 1;
        labels[s] = next;
        stack.push(s);
        while let Some(p) = stack.pop() {
            for q in neighbors4(p, h, w) {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
    }
    (labels, next)
}

/// Drops instances smaller than `min_px` and renumbers the rest in order.
pub(crate) fn remove_small(labels: &mut [u32], count: u32, min_px: usize) -> u32 {
    let mut areas = vec![0usize; count as usize + 1];
    for &l in labels.iter() {
        areas[l as usize] += 1;
    }
    let mut remap = vec![0u32; count as usize + 1];
    let mut next = 0;
    for id in 1..=count as usize {
        if areas[id] >= min_px {
            next += 1;
            remap[id] = next;
        }
    }
    for l in labels.iter_mut() {
        *l = remap[*l as usize];
    }
    next
}

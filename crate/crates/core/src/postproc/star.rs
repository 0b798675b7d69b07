//! Star-convex polygon candidates and greedy polygon NMS.

use std::collections::BTreeMap;

use super::records::{bbox_overlap, NucleusRecord, Run};
use super::InstanceMap;
use crate::error::{Error, Result};
use crate::model::RayMaps;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarParams {
    pub prob_thresh: f32,
    pub nms_thresh: f64,
}

impl Default for StarParams {
    fn default() -> Self {
        Self { prob_thresh: 0.5, nms_thresh: 0.3 }
    }
}

/// Candidate polygons: one center, probability and `k` ray lengths each.
#[derive(Debug, Clone, PartialEq)]
pub struct StarPolygonSet {
    pub k: usize,
    pub centers: Vec<[usize; 2]>,
    pub probs: Vec<f32>,
    /// row-major (candidate, ray)
    pub radii: Vec<f32>,
}

impl StarPolygonSet {
    pub fn new(k: usize, centers: Vec<[usize; 2]>, probs: Vec<f32>, radii: Vec<f32>) -> Result<Self> {
        let s = Self { k, centers, probs, radii };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(Error::BadRayCount(self.k));
        }
        if self.probs.len() != self.centers.len() || self.radii.len() != self.centers.len() * self.k {
            return Err(Error::shape("star polygon set has inconsistent lengths"));
        }
        if self.radii.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::DomainError("ray distances must be non-negative".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn radii_of(&self, i: usize) -> &[f32] {
        &self.radii[i * self.k..(i + 1) * self.k]
    }

    /// Every pixel whose object probability reaches `prob_thresh` becomes a
    /// candidate. With `refined` the refined distances are used.
    pub fn from_rays(rays: &RayMaps, refined: bool, prob_thresh: f32) -> Result<Self> {
        let (h, w, _) = rays.prob.hwc()?;
        let dist = if refined {
            rays.refined.as_ref().ok_or(Error::MissingRayMaps("refined distances"))?
        } else {
            &rays.dist
        };
        let (dh, dw, k) = dist.hwc()?;
        if (dh, dw) != (h, w) {
            return Err(Error::shape("ray distance map does not match probability map"));
        }
        let mut centers = Vec::new();
        let mut probs = Vec::new();
        let mut radii = Vec::new();
        for (i, &p) in rays.prob.data().iter().enumerate() {
            if p >= prob_thresh {
                centers.push([i / w, i % w]);
                probs.push(p);
                radii.extend(dist.data()[i * k..(i + 1) * k].iter().map(|r| r.max(0.0)));
            }
        }
        Self::new(k, centers, probs, radii)
    }
}

/// Row runs of the polygon with vertices at `center + r_k (cos t_k, sin t_k)`
/// (row, col), `t_k = 2 pi k / K`, filled even-odd on pixel centers, plus the
/// center pixel itself, clipped to `h` x `w`.
pub fn star_runs(center: [isize; 2], radii: &[f32], h: usize, w: usize) -> Vec<Run> {
    let k = radii.len();
    let verts: Vec<(f64, f64)> = radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            (center[0] as f64 + r as f64 * t.cos(), center[1] as f64 + r as f64 * t.sin())
        })
        .collect();
    let rmin = verts.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let rmax = verts.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let row_lo = rmin.ceil().max(0.0) as isize;
    let row_hi = rmax.floor().min(h as f64 - 1.0) as isize;
    let mut runs = Vec::new();
    let mut xs = Vec::new();
    let mut spans: Vec<(isize, isize)> = Vec::new();
    for y in row_lo.min(center[0])..=row_hi.max(center[0]) {
        if y < 0 || y >= h as isize {
            continue;
        }
        let yf = y as f64;
        xs.clear();
        for i in 0..k {
            let a = verts[i];
            let b = verts[(i + 1) % k];
            if (a.0 <= yf) != (b.0 <= yf) {
                xs.push(a.1 + (yf - a.0) * (b.1 - a.1) / (b.0 - a.0));
            }
        }
        xs.sort_by(f64::total_cmp);
        spans.clear();
        for pair in xs.chunks_exact(2) {
            let c0 = pair[0].ceil() as isize;
            let c1 = pair[1].floor() as isize;
            if c0 <= c1 {
                spans.push((c0, c1));
            }
        }
        if y == center[0] {
            spans.push((center[1], center[1]));
        }
        spans.sort_unstable();
        let mut merged: Option<(isize, isize)> = None;
        let flush = |s: (isize, isize), runs: &mut Vec<Run>| {
            let c0 = s.0.max(0);
            let c1 = s.1.min(w as isize - 1);
            if c0 <= c1 {
                runs.push(Run { row: y as usize, c0: c0 as usize, c1: c1 as usize });
            }
        };
        for &s in &spans {
            merged = match merged {
                Some(m) if s.0 <= m.1 + 1 => Some((m.0, m.1.max(s.1))),
                Some(m) => {
                    flush(m, &mut runs);
                    Some(s)
                }
                None => Some(s),
            };
        }
        if let Some(m) = merged {
            flush(m, &mut runs);
        }
    }
    runs
}

/// Dense binary mask of [`star_runs`].
pub fn rasterize_star_polygon(center: [isize; 2], radii: &[f32], h: usize, w: usize) -> Result<Vec<bool>> {
    if radii.len() < 3 {
        return Err(Error::BadRayCount(radii.len()));
    }
    let mut mask = vec![false; h * w];
    for r in star_runs(center, radii, h, w) {
        for c in r.c0..=r.c1 {
            mask[r.row * w + c] = true;
        }
    }
    Ok(mask)
}

fn as_record(runs: Vec<Run>) -> Option<NucleusRecord> {
    let first = runs.first()?;
    let mut bbox = [first.row, first.c0, first.row, first.c1];
    for r in &runs {
        bbox[0] = bbox[0].min(r.row);
        bbox[1] = bbox[1].min(r.c0);
        bbox[2] = bbox[2].max(r.row);
        bbox[3] = bbox[3].max(r.c1);
    }
    Some(NucleusRecord {
        id: 0,
        class_id: 0,
        bbox,
        centroid: [0.0; 2],
        contour: Vec::new(),
        embedding: None,
        provenance_tile: (0, 0),
        runs,
    })
}

/// Greedy NMS. Returns the indices of surviving candidates in acceptance
/// order (descending probability, ties by candidate order).
pub fn star_nms_with(polys: &StarPolygonSet, h: usize, w: usize, params: &StarParams) -> Result<Vec<usize>> {
    polys.validate()?;
    let mut order: Vec<usize> = (0..polys.len()).filter(|&i| polys.probs[i] >= params.prob_thresh).collect();
    order.sort_by(|&a, &b| polys.probs[b].total_cmp(&polys.probs[a]));
    let mut accepted: Vec<(usize, NucleusRecord)> = Vec::new();
    for i in order {
        let c = polys.centers[i];
        let Some(cand) = as_record(star_runs([c[0] as isize, c[1] as isize], polys.radii_of(i), h, w)) else {
            continue;
        };
        let suppressed = accepted
            .iter()
            .any(|(_, a)| bbox_overlap(a.bbox, cand.bbox) && a.iou(&cand) > params.nms_thresh);
        if !suppressed {
            accepted.push((i, cand));
        }
    }
    Ok(accepted.into_iter().map(|(i, _)| i).collect())
}

fn paint(polys: &StarPolygonSet, keep: &[usize], h: usize, w: usize) -> InstanceMap {
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    for &i in keep {
        let c = polys.centers[i];
        let runs = star_runs([c[0] as isize, c[1] as isize], polys.radii_of(i), h, w);
        let id = next + 1;
        let mut painted = false;
        for r in runs {
            for px in &mut labels[r.row * w + r.c0..=r.row * w + r.c1] {
                if *px == 0 {
                    *px = id;
                    painted = true;
                }
            }
        }
        if painted {
            next = id;
        }
    }
    let classes: BTreeMap<u32, u32> = (1..=next).map(|id| (id, 0)).collect();
    InstanceMap { labels, height: h, width: w, classes, count: next }
}

/// Polygon NMS on predicted ray distances. Survivors are painted in
/// acceptance order; later polygons never overwrite earlier pixels.
pub fn stardist_nms(polys: &StarPolygonSet, h: usize, w: usize, params: &StarParams) -> Result<InstanceMap> {
    let keep = star_nms_with(polys, h, w, params)?;
    Ok(paint(polys, &keep, h, w))
}

/// Same mechanics as [`stardist_nms`]; `polys` should carry refined
/// distances (see [`StarPolygonSet::from_rays`]).
pub fn cppnet_nms(polys: &StarPolygonSet, h: usize, w: usize, params: &StarParams) -> Result<InstanceMap> {
    stardist_nms(polys, h, w, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_radius_is_center_pixel() {
        let m = rasterize_star_polygon([3, 4], &[0.0; 8], 8, 8).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[3 * 8 + 4]);
    }

    #[test]
    fn disc_area() {
        let m = rasterize_star_polygon([32, 32], &[10.0; 32], 64, 64).unwrap();
        let area = m.iter().filter(|&&b| b).count() as f64;
        let disc = std::f64::consts::PI * 100.0;
        assert!((area - disc).abs() / disc < 0.1, "{area}");
    }

    #[test]
    fn outside_is_empty() {
        let m = rasterize_star_polygon([-50, -50], &[5.0; 16], 16, 16).unwrap();
        assert!(m.iter().all(|&b| !b));
    }

    #[test]
    fn identical_candidates_collapse() {
        let set = StarPolygonSet::new(8, vec![[10, 10], [10, 10]], vec![0.9, 0.8], vec![4.0; 16]).unwrap();
        let m = stardist_nms(&set, 32, 32, &StarParams::default()).unwrap();
        assert_eq!(m.count, 1);
    }

    #[test]
    fn too_few_rays() {
        assert!(matches!(
            StarPolygonSet::new(2, vec![], vec![], vec![]),
            Err(Error::BadRayCount(2))
        ));
    }
}

//! Panoptic quality and centroid-based detection/classification scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::{extract_records, InstanceMap, NucleusRecord};

/// Pairs `(gt, pred, score)`. `score` is the IoU for segment matching and
/// the centroid distance for point matching.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(u32, u32, f64)>,
    pub unmatched_gt: BTreeSet<u32>,
    pub unmatched_pred: BTreeSet<u32>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }
    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }
    pub fn fn_(&self) -> usize {
        self.unmatched_gt.len()
    }
}

/// Pixel intersection counts of every overlapping (gt, pred) pair plus the
/// per-instance areas.
pub fn overlap_table(gt: &InstanceMap, pred: &InstanceMap) -> Result<(HashMap<(u32, u32), usize>, Vec<usize>, Vec<usize>)> {
    if (gt.height, gt.width) != (pred.height, pred.width) {
        return Err(Error::shape(format!(
            "gt map is {}x{}, prediction is {}x{}",
            gt.height, gt.width, pred.height, pred.width
        )));
    }
    let mut inter = HashMap::new();
    let mut ga = vec![0usize; gt.count as usize + 1];
    let mut pa = vec![0usize; pred.count as usize + 1];
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        ga[g as usize] += 1;
        pa[p as usize] += 1;
        if g > 0 && p > 0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    Ok((inter, ga, pa))
}

/// All (gt, pred) pairs with IoU > 0.5. Such pairs are unique on both sides.
pub fn match_segments(gt: &InstanceMap, pred: &InstanceMap) -> Result<MatchResult> {
    let (inter, ga, pa) = overlap_table(gt, pred)?;
    let mut pairs: Vec<(u32, u32, f64)> = inter
        .into_iter()
        .filter_map(|((g, p), n)| {
            let iou = n as f64 / (ga[g as usize] + pa[p as usize] - n) as f64;
            (iou > 0.5).then_some((g, p, iou))
        })
        .collect();
    pairs.sort_by_key(|&(g, p, _)| (g, p));
    let mut unmatched_gt: BTreeSet<u32> = (1..=gt.count).filter(|&g| ga[g as usize] > 0).collect();
    let mut unmatched_pred: BTreeSet<u32> = (1..=pred.count).filter(|&p| pa[p as usize] > 0).collect();
    for &(g, p, _) in &pairs {
        // IoU > 0.5 makes a second partner impossible
        assert!(unmatched_gt.remove(&g), "gt segment {g} matched twice");
        assert!(unmatched_pred.remove(&p), "predicted segment {p} matched twice");
    }
    Ok(MatchResult { pairs, unmatched_gt, unmatched_pred })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqScores {
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    /// true when there was nothing to detect and nothing detected; scores
    /// are then 1 by convention
    pub empty: bool,
}

/// TP/FP/FN counts and IoU sum, accumulated over many images.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PqAccum {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqAccum {
    pub fn add(&mut self, m: &MatchResult) {
        self.tp += m.tp();
        self.fp += m.fp();
        self.fn_ += m.fn_();
        self.iou_sum += m.pairs.iter().map(|p| p.2).sum::<f64>();
    }

    pub fn scores(&self) -> PqScores {
        if self.tp + self.fp + self.fn_ == 0 {
            return PqScores { pq: 1.0, dq: 1.0, sq: 1.0, empty: true };
        }
        let dq = self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        let sq = if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 };
        PqScores { pq: dq * sq, dq, sq, empty: false }
    }
}

pub fn panoptic_quality(m: &MatchResult) -> PqScores {
    let mut acc = PqAccum::default();
    acc.add(m);
    acc.scores()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassPq {
    pub bpq: PqScores,
    /// mean pq over classes seen in gt or prediction
    pub mpq: f64,
    pub per_class: BTreeMap<u32, PqScores>,
}

/// Binary and multi-class PQ over an evaluation set. Counts and IoU sums are
/// pooled over all images before scoring. Nucleus classes are
/// `1..num_classes` (0 is background).
pub fn multiclass_pq(gt: &[InstanceMap], pred: &[InstanceMap], num_classes: u32) -> Result<MulticlassPq> {
    if gt.len() != pred.len() {
        return Err(Error::shape(format!("{} gt maps vs {} predictions", gt.len(), pred.len())));
    }
    let mut binary = PqAccum::default();
    let mut per: Vec<PqAccum> = vec![PqAccum::default(); num_classes as usize];
    for (g, p) in gt.iter().zip(pred) {
        binary.add(&match_segments(&g.class_erased(1), &p.class_erased(1))?);
        for c in 1..num_classes {
            per[c as usize].add(&match_segments(&g.filter_class(c), &p.filter_class(c))?);
        }
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    let mut n = 0;
    for c in 1..num_classes {
        let s = per[c as usize].scores();
        if !s.empty {
            sum += s.pq;
            n += 1;
        }
        per_class.insert(c, s);
    }
    let bpq = binary.scores();
    let mpq = if n == 0 { bpq.pq } else { sum / n as f64 };
    Ok(MulticlassPq { bpq, mpq, per_class })
}

/// Greedy nearest-first matching of centroids within `radius`. Ids in the
/// result are positions in the input slices.
pub fn match_points(gt: &[[f64; 2]], pred: &[[f64; 2]], radius: f64) -> MatchResult {
    let mut cand = Vec::new();
    for (i, a) in gt.iter().enumerate() {
        for (j, b) in pred.iter().enumerate() {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if d <= radius {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (d, i, j) in cand {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            pairs.push((i as u32, j as u32, d));
        }
    }
    pairs.sort_by_key(|&(g, p, _)| (g, p));
    MatchResult {
        pairs,
        unmatched_gt: (0..gt.len() as u32).filter(|&i| !gt_used[i as usize]).collect(),
        unmatched_pred: (0..pred.len() as u32).filter(|&j| !pred_used[j as usize]).collect(),
    }
}

pub fn match_centroids(gt: &[NucleusRecord], pred: &[NucleusRecord], radius: f64) -> MatchResult {
    let g: Vec<[f64; 2]> = gt.iter().map(|r| r.centroid).collect();
    let p: Vec<[f64; 2]> = pred.iter().map(|r| r.centroid).collect();
    match_points(&g, &p, radius)
}

/// Default matching radius in pixels for a slide resolution.
pub fn default_radius(mpp: f64) -> f64 {
    if mpp <= 0.375 {
        12.0
    } else {
        6.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64, all_zero: bool) -> f64 {
    if den == 0.0 {
        if all_zero {
            1.0
        } else {
            0.0
        }
    } else {
        num / den
    }
}

pub fn detection_scores(m: &MatchResult) -> Prf {
    let (tp, fp, fn_) = (m.tp() as f64, m.fp() as f64, m.fn_() as f64);
    let empty = tp + fp + fn_ == 0.0;
    Prf {
        precision: ratio(tp, tp + fp, empty),
        recall: ratio(tp, tp + fn_, empty),
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_, empty),
    }
}

/// Per-class scores over matched pairs, counting true negatives (pairs
/// where neither side is `class`) as correct, with unmatched detections
/// penalised through FP_d and FN_d.
pub fn classification_scores(m: &MatchResult, gt_classes: &[u32], pred_classes: &[u32], class: u32) -> Prf {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for &(g, p, _) in &m.pairs {
        let gc = gt_classes[g as usize] == class;
        let pc = pred_classes[p as usize] == class;
        match (gc, pc) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
        }
    }
    let (fp_d, fn_d) = (m.fp() as f64, m.fn_() as f64);
    let empty = tp + tn + fp + fn_ + fp_d + fn_d == 0.0;
    let good = tp + tn;
    Prf {
        precision: ratio(good, good + 2.0 * fp + fp_d, empty),
        recall: ratio(good, good + 2.0 * fn_ + fn_d, empty),
        f1: ratio(2.0 * good, 2.0 * good + 2.0 * fp + 2.0 * fn_ + fp_d + fn_d, empty),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bpq: f64,
    pub mpq: f64,
    pub per_class: BTreeMap<u32, ClassMetrics>,
    pub detection: Prf,
    /// set when bpq used the empty-versus-empty convention
    pub empty_convention: bool,
}

impl MetricReport {
    /// Deterministic JSON with sorted keys.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Full evaluation over paired instance maps: PQ family on segments,
/// detection and classification on centroids matched within `radius`.
pub fn evaluate(gt: &[InstanceMap], pred: &[InstanceMap], num_classes: u32, radius: f64) -> Result<MetricReport> {
    let pq = multiclass_pq(gt, pred, num_classes)?;
    let mut gt_pts = Vec::new();
    let mut pred_pts = Vec::new();
    let mut gt_cls = Vec::new();
    let mut pred_cls = Vec::new();
    let mut det = MatchResult::default();
    for (g, p) in gt.iter().zip(pred) {
        let gr = extract_records(g);
        let pr = extract_records(p);
        let m = match_centroids(&gr, &pr, radius);
        // pool the per-image matches with ids offset into the global lists
        let (go, po) = (gt_pts.len() as u32, pred_pts.len() as u32);
        det.pairs.extend(m.pairs.iter().map(|&(a, b, d)| (a + go, b + po, d)));
        det.unmatched_gt.extend(m.unmatched_gt.iter().map(|a| a + go));
        det.unmatched_pred.extend(m.unmatched_pred.iter().map(|b| b + po));
        gt_pts.extend(gr.iter().map(|r| r.centroid));
        pred_pts.extend(pr.iter().map(|r| r.centroid));
        gt_cls.extend(gr.iter().map(|r| r.class_id));
        pred_cls.extend(pr.iter().map(|r| r.class_id));
    }
    let per_class = pq
        .per_class
        .iter()
        .map(|(&c, s)| {
            let prf = classification_scores(&det, &gt_cls, &pred_cls, c);
            (c, ClassMetrics { pq: s.pq, dq: s.dq, sq: s.sq, precision: prf.precision, recall: prf.recall, f1: prf.f1 })
        })
        .collect();
    Ok(MetricReport {
        bpq: pq.bpq.pq,
        mpq: pq.mpq,
        per_class,
        detection: detection_scores(&det),
        empty_convention: pq.bpq.empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(labels: Vec<u32>, w: usize, classes: &[(u32, u32)]) -> InstanceMap {
        let h = labels.len() / w;
        InstanceMap::from_raw(labels, h, w, &classes.iter().copied().collect()).unwrap()
    }

    #[test]
    fn plug_in_pq() {
        let m = MatchResult {
            pairs: vec![(1, 1, 0.8)],
            unmatched_gt: [2].into(),
            unmatched_pred: [2].into(),
        };
        let s = panoptic_quality(&m);
        assert_eq!(s.dq, 0.5);
        assert_eq!(s.sq, 0.8);
        assert!((s.pq - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_vs_empty() {
        let s = panoptic_quality(&MatchResult::default());
        assert!(s.empty);
        assert_eq!(s.pq, 1.0);
        assert_eq!(detection_scores(&MatchResult::default()).f1, 1.0);
    }

    #[test]
    fn identical_maps() {
        let g = map(vec![1, 1, 0, 2, 2, 0], 3, &[(1, 1), (2, 2)]);
        let m = match_segments(&g, &g).unwrap();
        assert_eq!(m.tp(), 2);
        assert!(m.pairs.iter().all(|p| p.2 == 1.0));
        let r = multiclass_pq(&[g.clone()], &[g], 3).unwrap();
        assert_eq!(r.bpq.pq, 1.0);
        assert_eq!(r.mpq, 1.0);
    }

    #[test]
    fn detection_plug_in() {
        let m = MatchResult {
            pairs: (0..8).map(|i| (i, i, 0.0)).collect(),
            unmatched_gt: BTreeSet::new(),
            unmatched_pred: [8, 9].into(),
        };
        let d = detection_scores(&m);
        assert_eq!(d.precision, 0.8);
        assert_eq!(d.recall, 1.0);
        assert!((d.f1 - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn radius_is_inclusive_and_greedy() {
        let m = match_points(&[[0.0, 0.0]], &[[0.0, 5.0]], 6.0);
        assert_eq!(m.tp(), 1);
        let m = match_points(&[[0.0, 0.0]], &[[0.0, 13.0]], 12.0);
        assert_eq!(m.tp(), 0);
    }

    #[test]
    fn single_misclassified_pair() {
        let m = MatchResult { pairs: vec![(0, 0, 1.0)], ..Default::default() };
        assert_eq!(classification_scores(&m, &[2], &[3], 2).f1, 0.0);
    }
}

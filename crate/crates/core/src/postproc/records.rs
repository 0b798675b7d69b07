use super::InstanceMap;

/// Horizontal pixel run `[c0, c1]` on one row, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Run {
    pub row: usize,
    pub c0: usize,
    pub c1: usize,
}

/// One detected nucleus. Coordinates are (row, col) pixels, tile-local
/// until the pipeline shifts them to slide coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct NucleusRecord {
    pub id: u32,
    pub class_id: u32,
    /// (r0, c0, r1, c1), inclusive
    pub bbox: [usize; 4],
    pub centroid: [f64; 2],
    /// outer boundary pixels, clockwise on screen, not closed
    pub contour: Vec<[usize; 2]>,
    pub embedding: Option<Vec<f64>>,
    pub provenance_tile: (usize, usize),
    /// pixel footprint as row runs, sorted
    pub runs: Vec<Run>,
}

impl NucleusRecord {
    pub fn area(&self) -> usize {
        self.runs.iter().map(|r| r.c1 - r.c0 + 1).sum()
    }

    /// Moves the record by `(dr, dc)` pixels.
    pub fn shift(&mut self, dr: usize, dc: usize) {
        self.bbox[0] += dr;
        self.bbox[1] += dc;
        self.bbox[2] += dr;
        self.bbox[3] += dc;
        self.centroid[0] += dr as f64;
        self.centroid[1] += dc as f64;
        for p in &mut self.contour {
            p[0] += dr;
            p[1] += dc;
        }
        for r in &mut self.runs {
            r.row += dr;
            r.c0 += dc;
            r.c1 += dc;
        }
    }

    /// Number of pixels shared with `other`.
    pub fn intersection(&self, other: &NucleusRecord) -> usize {
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            let (x, y) = (a[i], b[j]);
            if x.row != y.row {
                if x.row < y.row {
                    i += 1;
                } else {
                    j += 1;
                }
                continue;
            }
            let lo = x.c0.max(y.c0);
            let hi = x.c1.min(y.c1);
            if lo <= hi {
                n += hi - lo + 1;
            }
            if x.c1 < y.c1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        n
    }

    pub fn iou(&self, other: &NucleusRecord) -> f64 {
        if !bbox_overlap(self.bbox, other.bbox) {
            return 0.0;
        }
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Whether two inclusive (r0, c0, r1, c1) boxes share a pixel.
pub fn bbox_overlap(a: [usize; 4], b: [usize; 4]) -> bool {
    a[0] <= b[2] && b[0] <= a[2] && a[1] <= b[3] && b[1] <= a[3]
}

const DIRS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

fn dir_index(dr: isize, dc: isize) -> usize {
    DIRS.iter().position(|&d| d == (dr, dc)).expect("unit offset")
}

/// Moore-neighbour boundary trace of the 8-connected part of instance `id`
/// that contains its topmost-then-leftmost pixel. Clockwise on screen,
/// starting at that pixel. Stops on re-entering the start from the initial
/// direction.
pub fn moore_contour(inst: &InstanceMap, id: u32) -> Vec<[usize; 2]> {
    match inst.labels.iter().position(|&l| l == id) {
        Some(first) => trace_from(inst, id, (first / inst.width, first % inst.width)),
        None => Vec::new(),
    }
}

/// Moore trace starting at `start`, which must be the first pixel of `id`
/// in raster order.
fn trace_from(inst: &InstanceMap, id: u32, start: (usize, usize)) -> Vec<[usize; 2]> {
    let (h, w) = (inst.height as isize, inst.width as isize);
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && inst.labels[(r * w + c) as usize] == id;
    let start = (start.0 as isize, start.1 as isize);
    let start_back = 6; // west neighbour, background by construction
    let mut contour = vec![[start.0 as usize, start.1 as usize]];
    let (mut p, mut back) = (start, start_back);
    let limit = 4 * inst.labels.len() + 8;
    for _ in 0..limit {
        let mut next = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let q = (p.0 + DIRS[d].0, p.1 + DIRS[d].1);
            if inside(q.0, q.1) {
                let prev = DIRS[(d + 7) % 8];
                let b = (p.0 + prev.0, p.1 + prev.1);
                next = Some((q, dir_index(b.0 - q.0, b.1 - q.1)));
                break;
            }
        }
        let Some((q, qb)) = next else {
            break; // isolated pixel
        };
        if q == start && qb == start_back {
            break;
        }
        contour.push([q.0 as usize, q.1 as usize]);
        p = q;
        back = qb;
    }
    contour
}

/// Bounding box, mean-pixel centroid, contour and footprint of every
/// instance, in id order.
pub fn extract_records(inst: &InstanceMap) -> Vec<NucleusRecord> {
    let n = inst.count as usize;
    let mut bbox = vec![[usize::MAX, usize::MAX, 0, 0]; n];
    let mut sums = vec![[0.0f64; 2]; n];
    let mut counts = vec![0usize; n];
    let mut runs: Vec<Vec<Run>> = vec![Vec::new(); n];
    for r in 0..inst.height {
        let row = &inst.labels[r * inst.width..(r + 1) * inst.width];
        let mut c = 0;
        while c < inst.width {
            let l = row[c];
            if l == 0 {
                c += 1;
                continue;
            }
            let c0 = c;
            while c + 1 < inst.width && row[c + 1] == l {
                c += 1;
            }
            let k = l as usize - 1;
            runs[k].push(Run { row: r, c0, c1: c });
            let len = c - c0 + 1;
            let b = &mut bbox[k];
            b[0] = b[0].min(r);
            b[1] = b[1].min(c0);
            b[2] = b[2].max(r);
            b[3] = b[3].max(c);
            sums[k][0] += (r * len) as f64;
            // sum of c0..=c
            sums[k][1] += ((c0 + c) * len) as f64 / 2.0;
            counts[k] += len;
            c += 1;
        }
    }
    (0..n)
        .filter(|&k| counts[k] > 0)
        .map(|k| {
            let id = k as u32 + 1;
            NucleusRecord {
                id,
                class_id: inst.class_of(id),
                bbox: bbox[k],
                centroid: [sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64],
                contour: trace_from(inst, id, (runs[k][0].row, runs[k][0].c0)),
                embedding: None,
                provenance_tile: (0, 0),
                runs: std::mem::take(&mut runs[k]),
            }
        })
        .collect()
}


/// Paints records back into an instance map from their contours: pixel
/// centers inside the contour polygon (even-odd) plus the contour pixels.
/// Earlier records win where shapes overlap. Ids follow record order.
pub fn rasterize_records(records: &[NucleusRecord], h: usize, w: usize) -> InstanceMap {
    let mut labels = vec![0u32; h * w];
    let mut classes = std::collections::BTreeMap::new();
    let mut xs: Vec<f64> = Vec::new();
    for (k, rec) in records.iter().enumerate() {
        let id = k as u32 + 1;
        classes.insert(id, rec.class_id);
        let mut set = |r: usize, c: usize| {
            if r < h && c < w && labels[r * w + c] == 0 {
                labels[r * w + c] = id;
            }
        };
        let pts = &rec.contour;
        let n = pts.len();
        if n >= 3 {
            let r0 = pts.iter().map(|p| p[0]).min().unwrap_or(0);
            let r1 = pts.iter().map(|p| p[0]).max().unwrap_or(0);
            for y in r0..=r1 {
                let yf = y as f64;
                xs.clear();
                for i in 0..n {
                    let (a, b) = (pts[i], pts[(i + 1) % n]);
                    let (ar, br) = (a[0] as f64, b[0] as f64);
                    if (ar <= yf) != (br <= yf) {
                        xs.push(a[1] as f64 + (yf - ar) * (b[1] as f64 - a[1] as f64) / (br - ar));
                    }
                }
                xs.sort_by(f64::total_cmp);
                for pair in xs.chunks_exact(2) {
                    let c0 = pair[0].ceil().max(0.0) as usize;
                    let c1 = pair[1].floor();
                    if c1 < 0.0 {
                        continue;
                    }
                    for c in c0..=c1 as usize {
                        set(y, c);
                    }
                }
            }
        }
        for p in pts {
            set(p[0], p[1]);
        }
    }
    InstanceMap::from_raw(labels, h, w, &classes).expect("sized buffer")
}

#[cfg(test)]
mod raster_tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn contour_fill_reproduces_blob() {
        let (h, w) = (24, 24);
        let mut labels = vec![0u32; h * w];
        for r in 0..h {
            for c in 0..w {
                let d = ((r as f64 - 11.0).powi(2) / 49.0 + (c as f64 - 12.0).powi(2) / 25.0).sqrt();
                if d <= 1.0 {
                    labels[r * w + c] = 1;
                }
            }
        }
        let m = InstanceMap::from_raw(labels, h, w, &BTreeMap::new()).unwrap();
        let back = rasterize_records(&extract_records(&m), h, w);
        assert_eq!(back.labels, m.labels);
    }
}

//! Whole-slide inference: overlapping tiles, per-tile segmentation, seam
//! de-duplication and export.

mod export;
mod source;

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CellVit, PredictionBundle};
use crate::postproc::{
    bbox_overlap, extract_records, hovernet_separate, majority_vote_types, stardist_nms, HovernetParams, InstanceMap,
    NucleusRecord, StarParams, StarPolygonSet,
};
use crate::synth::{BundleOptions, Layout};
use crate::tensor::TensorF32;

pub use export::{
    class_name, export_geojson, export_json, geojson_string, parse_result_json, result_json, validate_geojson,
    ResultDoc, RESULT_SCHEMA,
};
pub use source::{DirectorySource, SyntheticSource, TileManifest, TileSource, ManifestTile};

pub const DEFAULT_TILE_SIZE: usize = 1024;
pub const DEFAULT_OVERLAP: usize = 64;
pub const DEFAULT_MERGE_IOU: f64 = 0.25;

/// Tile origins (row, col) covering a `wsi_height` x `wsi_width` slide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub wsi_width: usize,
    pub wsi_height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    pub tiles: Vec<(usize, usize)>,
}

impl TileGrid {
    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }

    /// Height and width of the tile at `origin`; smaller than the tile size
    /// only when the slide itself is.
    pub fn extent(&self, origin: (usize, usize)) -> (usize, usize) {
        (
            self.tile_size.min(self.wsi_height - origin.0),
            self.tile_size.min(self.wsi_width - origin.1),
        )
    }

    /// Inclusive pixel rectangle (r0, c0, r1, c1) of tile `i`.
    pub fn rect(&self, i: usize) -> [usize; 4] {
        let o = self.tiles[i];
        let (h, w) = self.extent(o);
        [o.0, o.1, o.0 + h - 1, o.1 + w - 1]
    }

    /// Pixels pushed through the model, overlaps counted repeatedly.
    pub fn processed_pixels(&self) -> usize {
        self.tiles.iter().map(|&o| {
            let (h, w) = self.extent(o);
            h * w
        }).sum()
    }
}

fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        out.push(o);
        if o + tile >= len {
            return out;
        }
        o = (o + stride).min(len - tile);
    }
}

/// Raster-order tile origins at stride `tile_size - overlap`. The last row
/// and column are shifted inward so every tile is full size whenever the
/// slide is larger than a tile.
pub fn plan_tiles(wsi_width: usize, wsi_height: usize, tile_size: usize, overlap: usize) -> Result<TileGrid> {
    if overlap >= tile_size {
        return Err(Error::OverlapTooLarge { tile_size, overlap });
    }
    if wsi_width == 0 || wsi_height == 0 {
        return Err(Error::InvalidConfig("slide has zero size".into()));
    }
    let stride = tile_size - overlap;
    let rows = axis_origins(wsi_height, tile_size, stride);
    let cols = axis_origins(wsi_width, tile_size, stride);
    let tiles = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TileGrid { wsi_width, wsi_height, tile_size, overlap, tiles })
}

/// Pixel ratio between two tilings of an `n * stride` slide in closed
/// form: `(T_a / s_a)^2 / (T_b / s_b)^2`.
pub fn redundancy_ratio(tile_a: usize, overlap_a: usize, tile_b: usize, overlap_b: usize) -> f64 {
    let ra = tile_a as f64 / (tile_a - overlap_a) as f64;
    let rb = tile_b as f64 / (tile_b - overlap_b) as f64;
    (rb * rb) / (ra * ra)
}

/// Produces prediction maps for one tile.
pub trait TilePredictor: Sync {
    fn predict(&self, image: &TensorF32, origin: (usize, usize)) -> Result<PredictionBundle>;

    fn name(&self) -> String;
}

impl TilePredictor for CellVit {
    fn predict(&self, image: &TensorF32, _origin: (usize, usize)) -> Result<PredictionBundle> {
        self.forward(image)
    }

    fn name(&self) -> String {
        let c = self.config();
        format!("cellvit-p{}-d{}-l{}", c.patch_size, c.embed_dim, c.depth)
    }
}

/// Returns the ideal maps of a synthetic layout for whatever window is
/// requested; the image is ignored. Stands in for a trained network.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub layout: Layout,
    pub opts: BundleOptions,
}

impl OraclePredictor {
    pub fn new(layout: Layout, opts: BundleOptions) -> Self {
        Self { layout, opts }
    }
}

impl TilePredictor for OraclePredictor {
    fn predict(&self, image: &TensorF32, origin: (usize, usize)) -> Result<PredictionBundle> {
        let (h, w, _) = image.hwc()?;
        Ok(self.layout.ideal_bundle(origin, h, w, &self.opts))
    }

    fn name(&self) -> String {
        "synthetic-oracle".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Hovernet,
    Stardist,
    Cppnet,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hovernet" => Ok(Mode::Hovernet),
            "stardist" => Ok(Mode::Stardist),
            "cppnet" => Ok(Mode::Cppnet),
            _ => Err(Error::InvalidConfig(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub mode: Mode,
    pub hovernet: HovernetParams,
    pub star: StarParams,
    pub merge_iou: f64,
    pub workers: usize,
    pub mpp: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            overlap: DEFAULT_OVERLAP,
            mode: Mode::Hovernet,
            hovernet: HovernetParams::default(),
            star: StarParams::default(),
            merge_iou: DEFAULT_MERGE_IOU,
            workers: 1,
            mpp: 0.25,
        }
    }
}

/// Output of one tile, coordinates tile-local.
#[derive(Debug, Clone)]
pub struct TileResult {
    pub inst: InstanceMap,
    pub records: Vec<NucleusRecord>,
    pub tokens_final: TensorF32,
}

/// Postprocessing of an already computed bundle: instance separation for
/// `mode`, majority-vote typing, records and token embeddings.
pub fn process_bundle(bundle: &PredictionBundle, cfg: &PipelineConfig) -> Result<TileResult> {
    let (h, w) = (bundle.height(), bundle.width());
    let inst = match cfg.mode {
        Mode::Hovernet => hovernet_separate(bundle, &cfg.hovernet)?,
        Mode::Stardist | Mode::Cppnet => {
            let rays = bundle.rays.as_ref().ok_or(Error::MissingRayMaps("star branch output"))?;
            let refined = cfg.mode == Mode::Cppnet;
            let polys = StarPolygonSet::from_rays(rays, refined, cfg.star.prob_thresh)?;
            let raw = stardist_nms(&polys, h, w, &cfg.star)?;
            majority_vote_types(&raw, &bundle.nt_map, cfg.hovernet.unknown_class)?
        }
    };
    let mut records = extract_records(&inst);
    let emb = associate_embeddings(&inst, &bundle.tokens_final, bundle.token_grid, bundle.patch_size)?;
    for r in &mut records {
        r.embedding = emb.get(&r.id).cloned();
    }
    Ok(TileResult { inst, records, tokens_final: bundle.tokens_final.clone() })
}

/// Forward pass then [`process_bundle`].
pub fn process_tile(
    image: &TensorF32,
    origin: (usize, usize),
    predictor: &dyn TilePredictor,
    cfg: &PipelineConfig,
) -> Result<TileResult> {
    let bundle = predictor.predict(image, origin)?;
    let (h, w, _) = image.hwc()?;
    if (bundle.height(), bundle.width()) != (h, w) {
        return Err(Error::shape(format!(
            "predictor returned {}x{} maps for a {h}x{w} tile",
            bundle.height(),
            bundle.width()
        )));
    }
    let mut out = process_bundle(&bundle, cfg)?;
    for r in &mut out.records {
        r.provenance_tile = origin;
    }
    Ok(out)
}

/// Mean token vector per instance over every token whose `patch` x `patch`
/// footprint holds at least one of its pixels. Unweighted, summed in f64 in
/// token order.
pub fn associate_embeddings(
    inst: &InstanceMap,
    tokens_final: &TensorF32,
    grid: (usize, usize),
    patch: usize,
) -> Result<BTreeMap<u32, Vec<f64>>> {
    if tokens_final.rank() != 2 || tokens_final.shape()[0] != grid.0 * grid.1 {
        return Err(Error::shape(format!(
            "token tensor {:?} does not match a {}x{} grid",
            tokens_final.shape(),
            grid.0,
            grid.1
        )));
    }
    if inst.height.div_ceil(patch) > grid.0 || inst.width.div_ceil(patch) > grid.1 {
        return Err(Error::shape("token grid does not cover the instance map"));
    }
    let d = tokens_final.shape()[1];
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); inst.count as usize + 1];
    for (i, &l) in inst.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let t = (i / inst.width / patch) * grid.1 + (i % inst.width) / patch;
        sets[l as usize].push(t);
    }
    let mut out = BTreeMap::new();
    for (id, set) in sets.iter_mut().enumerate().skip(1) {
        set.sort_unstable();
        set.dedup();
        if set.is_empty() {
            continue;
        }
        let mut acc = vec![0.0f64; d];
        for &t in set.iter() {
            for (a, &v) in acc.iter_mut().zip(tokens_final.row(t)) {
                *a += v as f64;
            }
        }
        let n = set.len() as f64;
        out.insert(id as u32, acc.into_iter().map(|a| a / n).collect());
    }
    Ok(out)
}

/// Records of one tile, already in slide coordinates.
#[derive(Debug, Clone)]
pub struct TileRecords {
    pub origin: (usize, usize),
    pub records: Vec<NucleusRecord>,
}

#[derive(Debug, Clone)]
pub struct WsiResult {
    pub records: Vec<NucleusRecord>,
    pub grid: TileGrid,
    pub mpp: f64,
    pub model: String,
}

fn rects_intersect(a: [usize; 4], b: [usize; 4]) -> Option<[usize; 4]> {
    let r = [a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])];
    (r[0] <= r[2] && r[1] <= r[3]).then_some(r)
}

fn touches(a: [usize; 4], b: [usize; 4]) -> bool {
    rects_intersect(a, b).is_some()
}

/// Removes cross-tile duplicates. Only records whose bbox reaches into an
/// overlap zone of their tile are compared. A pair from different tiles is
/// a duplicate when its mask IoU exceeds `merge_iou`, or when one of them
/// is cut by an interior tile edge and lies mostly (> 50 %) inside the
/// other. The survivor is the uncut one, then the larger, then the one from
/// the earlier tile. Survivors get ids 1..n in tile order.
pub fn merge_tiles(tiles: Vec<TileRecords>, grid: &TileGrid, merge_iou: f64) -> Result<Vec<NucleusRecord>> {
    let origins: Vec<(usize, usize)> = tiles.iter().map(|t| t.origin).collect();
    if origins != grid.tiles {
        return Err(Error::GridMismatch(format!(
            "{} tile results do not line up with the {} planned tiles",
            origins.len(),
            grid.tiles.len()
        )));
    }
    let rects: Vec<[usize; 4]> = (0..grid.tiles.len()).map(|i| grid.rect(i)).collect();
    let zones: Vec<Vec<[usize; 4]>> = (0..rects.len())
        .map(|i| {
            (0..rects.len())
                .filter(|&j| j != i)
                .filter_map(|j| rects_intersect(rects[i], rects[j]))
                .collect()
        })
        .collect();

    struct Entry {
        tile: usize,
        rec: NucleusRecord,
        marginal: bool,
        cut: bool,
    }
    let mut entries = Vec::new();
    for (ti, t) in tiles.into_iter().enumerate() {
        let rect = rects[ti];
        for rec in t.records {
            let b = rec.bbox;
            let marginal = zones[ti].iter().any(|&z| touches(b, z));
            let cut = (b[0] == rect[0] && rect[0] > 0)
                || (b[1] == rect[1] && rect[1] > 0)
                || (b[2] == rect[2] && rect[2] + 1 < grid.wsi_height)
                || (b[3] == rect[3] && rect[3] + 1 < grid.wsi_width);
            entries.push(Entry { tile: ti, rec, marginal, cut });
        }
    }

    let mut order: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].marginal).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&entries[a], &entries[b]);
        x.cut
            .cmp(&y.cut)
            .then(y.rec.area().cmp(&x.rec.area()))
            .then(x.tile.cmp(&y.tile))
            .then(a.cmp(&b))
    });
    let mut keep: Vec<bool> = entries.iter().map(|e| !e.marginal).collect();
    // kept marginal records bucketed by the cells their bbox covers
    const CELL: usize = 64;
    let cells = |b: [usize; 4]| {
        (b[0] / CELL..=b[2] / CELL).flat_map(move |r| (b[1] / CELL..=b[3] / CELL).map(move |c| (r, c)))
    };
    let mut buckets: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for &i in &order {
        let e = &entries[i];
        let is_dup = |k: usize| {
            let o = &entries[k];
            if o.tile == e.tile || !bbox_overlap(o.rec.bbox, e.rec.bbox) {
                return false;
            }
            let inter = e.rec.intersection(&o.rec);
            if inter == 0 {
                return false;
            }
            let union = e.rec.area() + o.rec.area() - inter;
            let iou = inter as f64 / union as f64;
            iou > merge_iou || (e.cut && inter as f64 > 0.5 * e.rec.area() as f64)
        };
        let dup = cells(e.rec.bbox).any(|cell| buckets.get(&cell).is_some_and(|v| v.iter().any(|&k| is_dup(k))));
        if !dup {
            keep[i] = true;
            for cell in cells(e.rec.bbox) {
                buckets.entry(cell).or_default().push(i);
            }
        }
    }
    let mut out: Vec<NucleusRecord> = entries
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e.rec)
        .collect();
    for (i, r) in out.iter_mut().enumerate() {
        r.id = i as u32 + 1;
    }
    Ok(out)
}

/// Plans tiles, runs [`process_tile`] on a pool of `cfg.workers` threads,
/// then merges sequentially in tile order. The first failing tile aborts the
/// run. Only per-tile records are retained, never whole-slide maps.
pub fn run_wsi(source: &dyn TileSource, predictor: &dyn TilePredictor, cfg: &PipelineConfig) -> Result<WsiResult> {
    let (w, h) = source.dimensions();
    let grid = plan_tiles(w, h, cfg.tile_size, cfg.overlap)?;
    source.check_grid(&grid)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<TileRecords>> = pool.install(|| {
        grid.tiles
            .par_iter()
            .map(|&origin| {
                let (th, tw) = grid.extent(origin);
                let run = || -> Result<TileRecords> {
                    let image = source.read_tile(origin, th, tw)?;
                    let mut tr = process_tile(&image, origin, predictor, cfg)?;
                    for r in &mut tr.records {
                        r.shift(origin.0, origin.1);
                    }
                    Ok(TileRecords { origin, records: tr.records })
                };
                run().map_err(|e| Error::TileFailed { row: origin.0, col: origin.1, source: Box::new(e) })
            })
            .collect()
    });
    let tiles = results.into_iter().collect::<Result<Vec<_>>>()?;
    let records = merge_tiles(tiles, &grid, cfg.merge_iou)?;
    Ok(WsiResult { records, grid, mpp: cfg.mpp, model: predictor.name() })
}

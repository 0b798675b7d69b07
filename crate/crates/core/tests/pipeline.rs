mod common;

use std::collections::{BTreeMap, BTreeSet};

use cellvit::metrics::{detection_scores, match_centroids};
use cellvit::model::{CellVit, ModelConfig};
use cellvit::pipeline::*;
use cellvit::postproc::{extract_records, InstanceMap, NucleusRecord};
use cellvit::synth::{BundleOptions, Layout, LayoutParams, SynthNucleus};
use cellvit::{Error, TensorF32};
use common::rng;
use rand::Rng;

fn disc(center: [f64; 2], r: f64) -> SynthNucleus {
    SynthNucleus { center, axes: [r, r], angle: 0.0, class: 1 }
}

fn oracle_run(layout: &Layout, tile: usize, overlap: usize, workers: usize) -> WsiResult {
    let source = SyntheticSource { layout: layout.clone(), seed: 0 };
    let pred = OraclePredictor::new(layout.clone(), BundleOptions::default());
    let cfg = PipelineConfig { tile_size: tile, overlap, workers, ..Default::default() };
    run_wsi(&source, &pred, &cfg).unwrap()
}

#[test]
fn tile_plans() {
    let g = plan_tiles(1024, 1024, 1024, 64).unwrap();
    assert_eq!(g.tiles, vec![(0, 0)]);
    // width 1024, height 1984
    let g = plan_tiles(1024, 1984, 1024, 64).unwrap();
    assert_eq!(g.tiles, vec![(0, 0), (960, 0)]);
    let g = plan_tiles(4096, 4096, 1024, 64).unwrap();
    let axis: Vec<usize> = g.tiles.iter().filter(|t| t.1 == 0).map(|t| t.0).collect();
    assert_eq!(g.tiles.len(), 25);
    assert_eq!(axis, vec![0, 960, 1920, 2880, 3072]);
    assert!(matches!(plan_tiles(100, 100, 64, 64), Err(Error::OverlapTooLarge { .. })));
    assert_eq!(redundancy_ratio(1024, 64, 256, 64), 1.5625);
}

#[test]
fn tiles_cover_the_slide() {
    let mut g = rng(1);
    for _ in 0..30 {
        let (w, h) = (g.random_range(1..3000), g.random_range(1..3000));
        let t = [64, 256, 1024][g.random_range(0..3)];
        let o = g.random_range(0..t / 2);
        let grid = plan_tiles(w, h, t, o).unwrap();
        let mut rows = BTreeSet::new();
        let mut cols = BTreeSet::new();
        for i in 0..grid.tiles.len() {
            let r = grid.rect(i);
            assert!(r[2] < h && r[3] < w);
            rows.insert((r[0], r[2]));
            cols.insert((r[1], r[3]));
        }
        // consecutive tiles overlap or abut, first starts at 0, last ends at the border
        for (axis, len) in [(rows, h), (cols, w)] {
            let v: Vec<_> = axis.into_iter().collect();
            assert_eq!(v[0].0, 0);
            assert!(v.windows(2).all(|p| p[1].0 <= p[0].1 + 1));
            assert_eq!(v.last().unwrap().1 + 1, len);
        }
        assert_eq!(grid.rect(grid.tiles.len() - 1), [h - t.min(h), w - t.min(w), h - 1, w - 1]);
    }
}

#[test]
fn process_tile_cases() {
    let cfg = PipelineConfig::default();
    let blank = Layout::new(64, 64, vec![]);
    let pred = OraclePredictor::new(blank.clone(), BundleOptions::default());
    let r = process_tile(&blank.image_window((0, 0), 64, 64, 0), (0, 0), &pred, &cfg).unwrap();
    assert!(r.records.is_empty());

    let three = Layout::new(64, 64, vec![disc([12.0, 12.0], 6.0), disc([40.0, 20.0], 7.0), disc([30.0, 48.0], 6.5)]);
    let pred = OraclePredictor::new(three.clone(), BundleOptions::default());
    let img = three.image_window((0, 0), 64, 64, 0);
    let a = process_tile(&img, (0, 0), &pred, &cfg).unwrap();
    let b = process_tile(&img, (0, 0), &pred, &cfg).unwrap();
    assert_eq!(a.records.len(), 3);
    assert_eq!(a.records, b.records);
}

fn token_table(n: usize, d: usize) -> TensorF32 {
    TensorF32::from_fn(&[n, d], |i| (i as f32) * 0.25 - 3.0)
}

#[test]
fn embedding_means() {
    let (h, w, p) = (32, 48, 16);
    let grid = (2, 3);
    let tokens = token_table(6, 4);
    let mut labels = vec![0u32; h * w];
    // instance 1 inside token (0, 1); instance 2 across tokens (1, 0) and (1, 1)
    for r in 2..6 {
        for c in 20..25 {
            labels[r * w + c] = 1;
        }
    }
    for r in 20..24 {
        for c in 14..18 {
            labels[r * w + c] = 2;
        }
    }
    let inst = InstanceMap::from_raw(labels, h, w, &BTreeMap::new()).unwrap();
    let e = associate_embeddings(&inst, &tokens, grid, p).unwrap();
    let as64 = |t: usize| tokens.row(t).iter().map(|&v| v as f64).collect::<Vec<_>>();
    assert_eq!(e[&1], as64(1));
    let want: Vec<f64> = as64(3).iter().zip(as64(4)).map(|(a, b)| (a + b) / 2.0).collect();
    assert_eq!(e[&2], want);
}

#[test]
fn embedding_token_sets_match_footprints() {
    let mut g = rng(2);
    let (p, grid) = (16, (4, 4));
    let tokens = TensorF32::from_fn(&[16, 3], |_| g.random_range(-1.0..1.0));
    for _ in 0..10 {
        let layout = Layout::random(64, 64, 8, &LayoutParams::default(), g.random());
        let inst = layout.gt();
        let e = associate_embeddings(&inst, &tokens, grid, p).unwrap();
        for (id, px) in common::pixel_sets(&inst) {
            // footprint oracle: token t covers rows/cols [16ty, 16ty+15] x [16tx, 16tx+15]
            let set: Vec<usize> = (0..16)
                .filter(|t| {
                    let (ty, tx) = (t / 4, t % 4);
                    px.iter().any(|&i| (i / 64) / 16 == ty && (i % 64) / 16 == tx)
                })
                .collect();
            let mut want = vec![0.0f64; 3];
            for &t in &set {
                for (a, &v) in want.iter_mut().zip(tokens.row(t)) {
                    *a += v as f64;
                }
            }
            let want: Vec<f64> = want.iter().map(|a| a / set.len() as f64).collect();
            assert_eq!(e[&id], want);
        }
    }
}

#[test]
fn seam_merging() {
    // tiles 0..=255 and 192..=447 on a 448-wide strip
    let grid_of = |l: &Layout| plan_tiles(l.width, l.height, 256, 64).unwrap();
    let core = Layout::new(128, 448, vec![disc([60.0, 60.0], 8.0)]);
    assert_eq!(grid_of(&core).tiles.len(), 2);
    assert_eq!(oracle_run(&core, 256, 64, 1).records.len(), 1);

    let straddle = Layout::new(128, 448, vec![disc([60.0, 224.0], 9.0)]);
    let r = oracle_run(&straddle, 256, 64, 1);
    assert_eq!(r.records.len(), 1);
    assert_eq!(r.records[0].area(), straddle.area_of(0));

    let cut = Layout::new(128, 448, vec![disc([60.0, 254.0], 9.0)]);
    assert_eq!(oracle_run(&cut, 256, 64, 1).records.len(), 1);

    let adjacent = Layout::new(128, 448, vec![disc([40.0, 224.0], 8.0), disc([70.0, 224.0], 8.0)]);
    let r = oracle_run(&adjacent, 256, 64, 1);
    assert_eq!(r.records.len(), 2);
    assert_eq!(r.records[0].iou(&r.records[1]), 0.0);
}

#[test]
fn single_tile_equals_process_tile() {
    let layout = Layout::random(200, 180, 30, &LayoutParams::default(), 3);
    let r = oracle_run(&layout, 256, 64, 1);
    let pred = OraclePredictor::new(layout.clone(), BundleOptions::default());
    let t = process_tile(&layout.image_window((0, 0), 200, 180, 0), (0, 0), &pred, &PipelineConfig::default()).unwrap();
    assert_eq!(r.records, t.records);
}

#[test]
fn workers_and_tiling_agree() {
    let layout = Layout::random(1024, 1024, 700, &LayoutParams::default(), 4);
    let one = oracle_run(&layout, 256, 64, 1);
    let many = oracle_run(&layout, 256, 64, 8);
    assert_eq!(one.records, many.records);
    let big = oracle_run(&layout, 1024, 64, 1);
    let d = detection_scores(&match_centroids(&big.records, &one.records, 6.0));
    assert!(d.f1 >= 0.99, "{}", d.f1);
}

#[test]
fn failing_tile_aborts_the_run() {
    struct Broken;
    impl TilePredictor for Broken {
        fn predict(&self, _: &TensorF32, origin: (usize, usize)) -> cellvit::Result<cellvit::model::PredictionBundle> {
            Err(Error::InvalidConfig(format!("no prediction at {origin:?}")))
        }
        fn name(&self) -> String {
            "broken".into()
        }
    }
    let layout = Layout::new(300, 300, vec![]);
    let cfg = PipelineConfig { tile_size: 256, overlap: 64, ..Default::default() };
    let e = run_wsi(&SyntheticSource { layout, seed: 0 }, &Broken, &cfg).unwrap_err();
    assert!(matches!(e, Error::TileFailed { .. }));
}

fn one_record() -> NucleusRecord {
    let mut labels = vec![0u32; 100];
    for r in 2..=4 {
        for c in 3..=6 {
            labels[r * 10 + c] = 1;
        }
    }
    let classes = [(1, 3)].into_iter().collect();
    let mut rec = extract_records(&InstanceMap::from_raw(labels, 10, 10, &classes).unwrap()).remove(0);
    rec.embedding = Some(vec![0.5, -0.25, 1.125]);
    rec
}

#[test]
fn result_json_round_trip() {
    let empty = result_json(&[], 0.25, "m", false);
    let v: serde_json::Value = serde_json::from_str(&empty).unwrap();
    assert_eq!(v["nuclei"], serde_json::json!([]));

    let rec = one_record();
    let text = result_json(std::slice::from_ref(&rec), 0.25, "m", true);
    let doc = parse_result_json(&text).unwrap();
    assert_eq!(doc.mpp, 0.25);
    assert_eq!(doc.model, "m");
    let back = &doc.records[0];
    assert_eq!(back.id, rec.id);
    assert_eq!(back.class_id, 3);
    assert_eq!(back.bbox, rec.bbox);
    assert_eq!(back.centroid, rec.centroid);
    assert_eq!(back.contour, rec.contour);
    assert_eq!(back.embedding, rec.embedding);

    let layout = Layout::random(1024, 1024, 1000, &LayoutParams { touching: 0.0, ..Default::default() }, 5);
    let r = oracle_run(&layout, 512, 64, 2);
    assert!(r.records.len() > 900);
    let a = result_json(&r.records, r.mpp, &r.model, true);
    let b = result_json(&parse_result_json(&a).unwrap().records, r.mpp, &r.model, true);
    assert_eq!(a, b);
    let g = geojson_string(&r.records);
    assert_eq!(validate_geojson(&g).unwrap(), r.records.len());
    assert_eq!(geojson_string(&parse_result_json(&a).unwrap().records), g);
}

#[test]
fn geojson_rejects_broken_documents() {
    assert!(validate_geojson("{}").is_err());
    assert!(validate_geojson(r#"{"type":"FeatureCollection","features":[{"type":"Feature","geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[0,1]]]},"properties":{}}]}"#).is_err());
}

#[test]
fn directory_source_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::random(160, 160, 20, &LayoutParams::default(), 6);
    let synth = SyntheticSource { layout, seed: 1 };
    let grid = plan_tiles(160, 160, 128, 32).unwrap();
    let manifest = DirectorySource::write(dir.path(), &synth, &grid, 0.5).unwrap();
    let src = DirectorySource::open(&manifest).unwrap();
    assert_eq!(src.dimensions(), (160, 160));
    assert_eq!(src.manifest.mpp, 0.5);
    for &o in &grid.tiles {
        let (h, w) = grid.extent(o);
        assert_eq!(src.read_tile(o, h, w).unwrap(), synth.read_tile(o, h, w).unwrap());
    }

    let cfg = ModelConfig::tiny();
    let model = CellVit::random(cfg.clone(), 0).unwrap();
    let run = PipelineConfig { tile_size: 128, overlap: 32, ..Default::default() };
    let a = run_wsi(&src, &model, &run).unwrap();
    let b = run_wsi(&synth, &model, &run).unwrap();
    assert_eq!(a.records, b.records);
    let wrong = PipelineConfig { tile_size: 96, overlap: 32, ..Default::default() };
    assert!(matches!(run_wsi(&src, &model, &wrong), Err(Error::GridMismatch(_))));
}

//! Result JSON and GeoJSON writers with fixed key order and float format,
//! so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use super::WsiResult;
use crate::error::{Error, Result};
use crate::postproc::NucleusRecord;

pub const RESULT_SCHEMA: &str = "cellvit-result/1";

const CLASS_NAMES: [&str; 6] = ["Background", "Neoplastic", "Inflammatory", "Connective", "Dead", "Epithelial"];

/// Display name of a nucleus class id.
pub fn class_name(id: u32) -> String {
    match CLASS_NAMES.get(id as usize) {
        Some(n) if id > 0 => (*n).to_string(),
        _ if id == 0 => "Unknown".to_string(),
        _ => format!("Class {id}"),
    }
}

fn fixed(x: f64, places: usize) -> String {
    let s = format!("{x:.places$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialises")
}

/// Parsed or to-be-written result document.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultDoc {
    pub mpp: f64,
    pub model: String,
    pub records: Vec<NucleusRecord>,
}

/// Result JSON. Keys are sorted; centroids use 4 decimals, embeddings 6;
/// pixel coordinates in bbox and contour are integers; contours are closed.
pub fn result_json(records: &[NucleusRecord], mpp: f64, model: &str, include_embeddings: bool) -> String {
    let mut s = String::new();
    let _ = write!(s, "{{\"model\":{},\"mpp\":{},\"nuclei\":[", json_str(model), fixed(mpp, 4));
    for (i, r) in records.iter().enumerate() {
        s.push_str(if i == 0 { "\n" } else { ",\n" });
        let b = r.bbox;
        let _ = write!(
            s,
            "{{\"bbox\":[{},{},{},{}],\"centroid\":[{},{}],\"contour\":[",
            b[0],
            b[1],
            b[2],
            b[3],
            fixed(r.centroid[0], 4),
            fixed(r.centroid[1], 4)
        );
        let closed = r.contour.iter().chain(r.contour.first());
        for (k, p) in closed.enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "[{},{}]", p[0], p[1]);
        }
        s.push(']');
        if include_embeddings {
            if let Some(e) = &r.embedding {
                s.push_str(",\"embedding\":[");
                for (k, v) in e.iter().enumerate() {
                    if k > 0 {
                        s.push(',');
                    }
                    s.push_str(&fixed(*v, 6));
                }
                s.push(']');
            }
        }
        let _ = write!(s, ",\"id\":{},\"type\":{}}}", r.id, r.class_id);
    }
    if !records.is_empty() {
        s.push('\n');
    }
    let _ = writeln!(s, "],\"schema\":{}}}", json_str(RESULT_SCHEMA));
    s
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(format!("result json: {}", msg.into()))
}

fn as_f64(v: &Value, what: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| bad(format!("{what} is not a number")))
}

fn as_usize(v: &Value, what: &str) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| bad(format!("{what} is not a non-negative integer")))
}

fn arr<'a>(v: &'a Value, what: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| bad(format!("{what} is not an array")))
}

/// Reads a result JSON back. Pixel footprints are not part of the format,
/// so imported records have empty `runs`.
pub fn parse_result_json(text: &str) -> Result<ResultDoc> {
    let v: Value = serde_json::from_str(text)?;
    if v.get("schema").and_then(Value::as_str) != Some(RESULT_SCHEMA) {
        return Err(bad("missing or unknown schema"));
    }
    let mpp = as_f64(&v["mpp"], "mpp")?;
    let model = v["model"].as_str().ok_or_else(|| bad("model is not a string"))?.to_string();
    let mut records = Vec::new();
    for n in arr(&v["nuclei"], "nuclei")? {
        let b = arr(&n["bbox"], "bbox")?;
        if b.len() != 4 {
            return Err(bad("bbox needs 4 entries"));
        }
        let c = arr(&n["centroid"], "centroid")?;
        if c.len() != 2 {
            return Err(bad("centroid needs 2 entries"));
        }
        let mut contour = Vec::new();
        for p in arr(&n["contour"], "contour")? {
            let p = arr(p, "contour point")?;
            if p.len() != 2 {
                return Err(bad("contour point needs 2 entries"));
            }
            contour.push([as_usize(&p[0], "contour")?, as_usize(&p[1], "contour")?]);
        }
        if contour.len() > 1 && contour.first() == contour.last() {
            contour.pop();
        }
        let embedding = match n.get("embedding") {
            Some(e) => Some(arr(e, "embedding")?.iter().map(|x| as_f64(x, "embedding")).collect::<Result<_>>()?),
            None => None,
        };
        records.push(NucleusRecord {
            id: as_usize(&n["id"], "id")? as u32,
            class_id: as_usize(&n["type"], "type")? as u32,
            bbox: [
                as_usize(&b[0], "bbox")?,
                as_usize(&b[1], "bbox")?,
                as_usize(&b[2], "bbox")?,
                as_usize(&b[3], "bbox")?,
            ],
            centroid: [as_f64(&c[0], "centroid")?, as_f64(&c[1], "centroid")?],
            contour,
            embedding,
            provenance_tile: (0, 0),
            runs: Vec::new(),
        });
    }
    Ok(ResultDoc { mpp, model, records })
}

/// Exterior ring in (x = col, y = row) order, closed. Contours that do not
/// enclose area (single pixels, lines) become the ring around their pixel
/// bounding box. Orientation is counter-clockwise by the shoelace sign.
fn ring(r: &NucleusRecord) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = r.contour.iter().map(|p| [p[1] as f64, p[0] as f64]).collect();
    let area2: f64 = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    if pts.len() < 3 || area2 == 0.0 {
        let b = r.bbox;
        let (x0, y0, x1, y1) = (b[1] as f64 - 0.5, b[0] as f64 - 0.5, b[3] as f64 + 0.5, b[2] as f64 + 0.5);
        pts = vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
    } else if area2 < 0.0 {
        pts.reverse();
    }
    pts.push(pts[0]);
    pts
}

/// GeoJSON FeatureCollection with one Polygon per nucleus.
pub fn geojson_string(records: &[NucleusRecord]) -> String {
    let mut s = String::from("{\"features\":[");
    for (i, r) in records.iter().enumerate() {
        s.push_str(if i == 0 { "\n" } else { ",\n" });
        s.push_str("{\"geometry\":{\"coordinates\":[[");
        for (k, p) in ring(r).iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "[{},{}]", fixed(p[0], 4), fixed(p[1], 4));
        }
        let _ = write!(
            s,
            "]],\"type\":\"Polygon\"}},\"properties\":{{\"classification\":{{\"name\":{}}},\"id\":{},\"objectType\":\"detection\"}},\"type\":\"Feature\"}}",
            json_str(&class_name(r.class_id)),
            r.id
        );
    }
    if !records.is_empty() {
        s.push('\n');
    }
    s.push_str("],\"type\":\"FeatureCollection\"}\n");
    s
}

/// Structural RFC 7946 checks on a Polygon FeatureCollection: member types,
/// numeric positions, closed rings of at least four positions and
/// counter-clockwise exterior rings.
pub fn validate_geojson(text: &str) -> Result<usize> {
    let bad = |m: String| Error::InvalidConfig(format!("geojson: {m}"));
    let v: Value = serde_json::from_str(text)?;
    if v["type"] != "FeatureCollection" {
        return Err(bad("top level is not a FeatureCollection".into()));
    }
    let feats = v["features"].as_array().ok_or_else(|| bad("features is not an array".into()))?;
    for (i, f) in feats.iter().enumerate() {
        if f["type"] != "Feature" {
            return Err(bad(format!("feature {i} has wrong type")));
        }
        if !f["properties"].is_object() && !f["properties"].is_null() {
            return Err(bad(format!("feature {i} properties must be an object or null")));
        }
        let g = &f["geometry"];
        if g["type"] != "Polygon" {
            return Err(bad(format!("feature {i} geometry is not a Polygon")));
        }
        let rings = g["coordinates"].as_array().ok_or_else(|| bad(format!("feature {i} has no coordinates")))?;
        if rings.is_empty() {
            return Err(bad(format!("feature {i} has no rings")));
        }
        for (j, ring) in rings.iter().enumerate() {
            let pts = ring.as_array().ok_or_else(|| bad(format!("feature {i} ring {j} is not an array")))?;
            if pts.len() < 4 {
                return Err(bad(format!("feature {i} ring {j} has fewer than 4 positions")));
            }
            let mut xy = Vec::with_capacity(pts.len());
            for p in pts {
                let p = p.as_array().filter(|p| p.len() >= 2).ok_or_else(|| bad(format!("feature {i} bad position")))?;
                let x = p[0].as_f64().ok_or_else(|| bad(format!("feature {i} non-numeric position")))?;
                let y = p[1].as_f64().ok_or_else(|| bad(format!("feature {i} non-numeric position")))?;
                xy.push([x, y]);
            }
            if xy.first() != xy.last() {
                return Err(bad(format!("feature {i} ring {j} is not closed")));
            }
            let area2: f64 = xy.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum();
            if j == 0 && area2 <= 0.0 {
                return Err(bad(format!("feature {i} exterior ring is not counter-clockwise")));
            }
        }
    }
    Ok(feats.len())
}

pub fn export_json(result: &WsiResult, path: &Path, include_embeddings: bool) -> Result<()> {
    let text = result_json(&result.records, result.mpp, &result.model, include_embeddings);
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn export_geojson(result: &WsiResult, path: &Path) -> Result<()> {
    std::fs::write(path, geojson_string(&result.records)).map_err(|e| Error::io(path, e))
}

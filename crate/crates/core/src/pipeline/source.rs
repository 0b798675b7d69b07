use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TileGrid;
use crate::cvtf;
use crate::error::{Error, Result};
use crate::synth::Layout;
use crate::tensor::TensorF32;

/// Where tile pixels come from.
pub trait TileSource: Sync {
    /// (width, height) of the slide in pixels
    fn dimensions(&self) -> (usize, usize);

    /// RGB tile of `h` x `w` pixels at `origin` (row, col).
    fn read_tile(&self, origin: (usize, usize), h: usize, w: usize) -> Result<TensorF32>;

    /// Rejects a tiling the source cannot serve.
    fn check_grid(&self, _grid: &TileGrid) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTile {
    pub row: usize,
    pub col: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub wsi_width: usize,
    pub wsi_height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    pub mpp: f64,
    pub tiles: Vec<ManifestTile>,
}

/// Directory of pre-cut CVTF tiles named `r{row}_c{col}.raw` (pixel
/// origins) plus a JSON manifest.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    pub manifest: TileManifest,
    root: PathBuf,
    files: BTreeMap<(usize, usize), PathBuf>,
}

impl DirectorySource {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: TileManifest = serde_json::from_str(&text)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let files = manifest.tiles.iter().map(|t| ((t.row, t.col), root.join(&t.file))).collect();
        Ok(Self { manifest, root, files })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Cuts `source` along `grid` into `dir` and writes `manifest.json`.
    /// Returns the manifest path.
    pub fn write(dir: &Path, source: &dyn TileSource, grid: &TileGrid, mpp: f64) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tiles = Vec::with_capacity(grid.tiles.len());
        for &o in &grid.tiles {
            let (h, w) = grid.extent(o);
            let file = format!("r{}_c{}.raw", o.0, o.1);
            cvtf::write_tensor(&dir.join(&file), &source.read_tile(o, h, w)?)?;
            tiles.push(ManifestTile { row: o.0, col: o.1, file });
        }
        let manifest = TileManifest {
            wsi_width: grid.wsi_width,
            wsi_height: grid.wsi_height,
            tile_size: grid.tile_size,
            overlap: grid.overlap,
            mpp,
            tiles,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

impl TileSource for DirectorySource {
    fn dimensions(&self) -> (usize, usize) {
        (self.manifest.wsi_width, self.manifest.wsi_height)
    }

    fn read_tile(&self, origin: (usize, usize), h: usize, w: usize) -> Result<TensorF32> {
        let path = self
            .files
            .get(&origin)
            .ok_or_else(|| Error::GridMismatch(format!("no tile file for origin {origin:?}")))?;
        let t = cvtf::read_tensor(path)?;
        let (th, tw, _) = t.hwc()?;
        if (th, tw) != (h, w) {
            return Err(Error::shape(format!("{} is {th}x{tw}, expected {h}x{w}", path.display())));
        }
        Ok(t)
    }

    fn check_grid(&self, grid: &TileGrid) -> Result<()> {
        let m = &self.manifest;
        if (m.tile_size, m.overlap) != (grid.tile_size, grid.overlap) {
            return Err(Error::GridMismatch(format!(
                "manifest was cut with tile {} / overlap {}, run asks for {} / {}",
                m.tile_size, m.overlap, grid.tile_size, grid.overlap
            )));
        }
        if let Some(o) = grid.tiles.iter().find(|o| !self.files.contains_key(o)) {
            return Err(Error::GridMismatch(format!("manifest has no tile at {o:?}")));
        }
        Ok(())
    }
}

/// Renders tiles of a synthetic layout on demand.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub layout: Layout,
    pub seed: u64,
}

impl TileSource for SyntheticSource {
    fn dimensions(&self) -> (usize, usize) {
        (self.layout.width, self.layout.height)
    }

    fn read_tile(&self, origin: (usize, usize), h: usize, w: usize) -> Result<TensorF32> {
        Ok(self.layout.image_window(origin, h, w, self.seed))
    }
}

//! Oversampling weights that balance tissue types and nucleus classes, and a
//! seeded weighted sampler with replacement.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA_S: f64 = 0.85;

/// One training patch: tissue label and per-class nucleus presence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub tissue: usize,
    pub cells: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let idx = Self { entries };
        idx.validate()?;
        Ok(idx)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.entries.first() else {
            return Ok(());
        };
        let c = first.cells.len();
        for e in &self.entries {
            if e.cells.len() != c {
                return Err(Error::InvalidConfig(format!(
                    "entry {:?} has {} cell flags, expected {c}",
                    e.id,
                    e.cells.len()
                )));
            }
            if e.cells.iter().any(|&v| v > 1) {
                return Err(Error::InvalidConfig(format!("entry {:?}: cell flags must be 0 or 1", e.id)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let idx: DatasetIndex = serde_json::from_str(text)?;
        idx.validate()?;
        Ok(idx)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn n_train(&self) -> usize {
        self.entries.len()
    }

    pub fn num_cell_classes(&self) -> usize {
        self.entries.first().map_or(0, |e| e.cells.len())
    }

    /// Total number of (patch, class) presences.
    pub fn n_cell(&self) -> usize {
        self.entries.iter().map(|e| e.cells.iter().map(|&v| v as usize).sum::<usize>()).sum()
    }

    fn tissue_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.tissue).or_insert(0) += 1;
        }
        m
    }

    fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_cell_classes()];
        for e in &self.entries {
            for (k, &v) in e.cells.iter().enumerate() {
                counts[k] += v as usize;
            }
        }
        counts
    }
}

fn check_gamma(gamma_s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma_s) {
        return Err(Error::InvalidConfig(format!("gamma_s must lie in [0, 1], got {gamma_s}")));
    }
    Ok(())
}

fn check_index(index: &DatasetIndex, i: usize) -> Result<()> {
    if i >= index.n_train() {
        return Err(Error::IndexOutOfRange { index: i, len: index.n_train() });
    }
    Ok(())
}

fn tissue_weight_from(n_train: f64, members: f64, gamma_s: f64) -> f64 {
    n_train / (gamma_s * members + (1.0 - gamma_s) * n_train)
}

fn cell_weight_from(cells: &[u8], class_counts: &[usize], n_cell: f64, gamma_s: f64) -> f64 {
    let mut s = 0.0;
    for (j, &c) in cells.iter().enumerate() {
        if c == 1 {
            s += n_cell / (gamma_s * class_counts[j] as f64 + (1.0 - gamma_s) * n_cell);
        }
    }
    (1.0 - gamma_s) + gamma_s * s
}

pub fn tissue_weight(index: &DatasetIndex, i: usize, gamma_s: f64) -> Result<f64> {
    check_gamma(gamma_s)?;
    check_index(index, i)?;
    let t = index.entries[i].tissue;
    let members = index.entries.iter().filter(|e| e.tissue == t).count();
    Ok(tissue_weight_from(index.n_train() as f64, members as f64, gamma_s))
}

pub fn cell_weight(index: &DatasetIndex, i: usize, gamma_s: f64) -> Result<f64> {
    check_gamma(gamma_s)?;
    check_index(index, i)?;
    let counts = index.class_counts();
    Ok(cell_weight_from(&index.entries[i].cells, &counts, index.n_cell() as f64, gamma_s))
}

/// Per-patch sampling weight: tissue weight and cell weight, each divided by
/// its maximum over the index, summed.
pub fn sampling_weights(index: &DatasetIndex, gamma_s: f64) -> Result<Vec<f64>> {
    check_gamma(gamma_s)?;
    index.validate()?;
    let n_train = index.n_train() as f64;
    let n_cell = index.n_cell() as f64;
    let tissue = index.tissue_counts();
    let classes = index.class_counts();
    let wt: Vec<f64> = index
        .entries
        .iter()
        .map(|e| tissue_weight_from(n_train, tissue[&e.tissue] as f64, gamma_s))
        .collect();
    let wc: Vec<f64> = index
        .entries
        .iter()
        .map(|e| cell_weight_from(&e.cells, &classes, n_cell, gamma_s))
        .collect();
    let max_t = wt.iter().copied().fold(0.0, f64::max);
    let max_c = wc.iter().copied().fold(0.0, f64::max);
    if !(max_t > 0.0) {
        return Err(Error::DegenerateMax("tissue weight"));
    }
    if !(max_c > 0.0) {
        return Err(Error::DegenerateMax("cell weight"));
    }
    Ok(wt.iter().zip(&wc).map(|(t, c)| t / max_t + c / max_c).collect())
}

/// Draws `n_samples` indices i.i.d. proportional to `weights`.
pub fn draw_epoch(weights: &[f64], n_samples: usize, seed: u64) -> Result<Vec<usize>> {
    let mut sampler = EpochSampler::new(weights, seed)?;
    Ok(sampler.draw(n_samples))
}

/// Seeded alias-table sampler. One per worker.
pub struct EpochSampler {
    table: WeightedAliasIndex<f64>,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(weights: &[f64], seed: u64) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::DomainError("sampling weights must be finite and non-negative".into()));
        }
        let table = WeightedAliasIndex::new(weights.to_vec())
            .map_err(|e| Error::DomainError(format!("cannot build sampler: {e}")))?;
        Ok(Self { table, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn draw(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.table.sample(&mut self.rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, tissue: usize, cells: &[u8]) -> IndexEntry {
        IndexEntry { id: id.into(), tissue, cells: cells.to_vec() }
    }

    #[test]
    fn counts() {
        let idx = DatasetIndex::new(vec![entry("a", 0, &[1, 0, 1]), entry("b", 1, &[0, 0, 1])]).unwrap();
        assert_eq!(idx.n_train(), 2);
        assert_eq!(idx.n_cell(), 3);
    }

    #[test]
    fn ragged_cells_rejected() {
        assert!(DatasetIndex::new(vec![entry("a", 0, &[1, 0]), entry("b", 1, &[0])]).is_err());
    }

    #[test]
    fn empty_presence_at_full_strength_is_zero() {
        let idx = DatasetIndex::new(vec![entry("a", 0, &[0, 0]), entry("b", 0, &[1, 0])]).unwrap();
        assert_eq!(cell_weight(&idx, 0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn all_empty_presence_is_degenerate() {
        let idx = DatasetIndex::new(vec![entry("a", 0, &[0]), entry("b", 1, &[0])]).unwrap();
        assert!(matches!(sampling_weights(&idx, 1.0), Err(Error::DegenerateMax(_))));
    }

    #[test]
    fn out_of_range() {
        let idx = DatasetIndex::new(vec![entry("a", 0, &[1])]).unwrap();
        assert!(matches!(tissue_weight(&idx, 3, 0.5), Err(Error::IndexOutOfRange { .. })));
        assert!(tissue_weight(&idx, 0, 1.5).is_err());
    }
}

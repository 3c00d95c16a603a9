//! Raw dataset model, splitting, label statistics and windowed samples.

mod io;
mod split;
mod window;

pub use io::{read_dataset, read_manifest, write_dataset, write_manifest, CANONICAL_COLUMNS};
pub use split::{
    adjusted_split, distribution_similarity_score, label_distribution, sequential_split,
    split_counts, LabelDistribution, SplitConfig, SplitKind, SplitMethod, Splits,
};
pub use window::{build_windows, WindowedSample};

use crate::argmax;
use crate::error::{Error, Result};
use crate::geo::GeodeticPosition;

/// One timestamped record: positions, drone height, optimal beam and the
/// optional per-beam received power vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub seq_index: usize,
    pub sample_index: usize,
    /// BS position; its altitude is always 0.
    pub bs_pos: GeodeticPosition,
    /// UE position; its altitude equals `height_m`.
    pub ue_pos: GeodeticPosition,
    pub height_m: f64,
    /// 0-based optimal beam index.
    pub beam: usize,
    pub powers: Option<Vec<f64>>,
}

impl RawSample {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seq_index: usize,
        sample_index: usize,
        lat_bs: f64,
        lon_bs: f64,
        lat_ue: f64,
        lon_ue: f64,
        height_m: f64,
        beam: usize,
        powers: Option<Vec<f64>>,
    ) -> Result<Self> {
        if !(height_m >= 0.0) {
            return Err(Error::InvalidData(format!("height {height_m} must be >= 0")));
        }
        Ok(RawSample {
            seq_index,
            sample_index,
            bs_pos: GeodeticPosition::new(lat_bs, lon_bs, 0.0)?,
            ue_pos: GeodeticPosition::new(lat_ue, lon_ue, height_m)?,
            height_m,
            beam,
            powers,
        })
    }

    pub fn key(&self) -> (usize, usize) {
        (self.seq_index, self.sample_index)
    }

    fn validate(&self, codebook_size: usize) -> Result<()> {
        if self.beam >= codebook_size {
            return Err(Error::InvalidData(format!(
                "sample ({}, {}): beam {} outside codebook of size {codebook_size}",
                self.seq_index, self.sample_index, self.beam
            )));
        }
        if let Some(p) = &self.powers {
            if p.len() != codebook_size {
                return Err(Error::InvalidData(format!(
                    "sample ({}, {}): {} powers for codebook of size {codebook_size}",
                    self.seq_index,
                    self.sample_index,
                    p.len()
                )));
            }
            if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "sample ({}, {}): powers must be finite and nonnegative",
                    self.seq_index, self.sample_index
                )));
            }
            let best = argmax(p);
            if best != self.beam {
                return Err(Error::InvalidData(format!(
                    "sample ({}, {}): argmax(powers) = {best} but beam = {}",
                    self.seq_index, self.sample_index, self.beam
                )));
            }
        }
        Ok(())
    }
}

/// Samples sorted by `(seq_index, sample_index)` with strictly increasing keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    samples: Vec<RawSample>,
    codebook_size: usize,
}

impl RawDataset {
    pub fn new(samples: Vec<RawSample>, codebook_size: usize) -> Result<Self> {
        if codebook_size < 2 {
            return Err(Error::InvalidData("codebook size must be at least 2".into()));
        }
        for s in &samples {
            s.validate(codebook_size)?;
        }
        for pair in samples.windows(2) {
            if pair[0].key() >= pair[1].key() {
                return Err(Error::InvalidData(format!(
                    "samples not strictly ordered by (q, t): {:?} then {:?}",
                    pair[0].key(),
                    pair[1].key()
                )));
            }
        }
        Ok(RawDataset {
            samples,
            codebook_size,
        })
    }

    /// Ordered subset by index. Indices must be ascending.
    pub(crate) fn subset(&self, indices: &[usize]) -> RawDataset {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        RawDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            codebook_size: self.codebook_size,
        }
    }

    pub fn samples(&self) -> &[RawSample] {
        &self.samples
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_powers(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.powers.is_some())
    }

    pub fn ue_positions(&self) -> impl Iterator<Item = &GeodeticPosition> {
        self.samples.iter().map(|s| &s.ue_pos)
    }
}

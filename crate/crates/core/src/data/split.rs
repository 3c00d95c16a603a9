//! Sequential and label-balanced ("adjusted") train/val/test splitting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RawDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::InvalidConfig(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMethod {
    Sequential,
    Adjusted,
}

impl FromStr for SplitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(SplitMethod::Sequential),
            "adjusted" => Ok(SplitMethod::Adjusted),
            other => Err(Error::InvalidConfig(format!("unknown split method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub f_train: f64,
    pub f_val: f64,
    pub f_test: f64,
    /// Candidate chunk sizes as fractions of the dataset size.
    pub chunk_percentages: Vec<f64>,
    /// Chunk sizes below this are discarded.
    pub min_seq_len: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            f_train: 0.65,
            f_val: 0.15,
            f_test: 0.20,
            chunk_percentages: vec![0.01, 0.02, 0.05, 0.10, 0.20],
            // one full window: W + V with W = 8, V = 3
            min_seq_len: 11,
        }
    }
}

impl SplitConfig {
    pub fn with_ratios(f_train: f64, f_val: f64, f_test: f64) -> Self {
        SplitConfig {
            f_train,
            f_val,
            f_test,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.f_train, self.f_val, self.f_test];
        if fr.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::InvalidConfig("split fractions must be positive".into()));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions sum to {sum}, not 1")));
        }
        if self.chunk_percentages.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::InvalidConfig("chunk percentages must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Floor for train and val, remainder to test.
pub fn split_counts(n: usize, cfg: &SplitConfig) -> (usize, usize, usize) {
    // the epsilon absorbs representation error in products like 0.15 * 100
    let train = ((cfg.f_train * n as f64) + 1e-9).floor() as usize;
    let val = ((cfg.f_val * n as f64) + 1e-9).floor() as usize;
    let train = train.min(n);
    let val = val.min(n - train);
    (train, val, n - train - val)
}

/// Largest-remainder apportionment: every count is the floor or ceiling of
/// its exact share, leftovers go to the largest fractional parts (ties to
/// the earlier split).
fn apportion(n: usize, cfg: &SplitConfig) -> [usize; 3] {
    let exact = [cfg.f_train, cfg.f_val, cfg.f_test].map(|f| f * n as f64);
    let mut counts = exact.map(|e| (e + 1e-9).floor() as usize);
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelDistribution {
    pub counts: Vec<usize>,
    pub total: usize,
}

impl LabelDistribution {
    /// `counts / total`, all zeros for an empty distribution.
    pub fn probabilities(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|&c| c as f64 / self.total as f64)
            .collect()
    }
}

pub fn label_distribution(d: &RawDataset) -> LabelDistribution {
    let mut counts = vec![0; d.codebook_size()];
    for s in d.samples() {
        counts[s.beam] += 1;
    }
    LabelDistribution {
        counts,
        total: d.len(),
    }
}

fn distribution_of(labels: impl Iterator<Item = usize>, m: usize) -> LabelDistribution {
    let mut counts = vec![0; m];
    let mut total = 0;
    for b in labels {
        counts[b] += 1;
        total += 1;
    }
    LabelDistribution { counts, total }
}

/// Sum of L1 distances between the reference label distribution and each
/// split's distribution.
pub fn distribution_similarity_score(
    reference: &LabelDistribution,
    train: &LabelDistribution,
    val: &LabelDistribution,
    test: &LabelDistribution,
) -> f64 {
    let p = reference.probabilities();
    [train, val, test]
        .iter()
        .map(|d| {
            d.probabilities()
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum()
}

/// A train/val/test partition of a dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: RawDataset,
    pub val: RawDataset,
    pub test: RawDataset,
    /// Split of every input sample, aligned with the input order.
    pub assignment: Vec<SplitKind>,
    /// Winning chunk size for adjusted splitting.
    pub chunk_size: Option<usize>,
}

impl Splits {
    pub fn from_assignment(d: &RawDataset, assignment: Vec<SplitKind>) -> Result<Splits> {
        if assignment.len() != d.len() {
            return Err(Error::InvalidData(format!(
                "split assignment covers {} samples, dataset has {}",
                assignment.len(),
                d.len()
            )));
        }
        let pick = |k: SplitKind| -> Vec<usize> {
            assignment
                .iter()
                .enumerate()
                .filter(|(_, a)| **a == k)
                .map(|(i, _)| i)
                .collect()
        };
        Ok(Splits {
            train: d.subset(&pick(SplitKind::Train)),
            val: d.subset(&pick(SplitKind::Val)),
            test: d.subset(&pick(SplitKind::Test)),
            assignment,
            chunk_size: None,
        })
    }

    pub fn get(&self, kind: SplitKind) -> &RawDataset {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn similarity_score(&self, reference: &LabelDistribution) -> f64 {
        distribution_similarity_score(
            reference,
            &label_distribution(&self.train),
            &label_distribution(&self.val),
            &label_distribution(&self.test),
        )
    }
}

fn assign_block(out: &mut [SplitKind], cfg: &SplitConfig) {
    let (train, val, _) = split_counts(out.len(), cfg);
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = if i < train {
            SplitKind::Train
        } else if i < train + val {
            SplitKind::Val
        } else {
            SplitKind::Test
        };
    }
}

/// First `floor(f_train K)` samples to train, next `floor(f_val K)` to
/// validation, the rest to test.
pub fn sequential_split(d: &RawDataset, cfg: &SplitConfig) -> Result<Splits> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut assignment = vec![SplitKind::Train; d.len()];
    assign_block(&mut assignment, cfg);
    Splits::from_assignment(d, assignment)
}

fn candidate_chunk_sizes(n: usize, cfg: &SplitConfig) -> Vec<usize> {
    let mut sizes: Vec<usize> = cfg
        .chunk_percentages
        .iter()
        .map(|p| ((p * n as f64).round() as usize).max(1))
        .filter(|&c| c >= cfg.min_seq_len)
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
}

fn chunked_assignment(n: usize, chunk: usize, cfg: &SplitConfig) -> Vec<SplitKind> {
    let mut assignment = vec![SplitKind::Train; n];
    for block in assignment.chunks_mut(chunk) {
        assign_block(block, cfg);
    }
    assignment
}

/// Label-balanced splitting.
///
/// Stage one tries every candidate chunk size: the `(q, t)`-ordered stream is
/// cut into contiguous chunks, each chunk is split by the ratios, and the
/// chunking whose aggregate label distributions are closest (L1) to the
/// dataset's wins, ties going to the smaller chunk. Stage two regroups the
/// winner by label and re-splits every label group by the ratios. A group
/// lists its stage-one train samples first, then val, then test, each in
/// `(q, t)` order, so the re-split keeps the stage-one chunk structure where
/// the ratios allow. Labels with fewer than three samples go to train.
pub fn adjusted_split(d: &RawDataset, cfg: &SplitConfig) -> Result<Splits> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = d.len();
    let m = d.codebook_size();
    let reference = label_distribution(d);
    let sizes = candidate_chunk_sizes(n, cfg);
    if sizes.is_empty() {
        return Err(Error::NoValidChunkSize {
            min_seq_len: cfg.min_seq_len,
        });
    }

    let labels: Vec<usize> = d.samples().iter().map(|s| s.beam).collect();
    let mut best: Option<(f64, usize, Vec<SplitKind>)> = None;
    for &c in &sizes {
        let assignment = chunked_assignment(n, c, cfg);
        let dist = |k: SplitKind| {
            distribution_of(
                labels
                    .iter()
                    .zip(&assignment)
                    .filter(|(_, a)| **a == k)
                    .map(|(b, _)| *b),
                m,
            )
        };
        let score = distribution_similarity_score(
            &reference,
            &dist(SplitKind::Train),
            &dist(SplitKind::Val),
            &dist(SplitKind::Test),
        );
        log::debug!("chunk size {c}: similarity score {score:.6}");
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, c, assignment));
        }
    }
    let (_, chunk, stage_one) = best.expect("at least one candidate");

    let mut assignment = stage_one.clone();
    for label in 0..m {
        let group: Vec<usize> = SplitKind::ALL
            .iter()
            .flat_map(|k| {
                let stage_one = &stage_one;
                let labels = &labels;
                (0..n).filter(move |&i| labels[i] == label && stage_one[i] == *k)
            })
            .collect();
        if group.is_empty() {
            continue;
        }
        if group.len() < 3 {
            log::warn!(
                "label {label} has only {} samples; assigning all to train",
                group.len()
            );
            for &i in &group {
                assignment[i] = SplitKind::Train;
            }
            continue;
        }
        let [train, val, _] = apportion(group.len(), cfg);
        for (pos, &i) in group.iter().enumerate() {
            assignment[i] = if pos < train {
                SplitKind::Train
            } else if pos < train + val {
                SplitKind::Val
            } else {
                SplitKind::Test
            };
        }
    }

    let mut splits = Splits::from_assignment(d, assignment)?;
    splits.chunk_size = Some(chunk);
    Ok(splits)
}

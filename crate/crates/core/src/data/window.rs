use super::RawDataset;
use crate::error::{Error, Result};
use crate::geo::{make_feature, FeatureVector, NormalizationBounds};

/// Model input window paired with the current and future beam labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    features: Vec<FeatureVector>,
    labels: Vec<usize>,
    powers: Option<Vec<Vec<f64>>>,
    origin: (usize, usize),
    padded: usize,
}

impl WindowedSample {
    /// Checks that zero rows form a leading prefix and that label powers,
    /// when present, line up with the labels.
    pub fn new(
        features: Vec<FeatureVector>,
        labels: Vec<usize>,
        powers: Option<Vec<Vec<f64>>>,
        origin: (usize, usize),
    ) -> Result<Self> {
        if features.is_empty() || labels.is_empty() {
            return Err(Error::InvalidData("window needs at least one row and label".into()));
        }
        let padded = features.iter().take_while(|f| f.is_zero()).count();
        if padded == features.len() || features[padded..].iter().any(|f| f.is_zero()) {
            return Err(Error::InvalidData(format!(
                "window at {origin:?}: zero rows must be a strict leading prefix"
            )));
        }
        if let Some(p) = &powers {
            if p.len() != labels.len() {
                return Err(Error::InvalidData(format!(
                    "window at {origin:?}: {} power vectors for {} labels",
                    p.len(),
                    labels.len()
                )));
            }
        }
        Ok(WindowedSample {
            features,
            labels,
            powers,
            origin,
            padded,
        })
    }

    /// Feature rows, oldest first.
    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    /// Beam labels for `t, t+1, .., t+V`.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-beam powers for each labelled step, when the dataset has them.
    pub fn powers(&self) -> Option<&[Vec<f64>]> {
        self.powers.as_deref()
    }

    /// `(q, t)` of the anchor sample.
    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }

    /// Number of leading zero rows.
    pub fn padded_rows(&self) -> usize {
        self.padded
    }
}

/// Turn a dataset into `(window, labels)` pairs.
///
/// Every sample `t` followed by `V` consecutive samples of the same
/// sequence anchors one window. The window holds the features of the up to
/// `W` consecutive same-sequence samples ending at `t`, left-padded with
/// zero rows when fewer than `W` exist. Anchors without `V` consecutive
/// successors emit nothing.
pub fn build_windows(
    d: &RawDataset,
    bounds: &NormalizationBounds,
    window: usize,
    horizon: usize,
) -> Result<Vec<WindowedSample>> {
    if window == 0 {
        return Err(Error::InvalidConfig("window length must be at least 1".into()));
    }
    let samples = d.samples();
    let n = samples.len();
    let with_powers = d.has_powers();

    // run_start[i]: first index of the consecutive same-q run containing i
    let mut run_start = vec![0; n];
    for i in 1..n {
        let (prev, cur) = (&samples[i - 1], &samples[i]);
        run_start[i] = if cur.seq_index == prev.seq_index
            && cur.sample_index == prev.sample_index + 1
        {
            run_start[i - 1]
        } else {
            i
        };
    }

    let mut features: Vec<Option<FeatureVector>> = vec![None; n];
    let mut out = Vec::new();
    for i in 0..n {
        let last = i + horizon;
        // successors are consecutive iff they share the run and the indices line up
        if last >= n || run_start[last] != run_start[i] {
            continue;
        }
        let first = i + 1 - window.min(i - run_start[i] + 1);
        let mut rows = vec![FeatureVector::ZERO; window - (i + 1 - first)];
        for j in first..=i {
            let f = match features[j] {
                Some(f) => f,
                None => {
                    let s = &samples[j];
                    let f = make_feature(&s.ue_pos, &s.bs_pos, bounds)?;
                    features[j] = Some(f);
                    f
                }
            };
            rows.push(f);
        }
        let labels = samples[i..=last].iter().map(|s| s.beam).collect();
        let powers = with_powers.then(|| {
            samples[i..=last]
                .iter()
                .map(|s| s.powers.clone().expect("checked by has_powers"))
                .collect()
        });
        out.push(WindowedSample::new(rows, labels, powers, samples[i].key())?);
    }
    Ok(out)
}

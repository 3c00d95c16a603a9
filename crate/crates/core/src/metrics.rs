//! Top-K accuracy, power loss, overhead savings and power-loss reliability.
//!
//! Every metric is computed per prediction step. Power metrics need the
//! per-beam received power of each labelled sample.

use std::fmt::Write as _;

use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::nn::ScoreSequence;
use crate::scalar::Scalar;

/// Reliability targets for which overhead savings are reported.
pub const OVERHEAD_TARGETS: [f64; 6] = [0.5, 0.7, 0.8, 0.9, 0.95, 0.99];
/// Thresholds (dB) for which reliability is reported in the summary.
pub const RELIABILITY_THRESHOLDS_DB: [f64; 2] = [1.0, 3.0];

/// One prediction: its step, the true beam, the model's scores and
/// optionally the per-beam powers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub step: usize,
    pub true_beam: usize,
    pub scores: Vec<f64>,
    pub powers: Option<Vec<f64>>,
}

impl EvalSample {
    pub fn new(step: usize, true_beam: usize, scores: Vec<f64>, powers: Option<Vec<f64>>) -> Result<Self> {
        let m = scores.len();
        if true_beam >= m {
            return Err(Error::InvalidData(format!("true beam {true_beam} outside {m} scores")));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidData(format!("scores sum to {sum}, not 1")));
        }
        if let Some(p) = &powers {
            if p.len() != m {
                return Err(Error::shape("eval sample powers", m, p.len()));
            }
        }
        Ok(EvalSample {
            step,
            true_beam,
            scores,
            powers,
        })
    }

    /// Top-1 prediction, ties to the lowest index.
    pub fn predicted(&self) -> usize {
        crate::argmax(&self.scores)
    }

    /// 1-based position of the true beam when beams are ranked by
    /// descending score with ties broken by lower index.
    pub fn rank_of_truth(&self) -> usize {
        let s = self.scores[self.true_beam];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|(j, v)| **v > s || (**v == s && *j < self.true_beam))
            .count()
    }
}

/// Noise power used in the power-loss offset.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NoiseFloor {
    /// Smallest power in the sample's own vector.
    #[default]
    PerSample,
    /// One scenario-wide value.
    Global(f64),
}

fn check_k(samples: &[EvalSample], k: usize) -> Result<usize> {
    let first = samples.first().ok_or(Error::EmptySet)?;
    let m = first.scores.len();
    if k < 1 || k > m {
        return Err(Error::InvalidConfig(format!("K = {k} outside [1, {m}]")));
    }
    Ok(m)
}

/// Fraction of samples whose true beam is among the `k` best-scoring beams.
pub fn top_k_accuracy(samples: &[EvalSample], k: usize) -> Result<f64> {
    check_k(samples, k)?;
    let hits = samples.iter().filter(|s| s.rank_of_truth() <= k).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Top-K accuracy for every `K` in `1..=M`.
pub fn accuracy_curve(samples: &[EvalSample]) -> Result<Vec<f64>> {
    let m = check_k(samples, 1)?;
    let mut hist = vec![0usize; m + 1];
    for s in samples {
        hist[s.rank_of_truth()] += 1;
    }
    let mut acc = 0;
    Ok((1..=m)
        .map(|k| {
            acc += hist[k];
            acc as f64 / samples.len() as f64
        })
        .collect())
}

fn power_ratio(s: &EvalSample, floor: NoiseFloor) -> Result<f64> {
    let p = s.powers.as_ref().ok_or(Error::MissingPowers)?;
    let pn = match floor {
        NoiseFloor::PerSample => p.iter().copied().fold(f64::INFINITY, f64::min),
        NoiseFloor::Global(v) => v,
    };
    let best = p[s.true_beam] - 0.5 * pn;
    let got = p[s.predicted()] - 0.5 * pn;
    Ok(best / got)
}

/// `10 log10((P* - Pn/2) / (P_hat - Pn/2))` for one sample.
pub fn per_sample_power_loss(s: &EvalSample) -> Result<f64> {
    per_sample_power_loss_with(s, NoiseFloor::PerSample)
}

pub fn per_sample_power_loss_with(s: &EvalSample, floor: NoiseFloor) -> Result<f64> {
    Ok(10.0 * power_ratio(s, floor)?.log10())
}

/// Power loss in dB of the mean power ratio over all samples.
pub fn average_power_loss(samples: &[EvalSample]) -> Result<f64> {
    average_power_loss_with(samples, NoiseFloor::PerSample)
}

pub fn average_power_loss_with(samples: &[EvalSample], floor: NoiseFloor) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sum = 0.0;
    for s in samples {
        sum += power_ratio(s, floor)?;
    }
    Ok(10.0 * (sum / samples.len() as f64).log10())
}

/// Smallest candidate-set size reaching `target` Top-K accuracy (`M` when
/// none does) and the resulting savings `1 - b/M`.
pub fn overhead_savings(samples: &[EvalSample], target: f64) -> Result<(usize, f64)> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidConfig(format!("reliability target {target} outside (0, 1]")));
    }
    let curve = accuracy_curve(samples)?;
    let m = curve.len();
    let b = curve.iter().position(|a| *a >= target).map_or(m, |i| i + 1);
    Ok((b, 1.0 - b as f64 / m as f64))
}

/// Fraction of samples whose power loss is at most `threshold_db`.
pub fn power_loss_reliability(samples: &[EvalSample], threshold_db: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut ok = 0;
    for s in samples {
        if per_sample_power_loss(s)? <= threshold_db {
            ok += 1;
        }
    }
    Ok(ok as f64 / samples.len() as f64)
}

/// Reliability at each threshold, from one pass of per-sample losses.
pub fn reliability_curve(samples: &[EvalSample], thresholds_db: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let losses = samples.iter().map(per_sample_power_loss).collect::<Result<Vec<_>>>()?;
    Ok(thresholds_db
        .iter()
        .map(|t| losses.iter().filter(|l| **l <= *t).count() as f64 / losses.len() as f64)
        .collect())
}

/// Per-step evaluation samples from model scores and the windows they came from.
pub fn eval_samples<T: Scalar>(
    scores: &[ScoreSequence<T>],
    windows: &[WindowedSample],
) -> Result<Vec<Vec<EvalSample>>> {
    if scores.len() != windows.len() {
        return Err(Error::shape("eval_samples", windows.len(), scores.len()));
    }
    let steps = scores.first().map_or(0, |s| s.steps());
    let mut out = vec![Vec::with_capacity(scores.len()); steps];
    for (s, w) in scores.iter().zip(windows) {
        if s.steps() != steps || w.labels().len() != steps {
            return Err(Error::shape("eval_samples", steps, w.labels().len()));
        }
        for (v, row) in s.rows().enumerate() {
            let mut probs: Vec<f64> = row.iter().map(|p| p.as_f64()).collect();
            // renormalize after widening so 32-bit rows pass the sum check
            let sum: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= sum);
            let powers = w.powers().map(|p| p[v].clone());
            out[v].push(EvalSample::new(v, w.labels()[v], probs, powers)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadPoint {
    pub target: f64,
    pub b_min: usize,
    pub savings: f64,
}

/// All metrics for one evaluated split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub num_beams: usize,
    pub samples: usize,
    /// `top_k[v][k - 1]`.
    pub top_k: Vec<Vec<f64>>,
    /// Per-step mean power loss (dB); `None` without power vectors.
    pub mean_pl_db: Option<Vec<f64>>,
    /// `reliability[v][i]` at `RELIABILITY_THRESHOLDS_DB[i]`.
    pub reliability: Option<Vec<Vec<f64>>>,
    /// Per step, one point per `OVERHEAD_TARGETS` entry.
    pub overhead: Vec<Vec<OverheadPoint>>,
    /// Over all steps pooled.
    pub overhead_pooled: Vec<OverheadPoint>,
    pub params: usize,
    pub size_bytes: usize,
}

fn overhead_points(samples: &[EvalSample]) -> Result<Vec<OverheadPoint>> {
    OVERHEAD_TARGETS
        .iter()
        .map(|&target| {
            let (b_min, savings) = overhead_savings(samples, target)?;
            Ok(OverheadPoint {
                target,
                b_min,
                savings,
            })
        })
        .collect()
}

fn pct(target: f64) -> u32 {
    (target * 100.0).round() as u32
}

impl MetricsReport {
    /// `per_step[v]` holds the samples of step `v`.
    pub fn compute(per_step: &[Vec<EvalSample>], params: (usize, usize)) -> Result<Self> {
        if per_step.is_empty() || per_step.iter().any(|s| s.is_empty()) {
            return Err(Error::EmptySet);
        }
        let num_beams = per_step[0][0].scores.len();
        let top_k = per_step.iter().map(|s| accuracy_curve(s)).collect::<Result<Vec<_>>>()?;
        let with_powers = per_step.iter().flatten().all(|s| s.powers.is_some());
        let (mean_pl_db, reliability) = if with_powers {
            let pl = per_step.iter().map(|s| average_power_loss(s)).collect::<Result<Vec<_>>>()?;
            let rel = per_step
                .iter()
                .map(|s| reliability_curve(s, &RELIABILITY_THRESHOLDS_DB))
                .collect::<Result<Vec<_>>>()?;
            (Some(pl), Some(rel))
        } else {
            (None, None)
        };
        let overhead = per_step.iter().map(|s| overhead_points(s)).collect::<Result<Vec<_>>>()?;
        let pooled: Vec<EvalSample> = per_step.iter().flatten().cloned().collect();
        Ok(MetricsReport {
            num_beams,
            samples: per_step[0].len(),
            top_k,
            mean_pl_db,
            reliability,
            overhead,
            overhead_pooled: overhead_points(&pooled)?,
            params: params.0,
            size_bytes: params.1,
        })
    }

    pub fn steps(&self) -> usize {
        self.top_k.len()
    }

    pub fn top1(&self, step: usize) -> f64 {
        self.top_k[step][0]
    }

    /// `key value` lines with fixed key names, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: String, v: String| {
            let _ = writeln!(out, "{k} {v}");
        };
        line("samples".into(), self.samples.to_string());
        line("num_beams".into(), self.num_beams.to_string());
        for (v, curve) in self.top_k.iter().enumerate() {
            for (k, a) in curve.iter().enumerate() {
                line(format!("top{}_acc.step{v}", k + 1), a.to_string());
            }
        }
        match &self.mean_pl_db {
            Some(pl) => {
                for (v, x) in pl.iter().enumerate() {
                    line(format!("mean_pl_db.step{v}"), x.to_string());
                }
            }
            None => line("mean_pl_db".into(), "absent".into()),
        }
        match &self.reliability {
            Some(rel) => {
                for (v, r) in rel.iter().enumerate() {
                    for (t, x) in RELIABILITY_THRESHOLDS_DB.iter().zip(r) {
                        line(format!("reliability.{t}db.step{v}"), x.to_string());
                    }
                }
            }
            None => line("reliability".into(), "absent".into()),
        }
        for p in &self.overhead_pooled {
            line(format!("overhead.b{}", pct(p.target)), p.b_min.to_string());
            line(format!("overhead.savings{}", pct(p.target)), p.savings.to_string());
        }
        for (v, pts) in self.overhead.iter().enumerate() {
            for p in pts {
                line(format!("overhead.b{}.step{v}", pct(p.target)), p.b_min.to_string());
                line(format!("overhead.savings{}.step{v}", pct(p.target)), p.savings.to_string());
            }
        }
        line("model.params".into(), self.params.to_string());
        line("model.size_bytes".into(), self.size_bytes.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(m: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        v
    }

    fn random_sample(rng: &mut ChaCha8Rng, m: usize) -> EvalSample {
        // coarse values make ties common
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(1..6) as f64).collect();
        let sum: f64 = raw.iter().sum();
        let scores = raw.iter().map(|v| v / sum).collect();
        let powers: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let best = crate::argmax(&powers);
        let true_beam = if rng.random_bool(0.8) { best } else { rng.random_range(0..m) };
        EvalSample::new(0, true_beam, scores, Some(powers)).unwrap()
    }

    /// Full stable sort by descending score; lower index first among equals.
    fn brute_top_k(samples: &[EvalSample], k: usize) -> f64 {
        let hits = samples
            .iter()
            .filter(|s| {
                let mut idx: Vec<usize> = (0..s.scores.len()).collect();
                idx.sort_by(|a, b| s.scores[*b].partial_cmp(&s.scores[*a]).unwrap().then(a.cmp(b)));
                idx[..k].contains(&s.true_beam)
            })
            .count();
        hits as f64 / samples.len() as f64
    }

    #[test]
    fn top_k_examples() {
        let all = vec![EvalSample::new(0, 3, one_hot(8, 3), None).unwrap(); 4];
        assert_eq!(top_k_accuracy(&all, 1).unwrap(), 1.0);
        let u = vec![1.0 / 8.0; 8];
        let first = EvalSample::new(0, 0, u.clone(), None).unwrap();
        let last = EvalSample::new(0, 7, u, None).unwrap();
        assert_eq!(top_k_accuracy(&[first], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(std::slice::from_ref(&last), 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&[last], 8).unwrap(), 1.0);
        assert!(matches!(top_k_accuracy(&[], 1), Err(Error::EmptySet)));
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = (0..500).map(|_| random_sample(&mut rng, 16)).collect();
        let curve = accuracy_curve(&samples).unwrap();
        for k in 1..=16 {
            let want = brute_top_k(&samples, k);
            assert_eq!(top_k_accuracy(&samples, k).unwrap(), want);
            assert_eq!(curve[k - 1], want);
        }
        assert_eq!(curve[15], 1.0);
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn power_loss_hand_case() {
        // P* = 4, P_hat = 2, Pn = 2: 10 log10((4 - 1) / (2 - 1))
        let s = EvalSample::new(0, 0, vec![0.2, 0.8], Some(vec![4.0, 2.0])).unwrap();
        let want = 10.0 * 3f64.log10();
        assert!((per_sample_power_loss(&s).unwrap() - want).abs() < 1e-12);
        assert!((average_power_loss(&[s]).unwrap() - 4.771212547196624).abs() < 1e-9);
    }

    #[test]
    fn power_loss_mean_of_ratios() {
        let a = EvalSample::new(0, 0, vec![0.2, 0.8], Some(vec![4.0, 2.0])).unwrap();
        let b = EvalSample::new(0, 1, vec![0.2, 0.8], Some(vec![1.0, 5.0])).unwrap();
        // ratios 3 and 1
        let want = 10.0 * 2f64.log10();
        assert!((average_power_loss(&[a, b.clone()]).unwrap() - want).abs() < 1e-9);
        assert_eq!(average_power_loss(&[b]).unwrap(), 0.0);
    }

    #[test]
    fn predicted_at_noise_floor_is_finite() {
        let s = EvalSample::new(0, 0, vec![0.1, 0.9, 0.0], Some(vec![3.0, 0.5, 1.0])).unwrap();
        let l = per_sample_power_loss(&s).unwrap();
        assert!(l.is_finite());
        assert!((l - 10.0 * (2.75f64 / 0.25).log10()).abs() < 1e-12);
    }

    #[test]
    fn global_noise_floor() {
        let s = EvalSample::new(0, 0, vec![0.2, 0.8], Some(vec![4.0, 2.0])).unwrap();
        let l = per_sample_power_loss_with(&s, NoiseFloor::Global(0.0)).unwrap();
        assert!((l - 10.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn missing_powers() {
        let s = EvalSample::new(0, 0, vec![0.5, 0.5], None).unwrap();
        assert!(matches!(per_sample_power_loss(&s), Err(Error::MissingPowers)));
        assert!(matches!(average_power_loss(&[s.clone()]), Err(Error::MissingPowers)));
        assert!(matches!(power_loss_reliability(&[s], 1.0), Err(Error::MissingPowers)));
    }

    #[test]
    fn overhead_examples() {
        let m = 32;
        let perfect: Vec<_> = (0..10).map(|i| EvalSample::new(0, i, one_hot(m, i), None).unwrap()).collect();
        for t in [0.5, 0.9, 1.0] {
            let (b, s) = overhead_savings(&perfect, t).unwrap();
            assert_eq!(b, 1);
            assert_eq!(s, 1.0 - 1.0 / 32.0);
        }
        // truth always ranked second
        let mut second = one_hot(m, 0).iter().map(|v| v * 0.6).collect::<Vec<_>>();
        second[1] = 0.4;
        let s = vec![EvalSample::new(0, 1, second, None).unwrap()];
        assert_eq!(overhead_savings(&s, 0.9).unwrap(), (2, 0.9375));
        assert!(overhead_savings(&s, 0.0).is_err());
    }

    #[test]
    fn overhead_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<_> = (0..500).map(|_| random_sample(&mut rng, 12)).collect();
        for t in [0.1, 0.3, 0.5, 0.75, 0.9, 0.99, 1.0] {
            let b = (1..=12).find(|&k| brute_top_k(&samples, k) >= t).unwrap_or(12);
            assert_eq!(overhead_savings(&samples, t).unwrap(), (b, 1.0 - b as f64 / 12.0));
        }
    }

    #[test]
    fn reliability_matches_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<_> = (0..500).map(|_| random_sample(&mut rng, 10)).collect();
        let thresholds = [0.0, 0.5, 1.0, 3.0, 10.0, 100.0];
        let curve = reliability_curve(&samples, &thresholds).unwrap();
        for (t, c) in thresholds.iter().zip(&curve) {
            let count = samples
                .iter()
                .filter(|s| {
                    let p = s.powers.as_ref().unwrap();
                    let pn = p.iter().cloned().fold(f64::INFINITY, f64::min);
                    let pred = crate::argmax(&s.scores);
                    10.0 * ((p[s.true_beam] - pn / 2.0) / (p[pred] - pn / 2.0)).log10() <= *t
                })
                .count();
            let want = count as f64 / 500.0;
            assert_eq!(power_loss_reliability(&samples, *t).unwrap(), want);
            assert_eq!(*c, want);
        }
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn all_correct_reliability_is_one() {
        let s = EvalSample::new(0, 1, vec![0.1, 0.9], Some(vec![0.2, 1.0])).unwrap();
        assert_eq!(power_loss_reliability(&[s], 1.0).unwrap(), 1.0);
    }

    #[test]
    fn report_keys() {
        let s0 = EvalSample::new(0, 1, vec![0.1, 0.9], Some(vec![0.2, 1.0])).unwrap();
        let s1 = EvalSample::new(1, 0, vec![0.1, 0.9], Some(vec![0.8, 0.5])).unwrap();
        let r = MetricsReport::compute(&[vec![s0], vec![s1]], (6, 24)).unwrap();
        let text = r.to_text();
        for key in [
            "top1_acc.step0 1",
            "top1_acc.step1 0",
            "top2_acc.step1 1",
            "mean_pl_db.step0 0",
            "reliability.1db.step1 0",
            "reliability.3db.step0 1",
            "overhead.b90 2",
            "overhead.b90.step0 1",
            "model.params 6",
        ] {
            assert!(text.lines().any(|l| l == key), "missing {key} in\n{text}");
        }
    }
}

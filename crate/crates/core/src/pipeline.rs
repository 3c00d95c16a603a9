//! Training and evaluation orchestration.
//!
//! `train` splits the dataset, fits normalization on the training split
//! only, windows every split, runs Adam over seeded shuffles and keeps the
//! epoch with the lowest validation loss. `evaluate` scores a checkpoint on
//! any dataset.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    adjusted_split, build_windows, sequential_split, write_manifest, RawDataset, SplitConfig, SplitKind,
    SplitMethod, Splits, WindowedSample,
};
use crate::error::{Error, Result};
use crate::geo::{fit_bounds, NormalizationBounds};
use crate::metrics::{eval_samples, EvalSample, MetricsReport};
use crate::nn::{
    batch_input, batch_labels, count_params, lr_schedule, Adam, Checkpoint, DecoderInit, HyperParams, Mode,
    ModelConfig, ModelParams, ScoreSequence,
};
use crate::scalar::Scalar;

/// Which epoch's weights a run returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Lowest validation loss; ties go to the earlier epoch.
    #[default]
    Best,
    Final,
}

impl FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" => Ok(Selection::Best),
            "final" => Ok(Selection::Final),
            _ => Err(Error::InvalidConfig(format!("selection must be best or final, got {s:?}"))),
        }
    }
}

/// Samples the normalization bounds are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundsFit {
    #[default]
    Train,
    /// Every sample, test included. Leaks test positions into the features.
    All,
}

impl FromStr for BoundsFit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(BoundsFit::Train),
            "all" => Ok(BoundsFit::All),
            _ => Err(Error::InvalidConfig(format!("bounds must be train or all, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub split_method: SplitMethod,
    pub split: SplitConfig,
    pub hyper: HyperParams,
    pub decoder_h0: DecoderInit,
    pub select: Selection,
    pub bounds: BoundsFit,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            split_method: SplitMethod::Adjusted,
            split: SplitConfig::default(),
            hyper: HyperParams::default(),
            decoder_h0: DecoderInit::Context,
            select: Selection::Best,
            bounds: BoundsFit::Train,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_beams: self.hyper.num_beams,
            window: self.hyper.window,
            horizon: self.hyper.horizon,
            decoder_h0: self.decoder_h0,
            ..ModelConfig::default()
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation Top-1 per prediction step.
    pub val_top1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub selection: Selection,
    pub seed: u64,
    pub config_hash: String,
    pub split_method: SplitMethod,
    pub chunk_size: Option<usize>,
    /// Samples per split, train / val / test.
    pub split_sizes: [usize; 3],
    /// Windows per split, train / val / test.
    pub window_counts: [usize; 3],
    pub params: usize,
    /// Seconds; kept out of `to_text` so reports stay reproducible.
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch - 1]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: String, v: String| {
            let _ = writeln!(out, "{k} {v}");
        };
        line("seed".into(), self.seed.to_string());
        line("config_hash".into(), self.config_hash.clone());
        line("split.method".into(), format!("{:?}", self.split_method).to_lowercase());
        line(
            "split.chunk_size".into(),
            self.chunk_size.map_or("none".into(), |c| c.to_string()),
        );
        for (i, k) in SplitKind::ALL.iter().enumerate() {
            line(format!("split.{k}.samples"), self.split_sizes[i].to_string());
            line(format!("split.{k}.windows"), self.window_counts[i].to_string());
        }
        line("model.params".into(), self.params.to_string());
        line(
            "selection.rule".into(),
            match self.selection {
                Selection::Best => "min_val_loss".into(),
                Selection::Final => "final_epoch".into(),
            },
        );
        line("selection.epoch".into(), self.selected_epoch.to_string());
        for e in &self.epochs {
            line(format!("epoch{}.lr", e.epoch), e.lr.to_string());
            line(format!("epoch{}.train_loss", e.epoch), e.train_loss.to_string());
            line(format!("epoch{}.val_loss", e.epoch), e.val_loss.to_string());
            for (v, a) in e.val_top1.iter().enumerate() {
                line(format!("epoch{}.val_top1.step{v}", e.epoch), a.to_string());
            }
        }
        out
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub report: TrainReport,
    pub splits: Splits,
}

pub fn split_dataset(d: &RawDataset, method: SplitMethod, cfg: &SplitConfig) -> Result<Splits> {
    match method {
        SplitMethod::Sequential => sequential_split(d, cfg),
        SplitMethod::Adjusted => adjusted_split(d, cfg),
    }
}

/// Eval-mode scores for `windows`, `batch` at a time.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    windows: &[WindowedSample],
    batch: usize,
) -> Result<Vec<ScoreSequence<T>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch.max(1)) {
        let refs: Vec<&WindowedSample> = chunk.iter().collect();
        out.extend(params.predict(&refs)?);
    }
    Ok(out)
}

/// Mean per-sample loss and per-step Top-1 in eval mode.
fn validate_epoch<T: Scalar>(
    params: &ModelParams<T>,
    windows: &[WindowedSample],
    batch: usize,
) -> Result<(f64, Vec<f64>)> {
    let steps = params.config().steps();
    let mut loss = 0.0;
    let mut hits = vec![0usize; steps];
    for chunk in windows.chunks(batch.max(1)) {
        let refs: Vec<&WindowedSample> = chunk.iter().collect();
        let x = batch_input(&refs, params.config().window)?;
        let labels = batch_labels(&refs, steps)?;
        let f = params.forward(&x, Some(&labels), Mode::Eval, false)?;
        loss += f.loss().expect("labels given").as_f64() * chunk.len() as f64;
        for (v, row_labels) in labels.iter().enumerate() {
            let logits = f.logits(v);
            let m = params.config().num_beams;
            for (b, &l) in row_labels.iter().enumerate() {
                if crate::argmax(&logits.data()[b * m..(b + 1) * m]) == l {
                    hits[v] += 1;
                }
            }
        }
    }
    let n = windows.len() as f64;
    Ok((loss / n, hits.iter().map(|h| *h as f64 / n).collect()))
}

/// Train a model. See the module docs for the procedure.
pub fn train<T: Scalar>(d: &RawDataset, opts: &TrainOptions) -> Result<TrainOutcome<T>> {
    let start = Instant::now();
    let hp = &opts.hyper;
    hp.validate()?;
    if d.codebook_size() != hp.num_beams {
        return Err(Error::InvalidConfig(format!(
            "dataset codebook has {} beams, model expects {}",
            d.codebook_size(),
            hp.num_beams
        )));
    }
    let splits = split_dataset(d, opts.split_method, &opts.split)?;
    if splits.train.is_empty() {
        return Err(Error::InsufficientData("training split is empty".into()));
    }
    let bounds = fitted_bounds(d, &splits, opts.bounds)?;
    let mut windows: Vec<Vec<WindowedSample>> = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let w = build_windows(splits.get(kind), &bounds, hp.window, hp.horizon)?;
        if w.is_empty() {
            return Err(Error::InsufficientData(format!(
                "{kind} split yields no window of {} + {} consecutive samples",
                hp.window, hp.horizon
            )));
        }
        windows.push(w);
    }
    let (train_w, val_w) = (&windows[0], &windows[1]);

    let config = opts.model_config();
    let steps = config.steps();
    let mut params = ModelParams::<T>::init(config, opts.seed)?;
    let mut adam = Adam::<T>::new(hp.weight_decay);
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let mut records = Vec::with_capacity(hp.epochs);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;

    for epoch in 1..=hp.epochs {
        let lr = lr_schedule(epoch, hp);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(hp.train_batch) {
            let refs: Vec<&WindowedSample> = chunk.iter().map(|&i| &train_w[i]).collect();
            let x = batch_input(&refs, hp.window)?;
            let labels = batch_labels(&refs, steps)?;
            let mut f = params.forward(&x, Some(&labels), Mode::Train, true)?;
            loss_sum += f.loss().expect("labels given").as_f64() * chunk.len() as f64;
            let grads = f.backward()?;
            if let Some(st) = f.bn_stats() {
                params.update_running_stats(st);
            }
            adam.step(params.trainable_mut(), &grads, lr)?;
        }
        let (val_loss, val_top1) = validate_epoch(&params, val_w, hp.val_batch)?;
        let train_loss = loss_sum / train_w.len() as f64;
        log::info!(
            "epoch {epoch}/{} lr {lr:e} train_loss {train_loss:.5} val_loss {val_loss:.5} val_top1 {:?}",
            hp.epochs,
            val_top1
        );
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::InvalidData(format!("loss diverged at epoch {epoch}")));
        }
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if opts.select == Selection::Final || improved {
            best = Some((val_loss, epoch, params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_top1,
        });
    }
    let (_, selected_epoch, chosen) = best.expect("at least one epoch");
    let report = TrainReport {
        epochs: records,
        selected_epoch,
        selection: opts.select,
        seed: opts.seed,
        config_hash: opts.config_hash()?,
        split_method: opts.split_method,
        chunk_size: splits.chunk_size,
        split_sizes: [splits.train.len(), splits.val.len(), splits.test.len()],
        window_counts: [windows[0].len(), windows[1].len(), windows[2].len()],
        params: count_params(&chosen).0,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: chosen,
            bounds,
            hyper: hp.clone(),
            seed: opts.seed,
        },
        report,
        splits,
    })
}

/// Windowed samples of `d` under a checkpoint's normalization and geometry.
pub fn checkpoint_windows<T: Scalar>(ckpt: &Checkpoint<T>, d: &RawDataset) -> Result<Vec<WindowedSample>> {
    let c = ckpt.params.config();
    if d.codebook_size() != c.num_beams {
        return Err(Error::InvalidConfig(format!(
            "dataset codebook has {} beams, checkpoint has {}",
            d.codebook_size(),
            c.num_beams
        )));
    }
    build_windows(d, &ckpt.bounds, c.window, c.horizon)
}

/// Score a checkpoint on a dataset (usually one split of it).
pub fn evaluate<T: Scalar>(ckpt: &Checkpoint<T>, d: &RawDataset) -> Result<MetricsReport> {
    Ok(evaluate_detailed(ckpt, d)?.0)
}

/// The report plus the per-step samples it was computed from.
pub fn evaluate_detailed<T: Scalar>(
    ckpt: &Checkpoint<T>,
    d: &RawDataset,
) -> Result<(MetricsReport, Vec<Vec<EvalSample>>)> {
    if d.is_empty() {
        return Err(Error::EmptySet);
    }
    let windows = checkpoint_windows(ckpt, d)?;
    if windows.is_empty() {
        return Err(Error::InsufficientData("evaluation data yields no complete window".into()));
    }
    let scores = predict(&ckpt.params, &windows, ckpt.hyper.test_batch)?;
    let per_step = eval_samples(&scores, &windows)?;
    let report = MetricsReport::compute(&per_step, count_params(&ckpt.params))?;
    Ok((report, per_step))
}

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "split.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.txt";

/// Write a run directory: resolved config, split manifest, checkpoint,
/// training report and (separately, since it varies) wall time.
pub fn save_run<T: Scalar>(
    dir: &Path,
    dataset: &RawDataset,
    opts: &TrainOptions,
    outcome: &TrainOutcome<T>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cfg = serde_json::to_string_pretty(opts)?;
    cfg.push('\n');
    std::fs::write(dir.join(CONFIG_FILE), cfg)?;
    let mut manifest = Vec::new();
    write_manifest(dataset, &outcome.splits.assignment, &mut manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    outcome.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    std::fs::write(dir.join(REPORT_FILE), outcome.report.to_text())?;
    std::fs::write(
        dir.join(TIMING_FILE),
        format!("wall_time_s {}\n", outcome.report.wall_time_s),
    )?;
    Ok(())
}

/// Bounds that `train` would fit for these options.
pub fn fitted_bounds(d: &RawDataset, splits: &Splits, fit: BoundsFit) -> Result<NormalizationBounds> {
    match fit {
        BoundsFit::Train => fit_bounds(splits.train.ue_positions()),
        BoundsFit::All => fit_bounds(d.ue_positions()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, ScenarioConfig};

    fn small_opts(epochs: usize, m: usize) -> TrainOptions {
        TrainOptions {
            hyper: HyperParams {
                epochs,
                num_beams: m,
                lr: 2e-3,
                lr_drop_epochs: vec![],
                train_batch: 16,
                ..HyperParams::default()
            },
            seed: 3,
            ..TrainOptions::default()
        }
    }

    fn small_data() -> RawDataset {
        generate(&ScenarioConfig {
            n_sequences: 20,
            seq_len: 30,
            codebook_size: 8,
            seed: 4,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let d = small_data();
        let opts = small_opts(6, 8);
        let a = train::<f64>(&d, &opts).unwrap();
        let first = a.report.epochs[0].train_loss;
        let last = a.report.epochs.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");

        let b = train::<f64>(&d, &opts).unwrap();
        assert_eq!(a.report.to_text(), b.report.to_text());
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn selection_rules() {
        let d = small_data();
        let mut opts = small_opts(4, 8);
        let best = train::<f64>(&d, &opts).unwrap();
        let r = &best.report;
        let min = r.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        let first_min = r.epochs.iter().position(|e| e.val_loss == min).unwrap() + 1;
        assert_eq!(r.selected_epoch, first_min);

        opts.select = Selection::Final;
        let fin = train::<f64>(&d, &opts).unwrap();
        assert_eq!(fin.report.selected_epoch, 4);
    }

    #[test]
    fn bounds_come_from_train_only() {
        let d = small_data();
        let out = train::<f64>(&d, &small_opts(1, 8)).unwrap();
        let want = fit_bounds(out.splits.train.ue_positions()).unwrap();
        assert_eq!(out.checkpoint.bounds, want);
        let all = fit_bounds(d.ue_positions()).unwrap();
        assert_ne!(out.checkpoint.bounds, all);
    }

    #[test]
    fn evaluate_matches_after_round_trip() {
        let d = small_data();
        let out = train::<f64>(&d, &small_opts(2, 8)).unwrap();
        let before = evaluate(&out.checkpoint, &out.splits.test).unwrap();
        let back = Checkpoint::<f64>::from_bytes(&out.checkpoint.to_bytes().unwrap()).unwrap();
        let after = evaluate(&back, &out.splits.test).unwrap();
        assert_eq!(before, after);
        assert_eq!(before.to_text(), after.to_text());
    }

    #[test]
    fn empty_split_is_an_error() {
        let d = small_data();
        let out = train::<f64>(&d, &small_opts(1, 8)).unwrap();
        let empty = RawDataset::new(vec![], 8).unwrap();
        assert!(evaluate(&out.checkpoint, &empty).is_err());
    }

    #[test]
    fn insufficient_data() {
        let d = generate(&ScenarioConfig {
            n_sequences: 2,
            seq_len: 12,
            codebook_size: 8,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let mut opts = small_opts(1, 8);
        opts.split_method = SplitMethod::Sequential;
        assert!(matches!(train::<f64>(&d, &opts), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn codebook_mismatch_rejected() {
        let d = small_data();
        assert!(matches!(train::<f64>(&d, &small_opts(1, 32)), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn single_precision_trains() {
        let d = small_data();
        let out = train::<f32>(&d, &small_opts(2, 8)).unwrap();
        assert!(out.report.epochs.iter().all(|e| e.train_loss.is_finite()));
        let r = evaluate(&out.checkpoint, &out.splits.val).unwrap();
        assert_eq!(r.params, out.report.params);
    }

    #[test]
    fn config_hash_tracks_options() {
        let a = TrainOptions::default();
        let mut b = a.clone();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.seed = 1;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap().len(), 16);
    }
}

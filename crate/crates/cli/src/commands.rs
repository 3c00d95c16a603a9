use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use beamtrack::data::{
    label_distribution, read_manifest, write_dataset, write_manifest, RawDataset, SplitConfig, SplitKind,
    SplitMethod, Splits,
};
use beamtrack::metrics::{reliability_curve, EvalSample, MetricsReport, OVERHEAD_TARGETS};
use beamtrack::nn::{checkpoint_dtype, Checkpoint};
use beamtrack::pipeline::{self, TrainOptions, CHECKPOINT_FILE, MANIFEST_FILE, REPORT_FILE};
use beamtrack::synth::{generate, ScenarioConfig};
use beamtrack::Scalar;
use serde_json::json;

use crate::util::{check_output, load_dataset, open, parse, read_json, usage, write_json, CliError};
use crate::{EvalArgs, SplitArgs, SynthArgs, TrainArgs};

/// Sidecar path for the resolved configuration of an output file.
fn config_path(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut cfg: ScenarioConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.sequences {
        cfg.n_sequences = n;
    }
    if let Some(n) = a.seq_len {
        cfg.seq_len = n;
    }
    if let Some(m) = a.beams {
        cfg.codebook_size = m;
    }
    cfg.drift |= a.drift;
    cfg.validate()?;
    check_output(&a.out, a.force)?;
    let d = generate(&cfg)?;
    let mut buf = Vec::new();
    write_dataset(&d, &mut buf)?;
    std::fs::write(&a.out, buf)?;
    write_json(&config_path(&a.out), &json!({ "command": "synth", "scenario": cfg }))?;
    log::info!("wrote {} samples to {}", d.len(), a.out.display());
    Ok(())
}

fn split_config(ratios: &Option<Vec<f64>>, base: SplitConfig) -> Result<SplitConfig, CliError> {
    let mut cfg = base;
    if let Some(r) = ratios {
        if r.len() != 3 {
            return Err(usage("--ratios takes three comma-separated fractions"));
        }
        cfg.f_train = r[0];
        cfg.f_val = r[1];
        cfg.f_test = r[2];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn distribution_table(d: &RawDataset, s: &Splits) -> String {
    let all = label_distribution(d);
    let parts = [
        label_distribution(&s.train),
        label_distribution(&s.val),
        label_distribution(&s.test),
    ];
    let p_all = all.probabilities();
    let p: Vec<Vec<f64>> = parts.iter().map(|x| x.probabilities()).collect();
    let mut out = String::from("label,dataset,train,val,test,p_dataset,p_train,p_val,p_test\n");
    for b in 0..d.codebook_size() {
        let _ = writeln!(
            out,
            "{b},{},{},{},{},{},{},{},{}",
            all.counts[b],
            parts[0].counts[b],
            parts[1].counts[b],
            parts[2].counts[b],
            p_all[b],
            p[0][b],
            p[1][b],
            p[2][b]
        );
    }
    out
}

pub fn split(a: SplitArgs) -> Result<(), CliError> {
    let method: SplitMethod = parse(&a.method)?;
    let mut cfg = split_config(&a.ratios, SplitConfig::default())?;
    if let Some(c) = &a.chunk_percentages {
        cfg.chunk_percentages = c.clone();
    }
    if let Some(m) = a.min_seq_len {
        cfg.min_seq_len = m;
    }
    cfg.validate()?;
    let dist_path = a.out.with_extension("distribution.csv");
    let summary_path = a.out.with_extension("summary.txt");
    for p in [&a.out, &dist_path, &summary_path] {
        check_output(p, a.force)?;
    }
    let d = load_dataset(&a.data, a.beams)?;
    let chosen = pipeline::split_dataset(&d, method, &cfg)?;
    let reference = label_distribution(&d);

    let mut manifest = Vec::new();
    write_manifest(&d, &chosen.assignment, &mut manifest)?;
    std::fs::write(&a.out, manifest)?;
    std::fs::write(&dist_path, distribution_table(&d, &chosen))?;

    // both methods side by side so their label balance can be compared
    let mut summary = String::new();
    let _ = writeln!(summary, "method {}", a.method);
    let _ = writeln!(
        summary,
        "chunk_size {}",
        chosen.chunk_size.map_or("none".to_string(), |c| c.to_string())
    );
    for (k, s) in SplitKind::ALL.iter().zip([&chosen.train, &chosen.val, &chosen.test]) {
        let _ = writeln!(summary, "samples.{k} {}", s.len());
    }
    for m in [SplitMethod::Sequential, SplitMethod::Adjusted] {
        let s = if m == method {
            chosen.clone()
        } else {
            match pipeline::split_dataset(&d, m, &cfg) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("{m:?} split unavailable: {e}");
                    continue;
                }
            }
        };
        let name = format!("{m:?}").to_lowercase();
        let _ = writeln!(summary, "similarity.{name} {}", s.similarity_score(&reference));
        let missing = label_distribution(&s.train)
            .counts
            .iter()
            .zip(&reference.counts)
            .filter(|(tr, all)| **tr == 0 && **all > 0)
            .count();
        let _ = writeln!(summary, "labels_absent_from_train.{name} {missing}");
    }
    std::fs::write(&summary_path, &summary)?;
    write_json(
        &config_path(&a.out),
        &json!({ "command": "split", "data": a.data, "method": a.method, "split": cfg, "beams": a.beams }),
    )?;
    print!("{summary}");
    Ok(())
}

fn train_options(a: &TrainArgs) -> Result<TrainOptions, CliError> {
    let mut o: TrainOptions = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainOptions::default(),
    };
    if let Some(s) = &a.split {
        o.split_method = parse(s)?;
    }
    o.split = split_config(&a.ratios, o.split.clone())?;
    if let Some(s) = a.seed {
        o.seed = s;
    }
    if let Some(e) = a.epochs {
        o.hyper.epochs = e;
        o.hyper.lr_drop_epochs.retain(|d| *d <= e);
    }
    if let Some(b) = a.batch {
        o.hyper.train_batch = b;
    }
    if let Some(lr) = a.lr {
        o.hyper.lr = lr;
    }
    if let Some(d) = &a.lr_drops {
        o.hyper.lr_drop_epochs = d.clone();
    }
    if let Some(s) = &a.select {
        o.select = parse(s)?;
    }
    if let Some(b) = &a.bounds {
        o.bounds = parse(b)?;
    }
    if let Some(h) = &a.decoder_h0 {
        o.decoder_h0 = parse(h)?;
    }
    Ok(o)
}

fn train_as<T: Scalar>(a: &TrainArgs, d: &RawDataset, opts: &TrainOptions) -> Result<(), CliError> {
    let out = pipeline::train::<T>(d, opts)?;
    pipeline::save_run(&a.run_dir, d, opts, &out)?;
    let sel = out.report.selected();
    println!("run_dir {}", a.run_dir.display());
    println!("selected_epoch {}", out.report.selected_epoch);
    println!("val_loss {}", sel.val_loss);
    for (v, acc) in sel.val_top1.iter().enumerate() {
        println!("val_top1.step{v} {acc}");
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut opts = train_options(&a)?;
    let ckpt = a.run_dir.join(CHECKPOINT_FILE);
    check_output(&ckpt, a.force)?;
    let d = load_dataset(&a.data, a.beams)?;
    opts.hyper.num_beams = d.codebook_size();
    opts.hyper.validate()?;
    match a.precision.as_str() {
        "f64" => train_as::<f64>(&a, &d, &opts),
        "f32" => train_as::<f32>(&a, &d, &opts),
        other => Err(usage(format!("precision must be f64 or f32, got {other:?}"))),
    }
}

/// Reliability-curve thresholds in dB.
fn curve_thresholds() -> Vec<f64> {
    (0..=40).map(|i| i as f64 * 0.25).collect()
}

fn metrics_csv(r: &MetricsReport, topk: usize) -> String {
    let mut out = String::from("step");
    for k in 1..=topk {
        let _ = write!(out, ",top{k}");
    }
    out.push_str(",mean_pl_db,reliability_1db,reliability_3db\n");
    for v in 0..r.steps() {
        let _ = write!(out, "{v}");
        for k in 0..topk {
            let _ = write!(out, ",{}", r.top_k[v][k]);
        }
        match (&r.mean_pl_db, &r.reliability) {
            (Some(pl), Some(rel)) => {
                let _ = write!(out, ",{},{},{}", pl[v], rel[v][0], rel[v][1]);
            }
            _ => out.push_str(",absent,absent,absent"),
        }
        out.push('\n');
    }
    out
}

fn accuracy_csv(r: &MetricsReport) -> String {
    let mut out = String::from("k");
    for v in 0..r.steps() {
        let _ = write!(out, ",step{v}");
    }
    out.push('\n');
    for k in 0..r.num_beams {
        let _ = write!(out, "{}", k + 1);
        for v in 0..r.steps() {
            let _ = write!(out, ",{}", r.top_k[v][k]);
        }
        out.push('\n');
    }
    out
}

fn overhead_csv(r: &MetricsReport) -> String {
    let mut out = String::from("target,b_min,savings");
    for v in 0..r.steps() {
        let _ = write!(out, ",b_min.step{v},savings.step{v}");
    }
    out.push('\n');
    for (i, t) in OVERHEAD_TARGETS.iter().enumerate() {
        let p = &r.overhead_pooled[i];
        let _ = write!(out, "{t},{},{}", p.b_min, p.savings);
        for v in 0..r.steps() {
            let q = &r.overhead[v][i];
            let _ = write!(out, ",{},{}", q.b_min, q.savings);
        }
        out.push('\n');
    }
    out
}

fn reliability_csv(per_step: &[Vec<EvalSample>]) -> Result<String, CliError> {
    let th = curve_thresholds();
    let curves = per_step
        .iter()
        .map(|s| reliability_curve(s, &th))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::from("threshold_db");
    for v in 0..per_step.len() {
        let _ = write!(out, ",step{v}");
    }
    out.push('\n');
    for (i, t) in th.iter().enumerate() {
        let _ = write!(out, "{t}");
        for c in &curves {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

fn select_split(a: &EvalArgs, d: RawDataset) -> Result<RawDataset, CliError> {
    if a.split == "all" {
        return Ok(d);
    }
    let kind: SplitKind = parse(&a.split)?;
    let manifest = match &a.manifest {
        Some(m) => m.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(MANIFEST_FILE),
    };
    let assignment = read_manifest(open(&manifest)?, &d)?;
    Ok(Splits::from_assignment(&d, assignment)?.get(kind).clone())
}

fn eval_as<T: Scalar>(a: &EvalArgs, bytes: &[u8], out_dir: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::<T>::from_bytes(bytes)?;
    let m = ckpt.params.config().num_beams;
    if a.topk < 1 || a.topk > m {
        return Err(usage(format!("--topk must lie in [1, {m}]")));
    }
    let d = load_dataset(&a.data, m)?;
    let subset = select_split(a, d)?;
    let (report, per_step) = pipeline::evaluate_detailed(&ckpt, &subset)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(REPORT_FILE), report.to_text())?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&report, a.topk))?;
    std::fs::write(out_dir.join("accuracy_vs_k.csv"), accuracy_csv(&report))?;
    std::fs::write(out_dir.join("overhead.csv"), overhead_csv(&report))?;
    if report.mean_pl_db.is_some() {
        std::fs::write(out_dir.join("reliability_curve.csv"), reliability_csv(&per_step)?)?;
    } else {
        log::warn!("dataset has no power columns; power-loss metrics are absent");
    }
    write_json(
        &out_dir.join("config.json"),
        &json!({
            "command": "eval",
            "checkpoint": a.checkpoint,
            "data": a.data,
            "split": a.split,
            "manifest": a.manifest,
            "topk": a.topk,
        }),
    )?;
    print!("{}", metrics_csv(&report, a.topk));
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let out_dir = match &a.out {
        Some(o) => o.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}", a.split)),
    };
    check_output(&out_dir.join(REPORT_FILE), a.force)?;
    let bytes = std::fs::read(&a.checkpoint)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", a.checkpoint.display())))?;
    match checkpoint_dtype(&bytes)?.as_str() {
        "f64" => eval_as::<f64>(&a, &bytes, &out_dir),
        "f32" => eval_as::<f32>(&a, &bytes, &out_dir),
        other => Err(CliError::Data(beamtrack::Error::Checkpoint(format!("unknown dtype {other}")))),
    }
}

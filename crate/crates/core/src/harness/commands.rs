use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use super::config::{ExperimentConfig, SampleCount, ScenarioRange};
use super::data::{generate_range, manifest_path, DataLoader, PreparedSplit, RawSplits, Split};
use super::gradcheck::{default_cases, run_cases, GradSuiteReport};
use super::plot::{Chart, Series};
use super::report::{results_csv, training_log_csv, write_text, ResultRow};
use super::train::{evaluate_model, init_model, train, EpochRecord};
use crate::channel_sim::derive_seed;
use crate::codec::{n_s_for_gamma, ProjectionCodec, ProjectionKind};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, MetricValue};
use crate::models::Variant;

pub const WORKERS_ENV: &str = "CSI_WORKERS";
const CODEC_STREAM: u64 = 0xC0DEC;

/// Parallel runs in a sweep, from `CSI_WORKERS` (default 1).
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `f(0..n)` on up to `workers` threads; results keep index order.
fn run_parallel<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// The projection used at compression ratio `gamma`; its seed derives from
/// the master seed and `Ns`, so every command sees the same matrix.
pub fn make_codec(cfg: &ExperimentConfig, gamma: f64) -> Result<ProjectionCodec> {
    let n_s = n_s_for_gamma(&cfg.dims, gamma)?;
    let kind = if cfg.orthonormal_projection {
        ProjectionKind::Orthonormal
    } else {
        ProjectionKind::Gaussian
    };
    ProjectionCodec::with_kind(cfg.dims, n_s, derive_seed(cfg.seed, CODEC_STREAM, n_s as u64), kind)
}

#[derive(Clone, Debug)]
pub struct GenerateReport {
    pub files: Vec<PathBuf>,
    pub manifests: Vec<PathBuf>,
    /// Train/val/test sizes per generated range.
    pub split_sizes: Vec<(ScenarioRange, [usize; 3])>,
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateReport> {
    cfg.validate()?;
    let mut report = GenerateReport {
        files: Vec::new(),
        manifests: Vec::new(),
        split_sizes: Vec::new(),
    };
    for range in [cfg.train_scenarios, cfg.eval_scenarios] {
        let (files, manifest) = generate_range(cfg, range)?;
        let m = crate::channel_sim::SplitManifest::load(&manifest)?;
        report
            .split_sizes
            .push((range, [m.train.len(), m.val.len(), m.test.len()]));
        report.files.extend(files);
        report.manifests.push(manifest);
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub run_id: String,
    pub variant: Variant,
    pub gamma: f64,
    pub samples_per_scenario: SampleCount,
    pub history: Vec<EpochRecord>,
    pub epoch_best: usize,
    /// Test metrics of the best-validation checkpoint, one row per evaluated split.
    pub rows: Vec<ResultRow>,
    pub wall_time_s: f64,
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub steps: usize,
    /// Validation/test samples read during optimizer steps (always 0).
    pub leaked_reads: usize,
    /// Samples read per split over the whole run.
    pub reads: [usize; 3],
}

impl RunResult {
    pub fn metric(&self, split: &str) -> Option<MetricValue> {
        self.rows.iter().find(|r| r.split == split).map(|r| r.metric)
    }
}

fn run_id(variant: &str, gamma: f64, samples: SampleCount, range: ScenarioRange) -> String {
    format!("{variant}-g{gamma}-n{samples}-s{range}")
}

struct Job<'a> {
    variant: Variant,
    gamma: f64,
    samples: SampleCount,
    train_on: &'a RawSplits,
    evals: Vec<(&'static str, &'a RawSplits)>,
}

fn run_job(cfg: &ExperimentConfig, job: &Job<'_>, cmd_dir: &Path) -> Result<RunResult> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    cfg.gamma = job.gamma;
    let codec = make_codec(&cfg, job.gamma)?;
    let loader = DataLoader::new(job.train_on, &codec, cfg.patch_size)?;
    let outcome = train(&cfg, job.variant, &loader)?;
    let id = run_id(job.variant.as_str(), job.gamma, job.samples, job.train_on.range);
    let run_dir = cmd_dir.join("runs").join(&id);
    write_text(&run_dir.join("train_log.csv"), &training_log_csv(&id, &outcome.history))?;
    let checkpoint = run_dir.join("checkpoint.csiw");
    outcome.model.save_weights(&checkpoint)?;

    let mut rows = Vec::new();
    for &(label, raw) in &job.evals {
        let metric = if std::ptr::eq(raw, job.train_on) {
            evaluate_model(&outcome.model, loader.split(Split::Test), cfg.micro_batch)?
        } else {
            let prepared = PreparedSplit::new(raw.test.clone(), &codec, cfg.patch_size)?;
            evaluate_model(&outcome.model, &prepared, cfg.micro_batch)?
        };
        rows.push(ResultRow {
            run_id: id.clone(),
            variant: job.variant.to_string(),
            gamma: job.gamma,
            samples_per_scenario: job.samples,
            split: label.to_string(),
            metric,
            epoch_best: Some(outcome.epoch_best),
            seed: cfg.seed,
        });
    }
    Ok(RunResult {
        run_id: id,
        variant: job.variant,
        gamma: job.gamma,
        samples_per_scenario: job.samples,
        history: outcome.history,
        epoch_best: outcome.epoch_best,
        rows,
        wall_time_s: start.elapsed().as_secs_f64(),
        config_hash: cfg.hash(),
        checkpoint,
        steps: outcome.steps,
        leaked_reads: outcome.leaked_reads,
        reads: loader.reads(),
    })
}

fn coarse_row(
    cfg: &ExperimentConfig,
    gamma: f64,
    samples: SampleCount,
    label: &str,
    raw: &RawSplits,
) -> Result<ResultRow> {
    let codec = make_codec(cfg, gamma)?;
    let h_in = codec.round_trip_batch(&raw.test)?;
    Ok(ResultRow {
        run_id: run_id("coarse", gamma, samples, raw.range),
        variant: "coarse".into(),
        gamma,
        samples_per_scenario: samples,
        split: label.to_string(),
        metric: evaluate_pairs(raw.test.iter().zip(&h_in))?,
        epoch_best: None,
        seed: cfg.seed,
    })
}

fn write_summary(dir: &Path, runs: &[RunResult]) -> Result<()> {
    let mut s = String::from("run_id,wall_time_s,steps,config_hash,checkpoint\n");
    for r in runs {
        s.push_str(&format!(
            "{},{:.2},{},{},{}\n",
            r.run_id,
            r.wall_time_s,
            r.steps,
            r.config_hash,
            r.checkpoint.display()
        ));
    }
    write_text(&dir.join("summary.txt"), &s)
}

fn run_jobs(cfg: &ExperimentConfig, jobs: &[Job<'_>], dir: &Path) -> Result<Vec<RunResult>> {
    run_parallel(jobs.len(), worker_count(), |i| run_job(cfg, &jobs[i], dir))
}

/// Trains `cfg.variant` at `cfg.gamma` and reports test metrics next to the
/// coarse reconstruction.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let dir = cfg.out_dir.join("train");
    let samples = cfg.train_samples_per_scenario;
    let raw = RawSplits::load(cfg, cfg.train_scenarios, samples)?;
    let job = Job {
        variant: cfg.variant,
        gamma: cfg.gamma,
        samples,
        train_on: &raw,
        evals: vec![("test", &raw)],
    };
    let result = run_job(cfg, &job, &dir)?;
    let mut rows = result.rows.clone();
    rows.push(coarse_row(cfg, cfg.gamma, samples, "test", &raw)?);
    write_text(&dir.join("results.csv"), &results_csv(&rows))?;
    write_summary(&dir, std::slice::from_ref(&result))?;
    Ok(result)
}

/// Evaluates a checkpoint of `cfg.variant` on the test split of the training
/// scenarios and, when generated, of the held-out scenarios.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut model = init_model(cfg, cfg.variant)?;
    model.load_weights(checkpoint)?;
    let codec = make_codec(cfg, cfg.gamma)?;
    let samples = cfg.train_samples_per_scenario;
    let mut rows = Vec::new();
    let mut sets = vec![("test", cfg.train_scenarios)];
    if manifest_path(cfg, cfg.eval_scenarios).exists() {
        sets.push(("transfer", cfg.eval_scenarios));
    }
    for (label, range) in sets {
        let raw = RawSplits::load(cfg, range, SampleCount::Count(1))?;
        let prepared = PreparedSplit::new(raw.test.clone(), &codec, cfg.patch_size)?;
        rows.push(ResultRow {
            run_id: format!("evaluate-{}", run_id(cfg.variant.as_str(), cfg.gamma, samples, range)),
            variant: cfg.variant.to_string(),
            gamma: cfg.gamma,
            samples_per_scenario: samples,
            split: label.to_string(),
            metric: evaluate_model(&model, &prepared, cfg.micro_batch)?,
            epoch_best: None,
            seed: cfg.seed,
        });
        rows.push(coarse_row(cfg, cfg.gamma, samples, label, &raw)?);
    }
    write_text(&cfg.out_dir.join("evaluate").join("results.csv"), &results_csv(&rows))?;
    Ok(rows)
}

fn metric_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    log2_x: bool,
    rows: &[ResultRow],
    x: impl Fn(&ResultRow) -> f64,
    y: impl Fn(&MetricValue) -> f64,
) -> Chart {
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        if !labels.contains(&r.variant) {
            labels.push(r.variant.clone());
        }
    }
    let series = labels
        .into_iter()
        .map(|label| Series {
            points: rows
                .iter()
                .filter(|r| r.variant == label)
                .map(|r| (x(r), y(&r.metric)))
                .collect(),
            label,
        })
        .collect();
    Chart {
        title: title.into(),
        x_label: x_label.into(),
        y_label: y_label.into(),
        log2_x,
        x_ticks: Vec::new(),
        series,
    }
}

/// Every sweep variant at every compression ratio, plus the coarse baseline.
pub fn cmd_sweep_cr(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let dir = cfg.out_dir.join("sweep_cr");
    let samples = cfg.train_samples_per_scenario;
    let raw = RawSplits::load(cfg, cfg.train_scenarios, samples)?;
    let mut jobs = Vec::new();
    for &gamma in &cfg.gammas {
        for &variant in &cfg.sweep_variants {
            jobs.push(Job {
                variant,
                gamma,
                samples,
                train_on: &raw,
                evals: vec![("test", &raw)],
            });
        }
    }
    let runs = run_jobs(cfg, &jobs, &dir)?;
    let mut rows = Vec::new();
    for (gi, &gamma) in cfg.gammas.iter().enumerate() {
        let per = cfg.sweep_variants.len();
        for run in &runs[gi * per..(gi + 1) * per] {
            rows.extend(run.rows.iter().cloned());
        }
        rows.push(coarse_row(cfg, gamma, samples, "test", &raw)?);
    }
    write_text(&dir.join("results.csv"), &results_csv(&rows))?;
    let nmse = metric_chart(
        "NMSE vs compression ratio",
        "compression ratio",
        "NMSE (dB)",
        true,
        &rows,
        |r| r.gamma,
        |m| m.nmse_db,
    );
    let gcs = metric_chart(
        "GCS vs compression ratio",
        "compression ratio",
        "GCS",
        true,
        &rows,
        |r| r.gamma,
        |m| m.gcs,
    );
    write_text(&dir.join("nmse_vs_gamma.svg"), &nmse.render())?;
    write_text(&dir.join("gcs_vs_gamma.svg"), &gcs.render())?;
    write_summary(&dir, &runs)?;
    Ok(rows)
}

/// Every sweep variant trained on per-scenario prefixes of the training split.
pub fn cmd_sweep_samples(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let dir = cfg.out_dir.join("sweep_samples");
    let raws = cfg
        .sample_sweep
        .iter()
        .map(|&n| RawSplits::load(cfg, cfg.train_scenarios, n))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for (raw, &samples) in raws.iter().zip(&cfg.sample_sweep) {
        for &variant in &cfg.sweep_variants {
            jobs.push(Job {
                variant,
                gamma: cfg.gamma,
                samples,
                train_on: raw,
                evals: vec![("test", raw)],
            });
        }
    }
    let runs = run_jobs(cfg, &jobs, &dir)?;
    let mut rows: Vec<ResultRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    if let Some(raw) = raws.first() {
        rows.push(coarse_row(cfg, cfg.gamma, cfg.sample_sweep[0], "test", raw)?);
    }
    write_text(&dir.join("results.csv"), &results_csv(&rows))?;

    let per_scenario = |raw: &RawSplits| raw.train.len() as f64 / raw.range.len() as f64;
    let x_of = |s: SampleCount| {
        let i = cfg.sample_sweep.iter().position(|&v| v == s).unwrap_or(0);
        per_scenario(&raws[i])
    };
    let trained: Vec<ResultRow> = rows.iter().filter(|r| r.variant != "coarse").cloned().collect();
    let mut chart = metric_chart(
        "NMSE vs training samples",
        "training samples per scenario",
        "NMSE (dB)",
        true,
        &trained,
        |r| x_of(r.samples_per_scenario),
        |m| m.nmse_db,
    );
    chart.x_ticks = cfg
        .sample_sweep
        .iter()
        .zip(&raws)
        .map(|(s, raw)| (per_scenario(raw), s.to_string()))
        .collect();
    write_text(&dir.join("nmse_vs_samples.svg"), &chart.render())?;
    write_summary(&dir, &runs)?;
    Ok(rows)
}

/// Transfer versus upper-bound performance on the held-out scenarios.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizeRow {
    pub variant: Variant,
    pub transfer_nmse_db: f64,
    pub upper_bound_nmse_db: f64,
    /// `transfer − upper bound` in dB.
    pub gap_db: f64,
}

pub fn cmd_generalize(cfg: &ExperimentConfig) -> Result<(Vec<GeneralizeRow>, Vec<ResultRow>)> {
    cfg.validate()?;
    let dir = cfg.out_dir.join("generalize");
    let samples = cfg.train_samples_per_scenario;
    let seen = RawSplits::load(cfg, cfg.train_scenarios, samples)?;
    let held_out = RawSplits::load(cfg, cfg.eval_scenarios, samples)?;
    let mut jobs = Vec::new();
    for &variant in &cfg.generalize_variants {
        jobs.push(Job {
            variant,
            gamma: cfg.gamma,
            samples,
            train_on: &seen,
            evals: vec![("test", &seen), ("transfer", &held_out)],
        });
        jobs.push(Job {
            variant,
            gamma: cfg.gamma,
            samples,
            train_on: &held_out,
            evals: vec![("upper_bound", &held_out)],
        });
    }
    let runs = run_jobs(cfg, &jobs, &dir)?;
    let mut rows: Vec<ResultRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    rows.push(coarse_row(cfg, cfg.gamma, samples, "transfer", &held_out)?);
    write_text(&dir.join("results.csv"), &results_csv(&rows))?;

    let mut summary = Vec::new();
    for (k, &variant) in cfg.generalize_variants.iter().enumerate() {
        let transfer = runs[2 * k].metric("transfer").expect("transfer row").nmse_db;
        let upper = runs[2 * k + 1].metric("upper_bound").expect("upper-bound row").nmse_db;
        summary.push(GeneralizeRow {
            variant,
            transfer_nmse_db: transfer,
            upper_bound_nmse_db: upper,
            gap_db: transfer - upper,
        });
    }
    let mut csv = String::from("variant,transfer_nmse_db,upper_bound_nmse_db,gap_db\n");
    for g in &summary {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            g.variant, g.transfer_nmse_db, g.upper_bound_nmse_db, g.gap_db
        ));
    }
    write_text(&dir.join("generalization.csv"), &csv)?;
    let chart = Chart {
        title: "Scenario generalization".into(),
        x_label: "variant".into(),
        y_label: "NMSE (dB)".into(),
        log2_x: false,
        x_ticks: summary
            .iter()
            .enumerate()
            .map(|(i, g)| (i as f64, g.variant.to_string()))
            .collect(),
        series: vec![
            Series {
                label: "transfer".into(),
                points: summary
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (i as f64, g.transfer_nmse_db))
                    .collect(),
            },
            Series {
                label: "upper bound".into(),
                points: summary
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (i as f64, g.upper_bound_nmse_db))
                    .collect(),
            },
        ],
    };
    write_text(&dir.join("generalization.svg"), &chart.render())?;
    write_summary(&dir, &runs)?;
    Ok((summary, rows))
}

/// Finite-difference check of every op and the toy refiner.
pub fn cmd_gradcheck() -> Result<GradSuiteReport> {
    let report = run_cases(&default_cases())?;
    if !report.passed() {
        return Err(Error::Numerical(format!(
            "gradient check failed for: {}\n{}",
            report.failures().join(", "),
            report.to_text()
        )));
    }
    Ok(report)
}

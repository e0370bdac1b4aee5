use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use sdcm::artifact::{ModelArtifact, Provenance};
use sdcm::eval::{self, cross_validate, BoxplotStats, ErrorRecord, IsoVerdict};
use sdcm::gp::{CalibrationSample, Hyperparameters, SdcmModel};
use sdcm::hyperopt;
use sdcm::online::{self, CandidateScore, OnlineCalibrator, UpdateConfig};
use sdcm::pipeline::{self, evaluate_split, run_drift_scenario, split_scenario, train_scenario};
use sdcm::windowing::{downsample, extract_features, extract_samples, TimeSeries};
use sdcm::{Error, Result};

use crate::config::ExperimentConfig;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Sidecar path `<file>.<suffix>`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Series from the configured data directory, or simulated from the
/// configured population when there is none.
pub fn load_series(cfg: &ExperimentConfig) -> Result<Vec<TimeSeries>> {
    let sc = &cfg.scenario;
    match &cfg.data_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> =
                fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            paths.retain(|p| p.extension().is_some_and(|x| x == "csv"));
            paths.sort();
            info!("reading {} series from {}", paths.len(), dir.display());
            paths.iter().map(|p| TimeSeries::read_csv_file(p)).collect()
        }
        None => pipeline::simulate_population(&sc.population, &sc.sensor, sc.rng_seed),
    }
}

#[derive(Serialize)]
struct SeriesEntry {
    id: String,
    file: String,
    samples: usize,
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    provenance: Provenance,
    population: &'a sdcm::sim::PopulationSpec,
    sensor: &'a sdcm::sim::SensorModel,
    series: Vec<SeriesEntry>,
}

pub fn simulate(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("series"));
    create_dir(&dir)?;
    let sc = &cfg.scenario;
    if sc.population.n_profiles == 0 {
        warn!("population has no profiles; writing the manifest only");
    }
    let series = pipeline::simulate_population(&sc.population, &sc.sensor, sc.rng_seed)?;
    let mut entries = Vec::new();
    for s in &series {
        let file = format!("{}.csv", s.series_id);
        s.write_csv_file(&dir.join(&file))?;
        entries.push(SeriesEntry { id: s.series_id.clone(), file, samples: s.len() });
    }
    write_json(
        &dir.join("manifest.json"),
        &SimulateManifest {
            provenance: cfg.provenance(),
            population: &sc.population,
            sensor: &sc.sensor,
            series: entries,
        },
    )?;
    println!("wrote {} series to {}", series.len(), dir.display());
    Ok(())
}

fn train_artifact(cfg: &ExperimentConfig, series: &[TimeSeries]) -> Result<ModelArtifact> {
    let split = split_scenario(series, &cfg.scenario)?;
    info!("training on {} series, holding out {:?}", split.train.len(), split.test.keys().collect::<Vec<_>>());
    let trained = train_scenario(&split, &cfg.scenario)?;
    let mut artifact = ModelArtifact::from_model(&trained.model, cfg.scenario.pipeline.window, cfg.provenance());
    artifact.log_likelihood = Some(trained.fit.log_likelihood);
    artifact.trial_log = trained.fit.trials;
    Ok(artifact)
}

pub fn train(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.output_dir.join("model.json"));
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    let series = load_series(cfg)?;
    let artifact = train_artifact(cfg, &series)?;
    artifact.save(&out)?;
    println!(
        "theta = (delta {:.6}, sigma {:.6}, sigma_u {:.3e}), log likelihood {:.4}, N = {}; wrote {}",
        artifact.theta.delta,
        artifact.theta.sigma,
        artifact.theta.sigma_u_tilde,
        artifact.log_likelihood.unwrap_or(f64::NAN),
        artifact.samples.len(),
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelArtifact, SdcmModel)> {
    let artifact = ModelArtifact::load(path)?;
    let model = artifact.to_model()?;
    Ok((artifact, model))
}

fn prepared_input(cfg: &ExperimentConfig, path: &Path) -> Result<TimeSeries> {
    downsample(&TimeSeries::read_csv_file(path)?, cfg.scenario.pipeline.downsample_factor)
}

#[derive(Serialize)]
struct PredictMetadata {
    model: Provenance,
    provenance: Provenance,
    series_id: String,
    window: sdcm::windowing::WindowSpec,
    /// Each estimate uses `ell` future outputs, so it is available this many
    /// samples after its timestamp.
    non_causal_delay_samples: usize,
    non_causal_delay_s: f64,
    rows: usize,
    skipped_edge_rows: usize,
}

pub fn predict(cfg: &ExperimentConfig, model_path: &Path, series_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let (artifact, model) = load_model(model_path)?;
    let series = prepared_input(cfg, series_path)?;
    let window = artifact.window;
    let out = out.unwrap_or_else(|| cfg.output_dir.join(format!("{}_estimates.csv", series.series_id)));
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    let mut w = BufWriter::new(File::create(&out)?);
    writeln!(w, "series_id,k,t_s,mean,variance,confidence")?;
    let centers = window.centers(series.len());
    let rows = centers.len();
    if rows == 0 {
        warn!(
            "series {} has {} samples after downsampling; a window needs {}",
            series.series_id,
            series.len(),
            window.window_len()
        );
    }
    for k in centers {
        let est = model.predict(&extract_features(&series, &window, k)?)?;
        writeln!(w, "{},{},{},{},{},{}", series.series_id, k, series.t[k], est.mean, est.variance, est.confidence)?;
    }
    w.flush()?;
    let skipped = series.len() - rows;
    if skipped > 0 {
        info!("skipped {skipped} edge samples without a full window");
    }
    write_json(
        &sidecar(&out, "meta.json"),
        &PredictMetadata {
            model: artifact.provenance.clone(),
            provenance: cfg.provenance(),
            series_id: series.series_id.clone(),
            window,
            non_causal_delay_samples: window.ell,
            non_causal_delay_s: window.ell as f64 * series.sample_interval,
            rows,
            skipped_edge_rows: skipped,
        },
    )?;
    println!("wrote {rows} estimates to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunedParameters {
    pub provenance: Provenance,
    pub config: UpdateConfig,
    pub candidates: Vec<CandidateScore>,
}

pub fn tune(cfg: &ExperimentConfig, model_path: &Path, series_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let (_, model) = load_model(model_path)?;
    let series = prepared_input(cfg, series_path)?;
    let samples = extract_samples(&series, &cfg.scenario.pipeline.window)?;
    let truth: Vec<f64> = samples.iter().map(|s| s.reference).collect();
    let (config, candidates) = online::tune_update_params(
        &model,
        &samples,
        &truth,
        &cfg.drift.lhs,
        sdcm::derive_seed(cfg.scenario.rng_seed, 12),
    )?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("tuned.json"));
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    for c in &candidates {
        info!("candidate {:?}: mean PAE {:.4}%", c.config, c.mean_pae);
    }
    write_json(&out, &TunedParameters { provenance: cfg.provenance(), config, candidates })?;
    println!(
        "selected eps_u = {:.4}, c = {:.4}, eps_gamma = {:.4}; wrote {}",
        config.eps_u,
        config.c,
        config.eps_gamma,
        out.display()
    );
    Ok(())
}

pub struct UpdateArgs {
    pub model: PathBuf,
    pub series: PathBuf,
    pub out: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub explicit: Option<UpdateConfig>,
    pub refit: bool,
}

fn update_config(cfg: &ExperimentConfig, args: &UpdateArgs) -> Result<UpdateConfig> {
    if let Some(c) = cfg.update {
        return Ok(c);
    }
    if let Some(c) = args.explicit {
        return Ok(c);
    }
    if let Some(p) = &args.params {
        return Ok(read_json::<TunedParameters>(p)?.config);
    }
    Err(Error::InvalidInput(
        "no update parameters: set [update] in the config, pass --eps-u/--c/--eps-gamma, or --params".into(),
    ))
}

/// Re-optimizes the hyperparameters on the current dataset with the frozen
/// normalization.
fn refit(cfg: &ExperimentConfig, model: &SdcmModel) -> Result<(SdcmModel, hyperopt::FitResult)> {
    let inputs: Vec<Vec<f64>> =
        model.samples().iter().map(|s| model.normalize_features(&s.features)).collect::<Result<_>>()?;
    let targets: Vec<f64> = model.samples().iter().map(|s| s.reference / model.target_scale()).collect();
    let mut search = cfg.scenario.pipeline.search.clone();
    search.rng_seed = sdcm::derive_seed(cfg.scenario.rng_seed, 2);
    let fit = hyperopt::fit(&inputs, &targets, &search)?;
    let refitted = SdcmModel::with_stats(
        model.samples().to_vec(),
        fit.theta,
        model.feature_stats().clone(),
        model.target_scale(),
        model.lifespan_s(),
    )?;
    Ok((refitted, fit))
}

pub fn update(cfg: &ExperimentConfig, args: UpdateArgs) -> Result<()> {
    let config = update_config(cfg, &args)?;
    let (artifact, model) = load_model(&args.model)?;
    let series = prepared_input(cfg, &args.series)?;
    let stream: Vec<CalibrationSample> = extract_samples(&series, &artifact.window)?;
    let mut calibrator = OnlineCalibrator::new(model, config)?;
    for s in &stream {
        calibrator.observe(s)?;
    }
    let (updated, events) = calibrator.into_parts();
    let accepted = events.iter().filter(|e| e.replaced_index.is_some()).count();
    let out_artifact = if args.refit {
        let (m, fit) = refit(cfg, &updated)?;
        let mut a = ModelArtifact::from_model(&m, artifact.window, cfg.provenance());
        a.log_likelihood = Some(fit.log_likelihood);
        a.trial_log = fit.trials;
        a
    } else {
        ModelArtifact::from_model(&updated, artifact.window, cfg.provenance())
    };

    let out = args.out.unwrap_or_else(|| cfg.output_dir.join("model_updated.json"));
    let events_path = args.events.unwrap_or_else(|| sidecar(&out, "events.jsonl"));
    for p in [&out, &events_path] {
        if let Some(parent) = p.parent() {
            create_dir(parent)?;
        }
    }
    online::write_events(&events, BufWriter::new(File::create(&events_path)?))?;
    out_artifact.save(&out)?;
    println!(
        "{} samples observed: {accepted} replaced, {} outlier alerts; wrote {} and {}",
        events.len(),
        events.len() - accepted,
        out.display(),
        events_path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    /// Train on the training series and score the held-out ones
    Holdout,
    /// Cross-validated accuracy at every configured SNR
    SnrSweep,
    /// Online updates versus none on a drifted held-out scenario
    Update,
    All,
}

#[derive(Serialize)]
struct HoldoutSummary {
    provenance: Provenance,
    model: Provenance,
    train_series: Vec<String>,
    test_series: Vec<String>,
    n_train: usize,
    n_test: usize,
    theta: Hyperparameters,
    pae: BoxplotStats,
    iso: IsoVerdict,
}

#[derive(Serialize)]
struct SnrRow {
    snr_db: f64,
    fold_medians: Vec<f64>,
    pae: BoxplotStats,
    iso: IsoVerdict,
}

#[derive(Serialize)]
struct SweepSummary {
    provenance: Provenance,
    folds: sdcm::eval::FoldConfig,
    levels: Vec<SnrRow>,
}

#[derive(Serialize)]
struct UpdateSummary {
    provenance: Provenance,
    model: Provenance,
    drift: sdcm::pipeline::DriftScenario,
    tuning_series: String,
    eval_series: String,
    tuned: UpdateConfig,
    candidates: Vec<CandidateScore>,
    accepted: usize,
    rejected: usize,
    with_update: BoxplotStats,
    without_update: BoxplotStats,
}

fn write_labeled(path: &Path, rows: Vec<(String, &ErrorRecord)>) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    eval::write_records(rows.iter().map(|(l, r)| (l.as_str(), *r)), w)
}

fn model_for(
    cfg: &ExperimentConfig,
    model_path: Option<&Path>,
    series: &[TimeSeries],
) -> Result<(ModelArtifact, SdcmModel)> {
    match model_path {
        Some(p) => {
            let (a, m) = load_model(p)?;
            if a.provenance.config_hash != cfg.hash() {
                info!("model {} was trained under configuration {}", p.display(), a.provenance.config_hash);
            }
            Ok((a, m))
        }
        None => {
            info!("no model given; training one");
            let a = train_artifact(cfg, series)?;
            let m = a.to_model()?;
            Ok((a, m))
        }
    }
}

/// Metrics files written by one experiment.
pub fn evaluate(
    cfg: &ExperimentConfig,
    which: Experiment,
    model_path: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<Vec<PathBuf>> {
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("metrics"));
    create_dir(&dir)?;
    let series = load_series(cfg)?;
    let provenance = cfg.provenance();
    let mut written = Vec::new();
    let needs_model = matches!(which, Experiment::Holdout | Experiment::Update | Experiment::All);
    let trained = if needs_model { Some(model_for(cfg, model_path, &series)?) } else { None };

    if matches!(which, Experiment::Holdout | Experiment::All) {
        let (artifact, model) = trained.as_ref().expect("model loaded");
        let split = split_scenario(&series, &cfg.scenario)?;
        let fit = hyperopt::FitResult {
            theta: artifact.theta,
            log_likelihood: artifact.log_likelihood.unwrap_or(f64::NAN),
            best_trial: 0,
            trials: Vec::new(),
        };
        let report = evaluate_split(model, fit, &split)?;
        let records = dir.join("holdout_records.csv");
        write_labeled(&records, report.records.iter().map(|r| ("test".to_string(), r)).collect())?;
        let summary = dir.join("holdout_summary.json");
        write_json(
            &summary,
            &HoldoutSummary {
                provenance: provenance.clone(),
                model: artifact.provenance.clone(),
                train_series: report.train_series,
                test_series: report.test_series,
                n_train: report.n_train,
                n_test: report.n_test,
                theta: artifact.theta,
                pae: report.pae.clone(),
                iso: report.iso,
            },
        )?;
        println!(
            "holdout: {} test records, median PAE {:.3}%, max {:.3}%, ISO 15197 {} ({:.1}% compliant)",
            report.n_test,
            report.pae.median,
            report.pae.max,
            if report.iso.pass { "pass" } else { "fail" },
            100.0 * report.iso.pass_fraction
        );
        written.extend([records, summary]);
    }

    if matches!(which, Experiment::SnrSweep | Experiment::All) {
        let report =
            cross_validate(&series, &cfg.folds, &cfg.scenario.pipeline, &cfg.snr_levels, cfg.scenario.rng_seed)?;
        let mut rows = Vec::new();
        for f in &report.folds {
            for r in &f.records {
                rows.push((format!("snr{}_fold{}", f.snr_db, f.fold), r));
            }
        }
        let records = dir.join("snr_sweep_records.csv");
        write_labeled(&records, rows)?;

        let mut levels = Vec::new();
        for a in &report.aggregates {
            let fold_medians = report
                .folds
                .iter()
                .filter(|f| f.snr_db == a.snr_db)
                .map(|f| eval::boxplot_stats(&f.records.iter().map(|r| r.pae).collect::<Vec<_>>()).map(|b| b.median))
                .collect::<Result<Vec<_>>>()?;
            levels.push(SnrRow { snr_db: a.snr_db, fold_medians, pae: a.pae.clone(), iso: a.iso });
        }
        let table = dir.join("snr_sweep_summary.csv");
        let mut w = BufWriter::new(File::create(&table)?);
        writeln!(w, "snr_db,n,median_pae,mean_pae,q1,q3,max_pae,iso_fraction,iso_pass")?;
        for l in &levels {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                l.snr_db,
                l.pae.n,
                l.pae.median,
                l.pae.mean,
                l.pae.q1,
                l.pae.q3,
                l.pae.max,
                l.iso.pass_fraction,
                l.iso.pass
            )?;
            println!("snr {} dB: median PAE {:.3}%, ISO {:.1}%", l.snr_db, l.pae.median, 100.0 * l.iso.pass_fraction);
        }
        w.flush()?;
        let summary = dir.join("snr_sweep_summary.json");
        write_json(&summary, &SweepSummary { provenance: provenance.clone(), folds: cfg.folds.clone(), levels })?;
        written.extend([records, table, summary]);
    }

    if matches!(which, Experiment::Update | Experiment::All) {
        let (artifact, model) = trained.as_ref().expect("model loaded");
        let sc = &cfg.scenario;
        let cmp = run_drift_scenario(model, &sc.population, &sc.sensor, &cfg.drift, &sc.pipeline)?;
        let mut rows: Vec<(String, &ErrorRecord)> = cmp.records_with.iter().map(|r| ("w".to_string(), r)).collect();
        rows.extend(cmp.records_without.iter().map(|r| ("wo".to_string(), r)));
        let records = dir.join("update_records.csv");
        write_labeled(&records, rows)?;
        let events = dir.join("update_events.jsonl");
        online::write_events(&cmp.events, BufWriter::new(File::create(&events)?))?;
        let summary = dir.join("update_summary.json");
        write_json(
            &summary,
            &UpdateSummary {
                provenance: provenance.clone(),
                model: artifact.provenance.clone(),
                drift: cfg.drift.clone(),
                tuning_series: cmp.tuning_series.clone(),
                eval_series: cmp.eval_series.clone(),
                tuned: cmp.tuned,
                candidates: cmp.candidates.clone(),
                accepted: cmp.accepted,
                rejected: cmp.rejected,
                with_update: cmp.with_update.clone(),
                without_update: cmp.without_update.clone(),
            },
        )?;
        println!(
            "update: mean PAE {:.3}% with updates, {:.3}% without ({} replaced, {} alerts)",
            cmp.with_update.mean, cmp.without_update.mean, cmp.accepted, cmp.rejected
        );
        written.extend([records, events, summary]);
    }
    Ok(written)
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use mcbw_core::anomaly::{compute_anomalies, PipelineConfig};
use mcbw_core::dataset::{
    canonical_channels, generate_synthetic, output_index, planted_response, synthetic_spec_of, AnomalyDataset, PlantedGain,
    Provenance, SyntheticSpec,
};
use mcbw_core::emulator::{evaluate as evaluate_model, pattern_correlation, train_lag_suite, unit_response, validation_range, LagSuite, TrainConfig};
use mcbw_core::grid::{build_grid, region_mask_with, RegionCatalog, RegionSpec};
use mcbw_core::shift::{fit_input_references, load_references, save_references, ShiftConfig};
use mcbw_core::tipping::SitesConfig;
use mcbw_service::{AppState, ServiceConfig, Session};
use serde::Serialize;
use serde_json::{json, Value};
use tracing::info;

use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::{EvaluateArgs, PreprocessArgs, ServeArgs, ShiftFitArgs, SynthArgs, TrainArgs};

pub const REPORT_FILE: &str = "report.json";

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| CliError::invalid(format!("--{flag} is required")))
}

fn existing(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(format!("{what} {} does not exist", path.display())))
    }
}

/// Resolved parameters for the manifest: everything except the output path.
fn parameters<T: Serialize>(args: &T) -> Value {
    let mut v = serde_json::to_value(args).expect("arguments serialize");
    if let Value::Object(m) = &mut v {
        m.remove("out");
    }
    v
}

fn load_dataset(path: &Path, what: &str, want: Provenance) -> CliResult<AnomalyDataset> {
    existing(path, what)?;
    let ds = AnomalyDataset::load(path).map_err(|e| CliError::from(e).context(format!("{what} {}", path.display())))?;
    if ds.provenance != want {
        return Err(CliError::invalid(format!("{what} {} holds {:?} data, expected {want:?}", path.display(), ds.provenance)));
    }
    Ok(ds)
}

fn parse_planted(s: &str) -> CliResult<PlantedGain> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::invalid(format!("--planted `{s}` is not LAG:OUTPUT:INPUT:GAIN"));
    let [lag, output, input, gain] = parts[..] else { return Err(bad()) };
    Ok(PlantedGain {
        lag: lag.parse().map_err(|_| bad())?,
        output: output.into(),
        input: input.into(),
        gain: gain.parse().map_err(|_| bad())?,
    })
}

pub fn synth(mut a: SynthArgs) -> CliResult<Manifest> {
    let out = required(&a.out, "out")?.clone();
    let seed = *a.seed.get_or_insert(0);
    let months = *a.months.get_or_insert(1200);
    let level = *a.level.get_or_insert(3);
    let noise = *a.noise_scale.get_or_insert(1.0);
    let planted = a.planted.get_or_insert_with(Vec::new).iter().map(|s| parse_planted(s)).collect::<CliResult<Vec<_>>>()?;
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(CliError::invalid("--noise-scale must be finite and non-negative"));
    }
    let mut spec = SyntheticSpec::esm_like(seed, months, level, planted);
    spec.start_year = *a.start_year.get_or_insert(spec.start_year);
    spec.start_month = *a.start_month.get_or_insert(spec.start_month);
    for c in spec.channels.values_mut() {
        c.sigma *= noise;
    }
    info!(seed, months, level, "generating synthetic dataset");
    let ds = generate_synthetic(&spec)?;
    ds.save(&out)?;
    Manifest::new("synth", parameters(&a), Some(seed)).finish(&out)
}

pub fn preprocess(mut a: PreprocessArgs) -> CliResult<Manifest> {
    let input = required(&a.input, "input")?.clone();
    let out = required(&a.out, "out")?.clone();
    let defaults = PipelineConfig::default();
    let cfg = PipelineConfig {
        rolling_window_years: *a.window_years.get_or_insert(defaults.rolling_window_years),
        detrend_degree: *a.degree.get_or_insert(defaults.detrend_degree),
    };
    let raw = load_dataset(&input, "raw dataset", Provenance::Raw)?;
    info!(months = raw.n_months, level = raw.grid_level, "computing anomalies");
    let an = compute_anomalies(&raw, &cfg)?;
    an.save(&out)?;
    // neutrality block: largest anomaly relative to the largest raw value
    let channels: Vec<Value> = canonical_channels()
        .iter()
        .zip(raw.data.iter().zip(&an.data))
        .map(|(c, (r, x))| {
            let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
            let worst = x.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
            let ratio = if scale > 0.0 { worst / scale } else { 0.0 };
            json!({ "channel": c.id, "input_scale": scale, "max_abs_anomaly": worst, "relative_max": ratio })
        })
        .collect();
    let mut m = Manifest::new("preprocess", parameters(&a), None);
    m.add_input("raw", &input)?;
    m.metrics = json!({ "channels": channels });
    m.finish(&out)
}

pub fn train(mut a: TrainArgs) -> CliResult<Manifest> {
    let data = required(&a.data, "data")?.clone();
    let out = required(&a.out, "out")?.clone();
    let d = TrainConfig::default();
    let lags = a.lags.get_or_insert_with(|| vec![1, 2, 3]).clone();
    let cfg = TrainConfig {
        epochs: *a.epochs.get_or_insert(d.epochs),
        initial_lr: *a.initial_lr.get_or_insert(d.initial_lr),
        lr_decay_per_epoch: *a.lr_decay_per_epoch.get_or_insert(d.lr_decay_per_epoch),
        batch_size: *a.batch_size.get_or_insert(d.batch_size),
        hidden: a.hidden.get_or_insert(d.hidden).clone(),
        lambda_precip: *a.lambda_precip.get_or_insert(d.lambda_precip),
        lambda_moisture: *a.lambda_moisture.get_or_insert(d.lambda_moisture),
        lambda_mass: *a.lambda_mass.get_or_insert(d.lambda_mass),
        lambda_energy: *a.lambda_energy.get_or_insert(d.lambda_energy),
        c_energy: *a.c_energy.get_or_insert(d.c_energy),
        val_fraction: *a.val_fraction.get_or_insert(d.val_fraction),
        seed: *a.seed.get_or_insert(d.seed),
    };
    cfg.validate()?;
    let ds = load_dataset(&data, "anomaly dataset", Provenance::Anomaly)?;
    info!(?lags, hidden = ?cfg.hidden, epochs = cfg.epochs, "training lag suite");
    let suite = train_lag_suite(&ds, &lags, &cfg)?;
    suite.save(&out)?;
    let per_lag: Vec<Value> = suite
        .models()
        .map(|m| {
            let r = m.report.as_ref().expect("trained models carry a report");
            json!({ "lag": m.lag, "val_mse": r.val_mse, "val_baseline_mse": r.val_baseline_mse, "n_train": r.n_train, "n_val": r.n_val })
        })
        .collect();
    let mut m = Manifest::new("train", parameters(&a), Some(cfg.seed));
    m.add_input("data", &data)?;
    m.metrics = json!({ "lags": per_lag });
    m.finish(&out)
}

pub fn shift_fit(mut a: ShiftFitArgs) -> CliResult<Manifest> {
    let data = required(&a.data, "data")?.clone();
    let out = required(&a.out, "out")?.clone();
    let d = ShiftConfig::default();
    let cfg = ShiftConfig { k: *a.k.get_or_insert(d.k), ood_threshold: *a.ood_threshold.get_or_insert(d.ood_threshold) };
    let ds = load_dataset(&data, "anomaly dataset", Provenance::Anomaly)?;
    info!(k = cfg.k, months = ds.n_months, "fitting shift references");
    let refs = fit_input_references(&ds, 0..ds.n_months, &cfg)?;
    fs::create_dir_all(&out)?;
    save_references(&out, &refs)?;
    let explained: Vec<Value> = refs.iter().map(|r| json!({ "channel": r.channel_id, "explained": r.explained })).collect();
    let mut m = Manifest::new("shift-fit", parameters(&a), None);
    m.add_input("data", &data)?;
    m.metrics = json!({ "channels": explained });
    m.finish(&out)
}

#[derive(Debug, Serialize)]
struct PlantedRecovery {
    input: String,
    output: String,
    planted_lag: usize,
    gain: f64,
    pattern_correlation: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LagReport {
    lag: usize,
    val_mse: f64,
    baseline_mse: f64,
    n_pairs: usize,
    planted: Vec<PlantedRecovery>,
}

pub fn evaluate(mut a: EvaluateArgs) -> CliResult<Manifest> {
    let suite_dir = required(&a.suite, "suite")?.clone();
    let data = required(&a.data, "data")?.clone();
    let out = required(&a.out, "out")?.clone();
    let region = a.probe_region.get_or_insert_with(|| "SEP".into()).clone();
    let cfg = TrainConfig { val_fraction: *a.val_fraction.get_or_insert(0.2), ..TrainConfig::default() };
    existing(&suite_dir, "lag suite")?;
    let suite = LagSuite::load(&suite_dir)?;
    let ds = load_dataset(&data, "anomaly dataset", Provenance::Anomaly)?;
    suite.check_dataset(&ds)?;

    let grid = build_grid(ds.grid_level)?;
    let nv = grid.len();
    let mask = region_mask_with(&grid, &RegionSpec::named(&region), &RegionCatalog::default())
        .map_err(|e| CliError::from(e).context("--probe-region"))?;
    if !mask.iter().any(|&m| m) {
        return Err(CliError::invalid(format!("probe region {region} has no vertices at level {}", ds.grid_level)));
    }
    let delta: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let planted = synthetic_spec_of(&ds).map(|s| s.planted).unwrap_or_default();

    let mut lags = Vec::new();
    for model in suite.models() {
        let range = validation_range(ds.n_months, model.lag, &cfg);
        let ev = evaluate_model(model, &ds, range, &cfg)?;
        let mut rec = Vec::new();
        for g in &planted {
            let o = output_index(&g.output).expect("validated when generated");
            let expect = planted_response(&grid, &planted, g.lag, &g.input, &delta);
            let got = unit_response(model, &g.input, &delta, 1.0)?;
            let corr = pattern_correlation(&got[o * nv..(o + 1) * nv], &expect[o * nv..(o + 1) * nv], grid.area_weights());
            rec.push(PlantedRecovery {
                input: g.input.clone(),
                output: g.output.clone(),
                planted_lag: g.lag,
                gain: g.gain,
                pattern_correlation: corr,
            });
        }
        info!(lag = model.lag, val_mse = ev.loss.mse, "evaluated");
        lags.push(LagReport { lag: model.lag, val_mse: ev.loss.mse, baseline_mse: ev.baseline_mse, n_pairs: ev.n_pairs, planted: rec });
    }
    let best = lags.iter().min_by(|x, y| x.val_mse.total_cmp(&y.val_mse)).map(|l| l.lag);
    let report = json!({ "probe_region": region, "best_lag": best, "lags": lags });

    fs::create_dir_all(&out)?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    let mut m = Manifest::new("evaluate", parameters(&a), None);
    m.add_input("suite", &suite_dir)?;
    m.add_input("data", &data)?;
    m.metrics = report;
    m.finish(&out)
}

pub fn serve(mut a: ServeArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let data = required(&a.data, "data")?.clone();
    let records = required(&a.records, "records")?.clone();
    let host = a.host.get_or_insert_with(|| "127.0.0.1".into()).clone();
    let port = *a.port.get_or_insert(8080);
    let timeout = *a.timeout_secs.get_or_insert(60);

    let dataset = load_dataset(&data, "anomaly dataset", Provenance::Anomaly)?;
    let raw = a.raw.as_deref().map(|p| load_dataset(p, "raw dataset", Provenance::Raw)).transpose()?;
    let suite = a
        .suite
        .as_deref()
        .map(|p| existing(p, "lag suite").and_then(|_| LagSuite::load(p).map_err(CliError::from)))
        .transpose()?;
    let references = a
        .shift
        .as_deref()
        .map(|p| existing(p, "shift references").and_then(|_| load_references(p).map_err(CliError::from)))
        .transpose()?;
    let sites = match &a.sites {
        Some(p) => {
            existing(p, "sites file")?;
            SitesConfig::load(p)?
        }
        None => SitesConfig::default_sites(),
    };
    let session = Session { dataset, raw, suite, references, sites, catalog: RegionCatalog::default() };
    let cfg = ServiceConfig { run_timeout: Duration::from_secs(timeout), ..ServiceConfig::new(PathBuf::from(&records)) };
    let state = AppState::new(session, cfg).map_err(|e| CliError::from(e).context("refusing to serve"))?;

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
        let addr = listener.local_addr()?;
        info!(%addr, "serving");
        writeln!(stdout, "{}", json!({ "listening": format!("http://{addr}") }))?;
        stdout.flush()?;
        mcbw_service::serve(listener, state).await
    })
    .map_err(|e| CliError::runtime(format!("server: {e}")))
}

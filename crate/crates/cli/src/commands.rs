//! Subcommand implementations. Each run writes its resolved configuration
//! next to its outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use alternator::checkpoint::{load_model, save_model};
use alternator::data::{self, SeriesDataset};
use alternator::metrics::{self, MetricReport};
use alternator::model::stack_observations;
use alternator::rng::derive_seed;
use alternator::tasks::{self, ImputeOptions};
use alternator::training::{self, EpochRecord};
use alternator::{AlternatorModel, Exec, NetworkTemplate, NoiseSchedule, Tensor};
use serde::Serialize;

use crate::config::{DataSource, RunConfig, ScheduleKind};
use crate::error::CliError;

const SPLIT_TAG: u64 = 1;
const MODEL_TAG: u64 = 2;
const GENERATE_TAG: u64 = 3;
const ENCODE_TAG: u64 = 4;
const MASK_TAG: u64 = 5;
const IMPUTE_TAG: u64 = 6;
const FORECAST_TAG: u64 = 7;
const EVAL_TAG: u64 = 8;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.ndjson";
pub const METRICS_FILE: &str = "metrics.ndjson";

/// One line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub std_error: Option<f64>,
    pub n: usize,
    pub seed: u64,
}

impl MetricRecord {
    fn from_report(task: &str, report: MetricReport, seed: u64) -> Self {
        Self { task: task.into(), metric: report.name, value: report.value, std_error: report.std_error, n: report.n, seed }
    }
}

/// Series split by the configured fractions.
#[derive(Clone, Debug)]
pub struct Splits {
    pub full: SeriesDataset,
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
}

pub fn exec_for(cfg: &RunConfig) -> Exec {
    if cfg.deterministic {
        Exec::Sequential
    } else {
        cfg.train.exec
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Splits, CliError> {
    let d = &cfg.data;
    let seed = cfg.data_seed();
    let source = d
        .source
        .ok_or_else(|| CliError::Config("data.source is required (bimodal, sine_mixture, ar1 or csv)".into()))?;
    let mut full = match source {
        DataSource::Bimodal => data::synth_bimodal(d.n, d.len, d.noise_std, seed)?,
        DataSource::SineMixture => data::synth_sine_mixture(d.n, d.len, d.noise_std, seed)?,
        DataSource::Ar1 => data::synth_ar1(d.n, d.len, d.phi, d.noise_std, seed)?,
        DataSource::Csv => {
            let path = d.path.as_ref().ok_or_else(|| CliError::Config("data.path is required for csv data".into()))?;
            data::load_csv(path)?
        }
    };
    if d.normalize {
        full = data::normalize_minmax(&full);
    }
    let [a, b, c] = d.split;
    let (train, val, test) = data::split_dataset(&full, (a, b, c), derive_seed(seed, &[SPLIT_TAG]))?;
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Config(format!(
            "split {:?} of {} series leaves an empty train or test set",
            d.split,
            full.len()
        )));
    }
    Ok(Splits { full, train, val, test })
}

pub fn build_schedule(cfg: &RunConfig, len: usize) -> Result<NoiseSchedule, CliError> {
    let s = &cfg.schedule;
    let len = s.len.unwrap_or(len);
    let mut schedule = match s.kind {
        ScheduleKind::Linear => NoiseSchedule::linear_with(len, s.sigma_x, s.sigma_z, s.beta_lo_frac, s.alpha_lo_frac)?,
        ScheduleKind::Vanilla => NoiseSchedule::vanilla(len, s.sigma_x, s.sigma_z)?,
    };
    if let Some(a) = s.alpha_const {
        schedule.alpha = vec![a; len];
    }
    schedule.ensure_valid()?;
    Ok(schedule)
}

/// The initialization `train` starts from.
pub fn init_model(cfg: &RunConfig, dx: usize, len: usize) -> Result<AlternatorModel, CliError> {
    let m = &cfg.model;
    let template = NetworkTemplate { kind: m.kind, hidden_dim: m.hidden_dim, depth: m.depth, activation: m.activation };
    let schedule = build_schedule(cfg, len)?;
    Ok(AlternatorModel::new(dx, m.dz, schedule, template, derive_seed(cfg.seed, &[MODEL_TAG]))?.with_dynamics(m.dynamics))
}

fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", cfg.out.display())))?;
    std::fs::write(cfg.out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<AlternatorModel, CliError> {
    Ok(load_model(cfg.checkpoint_path())?)
}

fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    prepare_out(cfg)?;
    let splits = load_data(cfg)?;
    let model = init_model(cfg, splits.train.channels(), splits.train.seq_len())?;
    let mut tc = cfg.train.clone();
    tc.exec = exec_for(cfg);
    tc.seed = cfg.seed;

    let mut log = BufWriter::new(File::create(cfg.out.join(LOSS_FILE))?);
    let mut log_err: Option<std::io::Error> = None;
    let result = training::train_with(model, &splits.train.data, &tc, |rec| {
        if log_err.is_some() {
            return;
        }
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err = Some(e);
        }
    });
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let outcome = result?;
    save_model(&outcome.model, cfg.out.join(CHECKPOINT_FILE))?;
    Ok(TrainSummary { history: outcome.history })
}

pub fn run_generate(cfg: &RunConfig) -> Result<Tensor, CliError> {
    prepare_out(cfg)?;
    let model = load_checkpoint(cfg)?;
    let len = cfg.generate.len.unwrap_or(model.schedule().len());
    let tr = model.generate_batch(cfg.generate.n, len, derive_seed(cfg.seed, &[GENERATE_TAG]), exec_for(cfg))?;
    let samples = stack_observations(&tr)?;
    data::write_csv(cfg.out.join("samples.csv"), &samples)?;
    Ok(samples)
}

pub fn run_encode(cfg: &RunConfig) -> Result<Tensor, CliError> {
    prepare_out(cfg)?;
    let model = load_checkpoint(cfg)?;
    let splits = load_data(cfg)?;
    let latents = model.encode_batch(
        &splits.full.data,
        derive_seed(cfg.seed, &[ENCODE_TAG]),
        cfg.encode.propagation,
        exec_for(cfg),
    )?;
    data::write_csv(cfg.out.join("latents.csv"), &latents)?;
    Ok(latents)
}

/// Scores of one method at one missing rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImputeScore {
    pub mae: f64,
    pub mse: f64,
    pub cc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputeRow {
    pub rate: f64,
    pub model: ImputeScore,
    pub baseline: ImputeScore,
}

/// Per-series metrics of completed series against the truth.
fn score_series(truth: &Tensor, completed: &Tensor, prefix: &str) -> Result<(ImputeScore, Vec<MetricReport>), CliError> {
    let per = truth.shape()[1] * truth.shape()[2];
    let (mut maes, mut mses, mut ccs) = (Vec::new(), Vec::new(), Vec::new());
    for (y, yhat) in truth.data().chunks(per).zip(completed.data().chunks(per)) {
        let p = metrics::pointwise_metrics(y, yhat)?;
        maes.push(p.mae);
        mses.push(p.mse);
        ccs.extend(p.cc);
    }
    let mut reports = vec![
        MetricReport::from_samples(format!("{prefix}/mae"), &maes)?,
        MetricReport::from_samples(format!("{prefix}/mse"), &mses)?,
    ];
    let cc = if ccs.is_empty() {
        None
    } else {
        let r = MetricReport::from_samples(format!("{prefix}/cc"), &ccs)?;
        let v = r.value;
        reports.push(r);
        Some(v)
    };
    Ok((ImputeScore { mae: reports[0].value, mse: reports[1].value, cc }, reports))
}

pub fn run_impute(cfg: &RunConfig) -> Result<Vec<ImputeRow>, CliError> {
    prepare_out(cfg)?;
    let model = load_checkpoint(cfg)?;
    let splits = load_data(cfg)?;
    let truth = &splits.test.data;
    let fallback = tasks::channel_means(&splits.train.data);
    let opts = ImputeOptions { rollouts: cfg.impute.rollouts, propagation: cfg.impute.propagation, exec: exec_for(cfg) };
    let (t, d) = (splits.test.seq_len(), splits.test.channels());

    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut csv = BufWriter::new(File::create(cfg.out.join("imputed.csv"))?);
    let header: Vec<String> = (1..=d).map(|j| format!("v{j}")).collect();
    writeln!(csv, "rate,series_id,t,{}", header.join(","))?;
    for (k, &rate) in cfg.impute.rates.iter().enumerate() {
        let (masked, observed) =
            tasks::apply_mar_mask_batch(truth, rate, derive_seed(cfg.seed, &[MASK_TAG, k as u64]), cfg.impute.granularity)?;
        let completed = tasks::impute_batch(&model, &masked, &observed, derive_seed(cfg.seed, &[IMPUTE_TAG, k as u64]), opts)?;
        let baseline = tasks::mean_fill(&masked, &observed, &fallback)?;
        let (m, mreports) = score_series(truth, &completed, &format!("model@{rate}"))?;
        let (b, breports) = score_series(truth, &baseline, &format!("mean_fill@{rate}"))?;
        for r in mreports.into_iter().chain(breports) {
            records.push(MetricRecord::from_report("impute", r, cfg.seed));
        }
        rows.push(ImputeRow { rate, model: m, baseline: b });
        for (i, series) in completed.data().chunks(t * d).enumerate() {
            for (s, v) in series.chunks(d).enumerate() {
                let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                writeln!(csv, "{rate},{i},{},{}", s + 1, vals.join(","))?;
            }
        }
    }
    csv.flush()?;
    write_metrics(&cfg.out.join(METRICS_FILE), &records)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastStep {
    /// 1-based horizon step.
    pub step: usize,
    pub crps: f64,
    pub mse: f64,
    pub climatology_crps: f64,
    pub climatology_mse: f64,
}

pub fn run_forecast(cfg: &RunConfig) -> Result<Vec<ForecastStep>, CliError> {
    prepare_out(cfg)?;
    let model = load_checkpoint(cfg)?;
    let splits = load_data(cfg)?;
    let (horizon, members) = (cfg.forecast.horizon, cfg.forecast.members);
    let (len, d) = (splits.test.seq_len(), splits.test.channels());
    if horizon == 0 || horizon >= len {
        return Err(CliError::Config(format!("horizon {horizon} must lie in 1..{len}")));
    }
    let tc = len - horizon;
    let clim_mean = tasks::climatology_mean(&splits.train.data)?;

    let mut crps = vec![Vec::new(); horizon];
    let mut mse = vec![Vec::new(); horizon];
    let mut ccrps = vec![Vec::new(); horizon];
    let mut cmse = vec![Vec::new(); horizon];
    let mut csv = BufWriter::new(File::create(cfg.out.join("ensemble.csv"))?);
    let header: Vec<String> = (1..=d).map(|j| format!("v{j}")).collect();
    writeln!(csv, "series_id,member,h,{}", header.join(","))?;
    for i in 0..splits.test.len() {
        let series = splits.test.series(i);
        let context = Tensor::new(vec![tc, d], series.data()[..tc * d].to_vec())?;
        let ens = tasks::forecast_ensemble(
            &model,
            &context,
            horizon,
            members,
            derive_seed(cfg.seed, &[FORECAST_TAG, i as u64]),
            exec_for(cfg),
        )?;
        let mean = ens.mean();
        for h in 0..horizon {
            let y = series.row(tc + h);
            crps[h].push(metrics::crps_ensemble_multi(&ens.step(h), y)?);
            mse[h].push(sq_err(mean.row(h), y));
            let clim = tasks::climatology_ensemble(&splits.train.data, tc + h)?;
            ccrps[h].push(metrics::crps_ensemble_multi(&clim, y)?);
            cmse[h].push(sq_err(clim_mean.row(tc + h), y));
        }
        for (m, member) in ens.members.data().chunks(horizon * d).enumerate() {
            for (h, v) in member.chunks(d).enumerate() {
                let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                writeln!(csv, "{i},{m},{},{}", h + 1, vals.join(","))?;
            }
        }
    }
    csv.flush()?;

    let mut records = Vec::new();
    let mut steps = Vec::new();
    for h in 0..horizon {
        let reports = [
            MetricReport::from_samples(format!("crps@{}", h + 1), &crps[h])?,
            MetricReport::from_samples(format!("mse@{}", h + 1), &mse[h])?,
            MetricReport::from_samples(format!("climatology_crps@{}", h + 1), &ccrps[h])?,
            MetricReport::from_samples(format!("climatology_mse@{}", h + 1), &cmse[h])?,
        ];
        steps.push(ForecastStep {
            step: h + 1,
            crps: reports[0].value,
            mse: reports[1].value,
            climatology_crps: reports[2].value,
            climatology_mse: reports[3].value,
        });
        records.extend(reports.into_iter().map(|r| MetricRecord::from_report("forecast", r, cfg.seed)));
    }
    let all: Vec<f64> = crps.concat();
    let clim_all: Vec<f64> = ccrps.concat();
    records.push(MetricRecord::from_report("forecast", MetricReport::from_samples("crps", &all)?, cfg.seed));
    records.push(MetricRecord::from_report(
        "forecast",
        MetricReport::from_samples("climatology_crps", &clim_all)?,
        cfg.seed,
    ));
    write_metrics(&cfg.out.join(METRICS_FILE), &records)?;
    Ok(steps)
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityScores {
    pub mmd: f64,
    pub mmd_untrained: Option<f64>,
    pub mmd_baseline: Option<f64>,
}

pub fn run_eval_density(cfg: &RunConfig) -> Result<DensityScores, CliError> {
    prepare_out(cfg)?;
    let model = load_checkpoint(cfg)?;
    let splits = load_data(cfg)?;
    let held = &splits.test.data;
    let (len, dx) = (splits.test.seq_len(), splits.test.channels());
    if model.dx() != dx {
        return Err(CliError::Config(format!("checkpoint has D_x={}, data has {dx}", model.dx())));
    }
    let n = cfg.eval.samples.unwrap_or(splits.test.len());
    let exec = exec_for(cfg);
    let seed = derive_seed(cfg.seed, &[EVAL_TAG]);
    let score = |m: &AlternatorModel| -> Result<(f64, f64, Tensor), CliError> {
        let samples = stack_observations(&m.generate_batch(n, len, seed, exec)?)?;
        let mmd = metrics::mmd_median(&samples, held, exec)?;
        let marginal = metrics::mmd_per_timestep(&samples, held, exec)?;
        let mean_marginal = marginal.iter().sum::<f64>() / marginal.len() as f64;
        Ok((mmd, mean_marginal, samples))
    };

    let (mmd, marginal, samples) = score(&model)?;
    data::write_csv(cfg.out.join("samples.csv"), &samples)?;
    let mut records = vec![
        MetricRecord { task: "density".into(), metric: "mmd".into(), value: mmd, std_error: None, n, seed: cfg.seed },
        MetricRecord {
            task: "density".into(),
            metric: "mmd_marginal".into(),
            value: marginal,
            std_error: None,
            n,
            seed: cfg.seed,
        },
    ];
    let mut scores = DensityScores { mmd, mmd_untrained: None, mmd_baseline: None };
    if cfg.eval.untrained_baseline {
        let (u, _, _) = score(&init_model(cfg, dx, model.schedule().len())?)?;
        scores.mmd_untrained = Some(u);
        records.push(MetricRecord { task: "density".into(), metric: "mmd_untrained".into(), value: u, std_error: None, n, seed: cfg.seed });
        if u > 0.0 {
            records.push(MetricRecord {
                task: "density".into(),
                metric: "mmd_ratio".into(),
                value: mmd / u,
                std_error: None,
                n,
                seed: cfg.seed,
            });
        }
    }
    if let Some(path) = &cfg.eval.baseline_checkpoint {
        let (b, _, _) = score(&load_model(path)?)?;
        scores.mmd_baseline = Some(b);
        records.push(MetricRecord { task: "density".into(), metric: "mmd_baseline".into(), value: b, std_error: None, n, seed: cfg.seed });
    }
    write_metrics(&cfg.out.join(METRICS_FILE), &records)?;
    Ok(scores)
}

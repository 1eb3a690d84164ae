//! Run configuration: presets, TOML files and command-line overrides.
//!
//! Resolution order is preset defaults, then the config file, then flags.
//! Tables merge key by key; any other value replaces what came before.

use std::path::{Path, PathBuf};

use alternator::tasks::MaskGranularity;
use alternator::training::TrainConfig;
use alternator::{Activation, Dynamics, LatentPropagation, NetworkKind};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Density,
    Imputation,
    Forecast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Bimodal,
    SineMixture,
    Ar1,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Required; there is no default dataset.
    pub source: Option<DataSource>,
    pub path: Option<PathBuf>,
    pub n: usize,
    pub len: usize,
    pub noise_std: f64,
    pub phi: f64,
    /// Generator seed; the run seed when absent.
    pub seed: Option<u64>,
    pub normalize: bool,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            path: None,
            n: 500,
            len: 50,
            noise_std: 0.1,
            phi: 0.9,
            seed: None,
            normalize: false,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dz: usize,
    pub kind: NetworkKind,
    pub hidden_dim: usize,
    pub depth: usize,
    pub activation: Activation,
    pub dynamics: Dynamics,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dz: 32,
            kind: NetworkKind::Mlp,
            hidden_dim: 32,
            depth: 2,
            activation: Activation::Tanh,
            dynamics: Dynamics::NoiseModel,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub sigma_x: f64,
    pub sigma_z: f64,
    /// Lower end of β as a fraction of `1 − σ_x²`.
    pub beta_lo_frac: f64,
    pub alpha_lo_frac: f64,
    /// Constant α for every step, overriding the linear α schedule.
    pub alpha_const: Option<f64>,
    /// Schedule length; the dataset length when absent.
    pub len: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            sigma_x: 0.3,
            sigma_z: 0.15,
            beta_lo_frac: 0.1,
            alpha_lo_frac: 0.1,
            alpha_const: None,
            len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n: usize,
    pub len: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { n: 100, len: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub propagation: LatentPropagation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    pub rates: Vec<f64>,
    pub rollouts: usize,
    pub propagation: LatentPropagation,
    pub granularity: MaskGranularity,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            rates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            rollouts: 1,
            propagation: LatentPropagation::Mean,
            granularity: MaskGranularity::Timestep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub horizon: usize,
    pub members: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { horizon: 7, members: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated sequences; the held-out count when absent.
    pub samples: Option<usize>,
    /// Also score the untrained initialization of this config.
    pub untrained_baseline: bool,
    pub baseline_checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: None, untrained_baseline: true, baseline_checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    /// Checkpoint read by every command except `train`; `<out>/model.ckpt` when absent.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub encode: EncodeConfig,
    pub impute: ImputeConfig,
    pub forecast: ForecastConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Density)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = Self {
            preset,
            seed: 0,
            out: PathBuf::from("runs/latest"),
            deterministic: false,
            checkpoint: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            encode: EncodeConfig::default(),
            impute: ImputeConfig::default(),
            forecast: ForecastConfig::default(),
            eval: EvalConfig::default(),
        };
        match preset {
            Preset::Density => {
                cfg.model.dz = 32;
                cfg.train.batch_size = 100;
                cfg.train.epochs = 1000;
                cfg.train.lr_max = 1e-3;
                cfg.train.lr_min = 1e-5;
                cfg.schedule.sigma_x = 0.3;
                cfg.schedule.sigma_z = 0.15;
            }
            Preset::Imputation => {
                cfg.model.dz = 64;
                cfg.train.batch_size = 32;
                cfg.train.epochs = 800;
                cfg.train.lr_max = 5e-4;
                cfg.train.lr_min = 5e-6;
                cfg.schedule.sigma_x = 0.15;
                cfg.schedule.sigma_z = 0.15;
            }
            Preset::Forecast => {
                cfg.model.dz = 32;
                cfg.train.batch_size = 32;
                cfg.train.epochs = 300;
                cfg.schedule.sigma_x = 0.2;
                cfg.schedule.sigma_z = 0.1;
                cfg.schedule.alpha_const = Some(0.5);
                cfg.forecast.members = 50;
            }
        }
        cfg
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Overrides taken from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
    pub checkpoint: Option<PathBuf>,
    /// `dotted.key=value` assignments.
    pub set: Vec<String>,
}

/// Builds the effective configuration.
pub fn resolve(file: Option<&Path>, overrides: &Overrides, default_preset: Preset) -> Result<RunConfig, CliError> {
    let file_table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };

    let mut flags = toml::Table::new();
    for assignment in &overrides.set {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
        insert_path(&mut flags, key.trim(), parse_value(value.trim()))?;
    }
    if let Some(p) = overrides.preset {
        flags.insert("preset".into(), toml::Value::try_from(p).expect("preset"));
    }
    if let Some(s) = overrides.seed {
        let s = i64::try_from(s).map_err(|_| CliError::Config(format!("seed {s} exceeds the TOML integer range")))?;
        flags.insert("seed".into(), toml::Value::Integer(s));
    }
    if let Some(o) = &overrides.out {
        flags.insert("out".into(), toml::Value::String(o.display().to_string()));
    }
    if overrides.deterministic {
        flags.insert("deterministic".into(), toml::Value::Boolean(true));
    }
    if let Some(c) = &overrides.checkpoint {
        flags.insert("checkpoint".into(), toml::Value::String(c.display().to_string()));
    }

    let preset = [&flags, &file_table]
        .iter()
        .find_map(|t| t.get("preset").cloned())
        .map(|v| v.try_into::<Preset>())
        .transpose()
        .map_err(|e| CliError::Config(format!("preset: {e}")))?
        .unwrap_or(default_preset);

    let mut merged = toml::Table::try_from(RunConfig::preset(preset)).expect("preset serializes");
    merge(&mut merged, file_table);
    merge(&mut merged, flags);
    let mut cfg: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
    // the run seed drives training too
    cfg.train.seed = cfg.seed;
    cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn insert_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(CliError::Config(format!("malformed key {key:?}")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key:?}: {part} is not a table")))?;
    }
    Ok(())
}

/// Merges `over` into `base`; nested tables merge, other values replace.
pub fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_published_settings() {
        let d = RunConfig::preset(Preset::Density);
        assert_eq!((d.model.dz, d.train.batch_size, d.train.epochs), (32, 100, 1000));
        assert_eq!((d.schedule.sigma_x, d.schedule.sigma_z), (0.3, 0.15));
        assert_eq!((d.train.lr_max, d.train.lr_min), (1e-3, 1e-5));
        let i = RunConfig::preset(Preset::Imputation);
        assert_eq!((i.model.dz, i.train.batch_size, i.train.epochs), (64, 32, 800));
        assert_eq!((i.schedule.sigma_x, i.schedule.sigma_z), (0.15, 0.15));
        assert_eq!((i.train.lr_max, i.train.lr_min), (5e-4, 5e-6));
        let f = RunConfig::preset(Preset::Forecast);
        assert_eq!((f.schedule.sigma_x, f.schedule.sigma_z, f.forecast.members), (0.2, 0.1, 50));
    }

    #[test]
    fn flags_beat_file_beat_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\n[train]\nepochs = 12\nbatch_size = 7\n").unwrap();
        let o = Overrides { seed: Some(9), set: vec!["train.epochs=3".into()], ..Default::default() };
        let cfg = resolve(Some(&path), &o, Preset::Density).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 7);
        assert_eq!(cfg.train.lr_max, 1e-3);
    }

    #[test]
    fn preset_selected_by_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "preset = \"imputation\"\n").unwrap();
        let cfg = resolve(Some(&path), &Overrides::default(), Preset::Density).unwrap();
        assert_eq!(cfg.model.dz, 64);
    }

    #[test]
    fn resolved_config_round_trips() {
        let o = Overrides { set: vec!["data.source=\"ar1\"".into(), "schedule.alpha_const=0.4".into()], ..Default::default() };
        let cfg = resolve(None, &o, Preset::Forecast).unwrap();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let bad = Overrides { set: vec!["train.epoch=3".into()], ..Default::default() };
        assert!(matches!(resolve(None, &bad, Preset::Density), Err(CliError::Config(_))));
        let bad = Overrides { set: vec!["train.epochs=0".into()], ..Default::default() };
        assert!(matches!(resolve(None, &bad, Preset::Density), Err(CliError::Config(_))));
        let bad = Overrides { set: vec!["nonsense".into()], ..Default::default() };
        assert!(resolve(None, &bad, Preset::Density).is_err());
    }
}

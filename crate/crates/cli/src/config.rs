//! TOML run configuration with layered overrides: preset, file, environment
//! (`ADCLICK__SECTION__KEY=value`), then `key=value` arguments.

use std::path::{Path, PathBuf};

use adclick_core::datasets::Layout;
use adclick_core::network::TrainConfig;
use adclick_core::pipeline::{EngineSpec, IisProtocol};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::CliError;

pub const ENV_PREFIX: &str = "ADCLICK__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Click budgets reported in the interactive table.
    pub budgets: Vec<usize>,
    pub noc_target: f64,
    pub noc_cap: usize,
    pub fpr_limit: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = IisProtocol::default();
        Self {
            budgets: vec![2, 3, 5],
            noc_target: p.noc_target,
            noc_cap: p.cap,
            fpr_limit: p.fpr_limit,
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self) -> IisProtocol {
        IisProtocol {
            noc_target: self.noc_target,
            cap: self.noc_cap,
            fpr_limit: self.fpr_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub idle_timeout_secs: u64,
    /// Report IoU against ground truth after each click.
    pub evaluation_mode: bool,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            idle_timeout_secs: 30 * 60,
            evaluation_mode: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    /// Synthetic anomalies generated per category.
    pub per_category: usize,
    /// Directory of exported masks; switches to pseudo-label supervision.
    pub pseudo_labels: Option<PathBuf>,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            per_category: 64,
            pseudo_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    /// Simulated clicks per image for batch label export.
    pub clicks: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { clicks: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// `full` or `tiny`; selects the baseline every other key overrides.
    pub preset: String,
    pub dataset_root: PathBuf,
    pub layout: Layout,
    /// Empty means every category found under `dataset_root`.
    pub categories: Vec<String>,
    pub corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/banks/<dataset_root name>`.
    pub banks_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub device: String,
    pub engine: EngineSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seg: SegConfig,
    pub export: ExportConfig,
    pub serve: ServeConfig,
}

impl AppConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let (engine, train) = match name {
            "full" => (
                EngineSpec {
                    model: Default::default(),
                    extractor: Default::default(),
                    text: Default::default(),
                    coreset_fraction: 0.1,
                    prompt_seed: 0,
                },
                TrainConfig::default(),
            ),
            "tiny" => (
                EngineSpec::tiny(),
                TrainConfig {
                    steps: 300,
                    lr: 1e-3,
                    eval_every: 50,
                    ..TrainConfig::default()
                },
            ),
            other => return Err(CliError::config(format!("unknown preset `{other}` (expected full or tiny)"))),
        };
        Ok(Self {
            preset: name.into(),
            dataset_root: PathBuf::from("data"),
            layout: Layout::Mvtec,
            categories: Vec::new(),
            corpus: None,
            output_dir: PathBuf::from("runs/default"),
            banks_dir: None,
            checkpoint: None,
            device: "cpu".into(),
            engine,
            train,
            eval: EvalConfig::default(),
            seg: SegConfig::default(),
            export: ExportConfig::default(),
            serve: ServeConfig::default(),
        })
    }

    pub fn banks_dir(&self) -> PathBuf {
        self.banks_dir.clone().unwrap_or_else(|| {
            let tag = self
                .dataset_root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "root".into());
            self.output_dir.join("banks").join(tag)
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::config(e.to_string()))
    }
}

/// Parses a `key=value` override; the value is read as a TOML literal and
/// falls back to a plain string.
pub fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{raw}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::config(format!("override `{raw}` has an empty key")));
    }
    Ok((key.to_string(), parse_value(value.trim())))
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `ADCLICK__TRAIN__LR=1e-3` becomes `train.lr = 1e-3`.
pub fn env_overrides(vars: impl Iterator<Item = (String, String)>) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> = vars
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_lowercase().replace("__", "."), parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Builds the effective configuration. Later layers win.
pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<AppConfig, CliError> {
    let mut layer = Value::Table(Default::default());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
        layer = toml::from_str::<toml::Table>(&text)
            .map(Value::Table)
            .map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
    }
    for (k, v) in overrides {
        set_path(&mut layer, k, v.clone())?;
    }
    let preset = layer.get("preset").and_then(Value::as_str).unwrap_or("full").to_string();
    let mut base = Value::try_from(AppConfig::preset(&preset)?).map_err(|e| CliError::config(e.to_string()))?;
    merge(&mut base, layer);
    let cfg: AppConfig = base
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
    if cfg.device != "cpu" {
        return Err(CliError::new(
            "unsupported_device",
            format!("device `{}` is not available; only `cpu` is supported", cfg.device),
        ));
    }
    Ok(cfg)
}

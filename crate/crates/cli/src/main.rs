use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use adclick_cli::commands;
use adclick_cli::config::{self, AppConfig};
use adclick_cli::server;
use adclick_cli::CliError;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adclick", version, about = "Interactive prompt-guided anomaly segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each maps onto a config key and wins
/// over file and environment layers.
#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, env = "ADCLICK_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "ADCLICK_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Seeds model initialisation, coreset selection and training order.
    #[arg(long, env = "ADCLICK_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "ADCLICK_DEVICE")]
    device: Option<String>,
    #[arg(long, env = "ADCLICK_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Extra `section.key=value` overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic toy datasets, a prompt corpus and a config.
    Synth {
        #[arg(long, env = "ADCLICK_OUTPUT_DIR", default_value = "toy")]
        output_dir: PathBuf,
        #[arg(long, env = "ADCLICK_SEED", default_value_t = 1)]
        seed: u64,
    },
    /// Build per-category reference banks from defect-free training images.
    BuildBank(Common),
    /// Train the click-guided model.
    Train(Common),
    /// Train the click-free segmentation variant.
    TrainSeg(Common),
    /// Simulated-click evaluation: mIoU at fixed budgets and NoC.
    EvaluateIis {
        #[command(flatten)]
        common: Common,
        /// Comma-separated click budgets.
        #[arg(long, env = "ADCLICK_CLICKS", value_delimiter = ',')]
        clicks: Option<Vec<usize>>,
    },
    /// Anomaly detection metrics without clicks.
    EvaluateAd(Common),
    /// Label every defective test image with simulated clicks and export masks.
    Export {
        #[command(flatten)]
        common: Common,
        /// Clicks per image.
        #[arg(long, env = "ADCLICK_CLICKS")]
        clicks: Option<usize>,
    },
    /// Run the annotation HTTP service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "ADCLICK_PORT")]
        port: Option<u16>,
    },
}

fn toml_str(v: &std::path::Path) -> toml::Value {
    toml::Value::String(v.display().to_string())
}

fn load_config(common: &Common, extra: Vec<(String, toml::Value)>) -> Result<AppConfig, CliError> {
    let mut layers = config::env_overrides(std::env::vars());
    for raw in &common.overrides {
        layers.push(config::parse_override(raw)?);
    }
    if let Some(p) = &common.output_dir {
        layers.push(("output_dir".into(), toml_str(p)));
    }
    if let Some(p) = &common.checkpoint {
        layers.push(("checkpoint".into(), toml_str(p)));
    }
    if let Some(d) = &common.device {
        layers.push(("device".into(), toml::Value::String(d.clone())));
    }
    if let Some(s) = common.seed {
        let s = toml::Value::Integer(s as i64);
        layers.push(("engine.model.seed".into(), s.clone()));
        layers.push(("train.seed".into(), s));
    }
    layers.extend(extra);
    config::load(common.config.as_deref(), &layers)
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Synth { output_dir, seed } => commands::synth(&output_dir, seed),
        Command::BuildBank(c) => commands::build_bank(&load_config(&c, vec![])?),
        Command::Train(c) => commands::train_clicks(&load_config(&c, vec![])?),
        Command::TrainSeg(c) => commands::train_seg(&load_config(&c, vec![])?),
        Command::EvaluateIis { common, clicks } => {
            let extra = clicks
                .map(|b| {
                    let arr = b.into_iter().map(|k| toml::Value::Integer(k as i64)).collect();
                    vec![("eval.budgets".to_string(), toml::Value::Array(arr))]
                })
                .unwrap_or_default();
            commands::evaluate_iis_cmd(&load_config(&common, extra)?)
        }
        Command::EvaluateAd(c) => commands::evaluate_ad_cmd(&load_config(&c, vec![])?),
        Command::Export { common, clicks } => {
            let extra = clicks
                .map(|k| vec![("export.clicks".to_string(), toml::Value::Integer(k as i64))])
                .unwrap_or_default();
            commands::export_labels(&load_config(&common, extra)?)
        }
        Command::Serve { common, port } => {
            let extra = port
                .map(|p| vec![("serve.port".to_string(), toml::Value::Integer(p as i64))])
                .unwrap_or_default();
            let cfg = load_config(&common, extra)?;
            let mgr = Arc::new(commands::session_manager(&cfg)?);
            let addr = format!("{}:{}", cfg.serve.host, cfg.serve.port);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(mgr, &addr))?;
            Ok(String::new())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

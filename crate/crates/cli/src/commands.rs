//! Subcommand implementations. Each returns the text printed on success.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use adclick_core::clicks::{simulate_next_click, AnomalyMask};
use adclick_core::datasets::{build_reference_bank, list_categories, load_dataset, load_prompt_corpus, PromptCorpus, ReferenceBank, Split};
use adclick_core::extractor::FeatureExtractor;
use adclick_core::metrics::{format_ad_table, format_iis_table, mean_ad_row, mean_iis_row};
use adclick_core::network::{train, AdClickNet, TrainConfig};
use adclick_core::pipeline::{
    evaluate_ad, evaluate_iis, fixed_click_batch, prepare_samples, ClickTrainingSource, Engine, SegSupervision,
    SegTrainingSource,
};
use adclick_core::session::{ImageCatalog, PromptChoice, SessionConfig, SessionManager};
use adclick_core::synthetic::{toy_corpus, write_dataset, SyntheticConfig};
use adclick_core::Error;

use crate::config::AppConfig;
use crate::CliError;

type CliResult<T> = Result<T, CliError>;

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

pub fn categories(cfg: &AppConfig) -> CliResult<Vec<String>> {
    let cats = if cfg.categories.is_empty() {
        list_categories(&cfg.dataset_root)?
    } else {
        cfg.categories.clone()
    };
    if cats.is_empty() {
        return Err(CliError::new(
            "invalid_argument",
            format!("no categories under {}", cfg.dataset_root.display()),
        ));
    }
    Ok(cats)
}

fn corpus(cfg: &AppConfig) -> CliResult<PromptCorpus> {
    let path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::config("`corpus` must point to a prompt corpus JSON file"))?;
    Ok(load_prompt_corpus(path)?)
}

fn bank_path(cfg: &AppConfig, category: &str) -> PathBuf {
    cfg.banks_dir().join(format!("{category}.bank"))
}

fn bank_for(cfg: &AppConfig, category: &str, extractor: &dyn FeatureExtractor) -> CliResult<ReferenceBank> {
    let index = load_dataset(&cfg.dataset_root, cfg.layout, category, Split::Train)?.with_resolution(extractor.resolution());
    Ok(build_reference_bank(&index, extractor, cfg.engine.coreset_fraction, cfg.engine.model.seed)?)
}

/// Loads cached banks whose extractor matches, building the rest.
fn banks(
    cfg: &AppConfig,
    extractor: &dyn FeatureExtractor,
    cats: &[String],
) -> CliResult<BTreeMap<String, ReferenceBank>> {
    let mut out = BTreeMap::new();
    for c in cats {
        let path = bank_path(cfg, c);
        let cached = path
            .exists()
            .then(|| ReferenceBank::load(&path))
            .transpose()?
            .filter(|b| b.extractor_fingerprint == extractor.fingerprint());
        let bank = match cached {
            Some(b) => b,
            None => {
                let b = bank_for(cfg, c, extractor)?;
                create_dir(&cfg.banks_dir())?;
                b.save(&path)?;
                b
            }
        };
        out.insert(c.clone(), bank);
    }
    Ok(out)
}

fn engine_from(cfg: &AppConfig, model: AdClickNet, cats: &[String]) -> CliResult<Engine> {
    let mut spec = cfg.engine.clone();
    spec.model = model.config().clone();
    let extractor = spec.build_extractor()?;
    let banks = banks(cfg, &extractor, cats)?;
    Ok(spec.assemble(model, banks, corpus(cfg)?)?)
}

fn checkpoint_path(cfg: &AppConfig) -> CliResult<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::config("this command needs `--checkpoint` (or `checkpoint` in the config)"))
}

fn load_engine(cfg: &AppConfig, cats: &[String]) -> CliResult<Engine> {
    let (model, step) = AdClickNet::load(checkpoint_path(cfg)?)?;
    log::info!("loaded checkpoint at step {step}");
    engine_from(cfg, model, cats)
}

fn prepared(engine: &Engine, cfg: &AppConfig, category: &str, defective_only: bool) -> CliResult<Vec<adclick_core::pipeline::PreparedSample>> {
    let index = load_dataset(&cfg.dataset_root, cfg.layout, category, Split::Test)?;
    Ok(prepare_samples(engine, &index, defective_only)?)
}

pub fn build_bank(cfg: &AppConfig) -> CliResult<String> {
    let cats = categories(cfg)?;
    let extractor = cfg.engine.build_extractor()?;
    create_dir(&cfg.banks_dir())?;
    let mut lines = Vec::new();
    for c in &cats {
        let bank = bank_for(cfg, c, &extractor)?;
        let path = bank_path(cfg, c);
        bank.save(&path)?;
        lines.push(format!("{c}: {} vectors -> {}", bank.len(), path.display()));
    }
    Ok(lines.join("\n"))
}

fn train_summary(report: &adclick_core::network::TrainReport, out: &Path) -> String {
    let first = report.losses.first().map(|l| l.total).unwrap_or(f64::NAN);
    let last = report.losses.last().map(|l| l.total).unwrap_or(f64::NAN);
    format!(
        "trained {} steps: loss {first:.4} -> {last:.4}; checkpoint {}",
        report.losses.len(),
        out.join("checkpoint_final.safetensors").display()
    )
}

fn save_run_config(cfg: &AppConfig, engine: &Engine) -> CliResult<()> {
    let mut saved = cfg.clone();
    saved.engine.model = engine.model.config().clone();
    saved.checkpoint = Some(cfg.output_dir.join("checkpoint_final.safetensors"));
    write_text(&cfg.output_dir.join("run_config.toml"), &saved.to_toml()?)
}

pub fn train_clicks(cfg: &AppConfig) -> CliResult<String> {
    let cats = categories(cfg)?;
    let mut model_cfg = cfg.engine.model.clone();
    model_cfg.seg_mode = false;
    let model = AdClickNet::new(model_cfg)?;
    if let Some(ck) = &cfg.checkpoint {
        model.load_weights(ck)?;
    }
    let engine = engine_from(cfg, model, &cats)?;
    let mut samples = Vec::new();
    for c in &cats {
        samples.extend(prepared(&engine, cfg, c, true)?);
    }
    let fixed = fixed_click_batch(&engine, &samples, cfg.train.batch_size)?;
    create_dir(&cfg.output_dir)?;
    let mut source = ClickTrainingSource::new(&engine, samples, cfg.train.clone())?;
    let report = train(&engine.model, &mut source, Some(&fixed), &cfg.train, Some(&cfg.output_dir))?;
    save_run_config(cfg, &engine)?;
    Ok(train_summary(&report, &cfg.output_dir))
}

pub fn train_seg(cfg: &AppConfig) -> CliResult<String> {
    let cats = categories(cfg)?;
    let mut model_cfg = cfg.engine.model.clone();
    model_cfg.seg_mode = true;
    let model = AdClickNet::new(model_cfg)?;
    if let Some(ck) = &cfg.checkpoint {
        model.load_weights(ck)?;
    }
    let engine = engine_from(cfg, model, &cats)?;
    let supervision = match &cfg.seg.pseudo_labels {
        Some(dir) => SegSupervision::PseudoLabels(dir.clone()),
        None => SegSupervision::Synthetic {
            per_category: cfg.seg.per_category,
        },
    };
    create_dir(&cfg.output_dir)?;
    let tc: TrainConfig = cfg.train.clone();
    let mut source = SegTrainingSource::new(&engine, &cfg.dataset_root, cfg.layout, &cats, &supervision, tc.clone())?;
    let report = train(&engine.model, &mut source, None, &tc, Some(&cfg.output_dir))?;
    save_run_config(cfg, &engine)?;
    Ok(train_summary(&report, &cfg.output_dir))
}

pub fn evaluate_iis_cmd(cfg: &AppConfig) -> CliResult<String> {
    let cats = categories(cfg)?;
    let engine = load_engine(cfg, &cats)?;
    if engine.model.config().seg_mode {
        return Err(Error::ClicksInSegMode.into());
    }
    let protocol = cfg.eval.protocol();
    let mut rows = Vec::new();
    for c in &cats {
        let samples = prepared(&engine, cfg, c, true)?;
        let (row, _) = evaluate_iis(&engine, c, &samples, &cfg.eval.budgets, &protocol)?;
        rows.push(row);
    }
    if rows.len() > 1 {
        rows.extend(mean_iis_row(&rows));
    }
    let table = format_iis_table(&rows);
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("iis_table.md"), &table)?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| CliError::new("json", e.to_string()))?;
    write_text(&cfg.output_dir.join("iis_results.json"), &json)?;
    Ok(table)
}

pub fn evaluate_ad_cmd(cfg: &AppConfig) -> CliResult<String> {
    let cats = categories(cfg)?;
    let engine = load_engine(cfg, &cats)?;
    let mut rows = Vec::new();
    for c in &cats {
        let samples = prepared(&engine, cfg, c, false)?;
        let (row, _) = evaluate_ad(&engine, c, &samples, cfg.eval.fpr_limit)?;
        rows.push(row);
    }
    if rows.len() > 1 {
        rows.extend(mean_ad_row(&rows));
    }
    let table = format_ad_table(&rows);
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("ad_table.md"), &table)?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| CliError::new("json", e.to_string()))?;
    write_text(&cfg.output_dir.join("ad_results.json"), &json)?;
    Ok(table)
}

pub fn session_manager(cfg: &AppConfig) -> CliResult<SessionManager> {
    let cats = categories(cfg)?;
    let engine = match &cfg.checkpoint {
        Some(_) => Some(Arc::new(load_engine(cfg, &cats)?)),
        None => {
            log::warn!("no checkpoint configured; sessions will fail with model_not_loaded");
            None
        }
    };
    let catalog = ImageCatalog::from_dataset(&cfg.dataset_root, cfg.layout, &cats)?;
    let mut sc = SessionConfig::new(&cfg.output_dir);
    sc.idle_timeout = Duration::from_secs(cfg.serve.idle_timeout_secs);
    sc.evaluation_mode = cfg.serve.evaluation_mode;
    Ok(SessionManager::new(engine, catalog, sc))
}

/// Simulated annotator over every defective test image: `k` clicks, then a
/// label export. The result directory feeds pseudo-label training.
pub fn export_labels(cfg: &AppConfig) -> CliResult<String> {
    let mgr = session_manager(cfg)?;
    let k = cfg.export.clicks;
    if k == 0 {
        return Err(Error::ZeroClicks.into());
    }
    let res = cfg.engine.model.resolution;
    let entries: Vec<_> = mgr.list_images().into_iter().filter(|e| e.mask_path.is_some()).collect();
    let mut written = 0;
    let mut total_clicks = 0;
    for e in &entries {
        let gt = adclick_core::datasets::load_mask(e.mask_path.as_ref().unwrap(), res)?;
        let prompt = PromptChoice::Key {
            object: e.category.clone(),
            defect: e.defect_type.clone(),
        };
        let s = mgr.open_session(&e.image_id, &e.category, &prompt)?;
        let mut pred = AnomalyMask::empty(res, res);
        for t in 0..k {
            let Some(c) = simulate_next_click(&pred, gt.view(), t)? else { break };
            mgr.submit_click(&s.session_id, c.x, c.y, c.polarity)?;
            let view = mgr.get_mask(&s.session_id)?;
            let mask = adclick_core::session::decode_mask_png(&view.mask_png)?;
            pred = AnomalyMask::new(mask.mapv(|b| b as u8 as f32), 0.5)?;
            total_clicks += 1;
        }
        mgr.export(&s.session_id)?;
        written += 1;
    }
    Ok(format!(
        "exported {written} labels ({:.1} clicks each) to {}",
        total_clicks as f64 / written.max(1) as f64,
        cfg.output_dir.join("labels").display()
    ))
}

/// Writes the toy dataset pair, a prompt corpus and a ready-to-run config.
pub fn synth(out: &Path, seed: u64) -> CliResult<String> {
    create_dir(out)?;
    let fit = out.join("fit");
    let held_out = out.join("eval");
    write_dataset(&fit, &SyntheticConfig { seed, ..Default::default() })?;
    write_dataset(&held_out, &SyntheticConfig {
        seed: seed.wrapping_add(1),
        test_per_defect: 5,
        ..Default::default()
    })?;
    let cats: Vec<String> = SyntheticConfig::default().categories;
    let corpus_path = out.join("corpus.json");
    write_text(&corpus_path, &toy_corpus(&cats).to_json())?;
    let mut cfg = AppConfig::preset("tiny")?;
    cfg.dataset_root = fit;
    cfg.categories = cats;
    cfg.corpus = Some(corpus_path);
    cfg.output_dir = out.join("run");
    let config_path = out.join("toy.toml");
    write_text(&config_path, &cfg.to_toml()?)?;
    Ok(format!(
        "toy data in {} and {}; config {}",
        out.join("fit").display(),
        held_out.display(),
        config_path.display()
    ))
}

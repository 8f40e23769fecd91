#![allow(dead_code)]

use std::path::{Path, PathBuf};

use adclick_core::datasets::Layout;
use adclick_core::network::{AdClickNet, ModelConfig};
use adclick_core::pipeline::{build_banks, Engine, EngineSpec};
use adclick_core::synthetic::{toy_corpus, write_dataset, SyntheticConfig, TOY_CATEGORIES};

pub fn categories() -> Vec<String> {
    TOY_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

/// Small toy dataset: 4 train goods, 1 test good, 2 per defect.
pub fn small_dataset(root: &Path, seed: u64) -> PathBuf {
    let cfg = SyntheticConfig {
        train_good: 4,
        test_good: 1,
        test_per_defect: 2,
        seed,
        ..Default::default()
    };
    write_dataset(root, &cfg).unwrap();
    root.to_path_buf()
}

pub fn engine_with(root: &Path, model: ModelConfig) -> Engine {
    let spec = EngineSpec {
        model,
        ..EngineSpec::tiny()
    };
    let ex = spec.build_extractor().unwrap();
    let banks = build_banks(root, Layout::Mvtec, &categories(), &ex, spec.coreset_fraction, 0).unwrap();
    spec.assemble(AdClickNet::new(spec.model.clone()).unwrap(), banks, toy_corpus(&categories()))
        .unwrap()
}

pub fn untrained_engine(root: &Path) -> Engine {
    engine_with(root, ModelConfig::tiny())
}

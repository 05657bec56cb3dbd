//! Training and ablation runs with their on-disk artifacts.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use spygr_harness::ablation::{run_ablation, AblationTable, Thresholds};
use spygr_harness::train::{evaluate, test_split, train, write_trace, Evaluation, TrainConfig};

use crate::config::RunConfig;
use crate::error::Result;
use crate::manifest::{write_json, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub first_loss: f64,
    pub final_loss: f64,
    pub evaluation: Evaluation,
    pub outputs: Vec<PathBuf>,
}

/// Trains `cfg.train`, scores the held-out split, and writes the trace,
/// weights, evaluation and manifest under `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let outcome = train(&cfg.train)?;
    let evaluation = evaluate(&outcome.model, &test_split(&cfg.train)?, cfg.train.threads)?;
    let mut outputs = Vec::new();
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        let trace = dir.join("trace.csv");
        let model = dir.join("model");
        let eval = dir.join("eval.json");
        write_trace(&trace, &outcome.trace)?;
        outcome.model.save(&model)?;
        write_json(&eval, &evaluation)?;
        outputs = vec![trace, model, eval];
        RunManifest::new("train", cfg, outputs.clone()).write(dir)?;
    }
    Ok(TrainReport {
        config: cfg.train.clone(),
        first_loss: outcome.trace.first().map_or(f64::NAN, |t| t.loss),
        final_loss: outcome.trace.last().map_or(f64::NAN, |t| t.loss),
        evaluation,
        outputs,
    })
}

/// Every selected row on every seed, with the trend checks.
pub fn cmd_ablate(cfg: &RunConfig, thresholds: Thresholds) -> Result<AblationTable> {
    let table = run_ablation(&cfg.ablation, &cfg.seeds, &cfg.train, thresholds)?;
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        let json = dir.join("ablation.json");
        let text = dir.join("ablation.txt");
        write_json(&json, &table)?;
        fs::write(&text, table.render())?;
        RunManifest::new("ablate", cfg, vec![json, text]).write(dir)?;
    }
    Ok(table)
}

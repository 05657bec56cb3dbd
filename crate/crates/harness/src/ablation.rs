//! Multi-seed ablation table over the cumulative rows.

use serde::{Deserialize, Serialize};

use crate::data::generate_range;
use crate::error::{HarnessError, Result};
use crate::model::AblationRow;
use crate::train::{evaluate, train_on, Evaluation, TrainConfig};

/// Pass thresholds for the ablation checks, in mIoU / accuracy fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Chance accuracy on keyed pixels (one of four key classes).
    pub chance: f64,
    pub chance_margin: f64,
    pub min_gap: f64,
    pub min_wins: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            chance: 0.25,
            chance_margin: 0.10,
            min_gap: 0.10,
            min_wins: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: f64,
    pub keyed_accuracy: f64,
    pub pixel_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub row: AblationRow,
    pub runs: Vec<SeedResult>,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mean_keyed_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    /// Baseline keyed accuracy stayed under `chance + chance_margin` on every seed.
    pub locality_cap: Option<bool>,
    /// Seeds on which the full model beat the baseline by `min_gap`.
    pub wins: Option<usize>,
    pub trend: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub thresholds: Thresholds,
    pub rows: Vec<RowSummary>,
    pub checks: Checks,
}

impl AblationTable {
    pub fn row(&self, row: AblationRow) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.row == row)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<18} {:>8} {:>8} {:>8}  per-seed mIoU\n",
            "row", "mIoU", "std", "keyed"
        );
        for r in &self.rows {
            let per: Vec<String> = r.runs.iter().map(|x| format!("{:.4}", x.miou)).collect();
            s.push_str(&format!(
                "{:<18} {:>8.4} {:>8.4} {:>8.4}  {}\n",
                r.row.name(),
                r.mean_miou,
                r.std_miou,
                r.mean_keyed_accuracy,
                per.join(" ")
            ));
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and scores `config` once per seed. The seed fixes the data,
/// initialization, and batch order.
pub fn run_row(base: &TrainConfig, row: AblationRow, seed: u64) -> Result<(SeedResult, Evaluation)> {
    let config = TrainConfig {
        ablation: row,
        seed,
        ..base.clone()
    };
    config.validate()?;
    let task = config.task();
    let train = generate_range(&task, 0, config.train_samples)?;
    let test = generate_range(&task, config.train_samples as u64, config.test_samples)?;
    let outcome = train_on(&config, &train)?;
    let eval = evaluate(&outcome.model, &test, config.threads)?;
    let result = SeedResult {
        seed,
        miou: eval.miou,
        keyed_accuracy: eval.keyed_accuracy,
        pixel_accuracy: eval.pixel_accuracy,
        per_class_iou: eval.per_class_iou.clone(),
        first_loss: outcome.trace.first().map_or(f64::NAN, |t| t.loss),
        last_loss: outcome.trace.last().map_or(f64::NAN, |t| t.loss),
    };
    Ok((result, eval))
}

pub fn run_ablation(
    rows: &[AblationRow],
    seeds: &[u64],
    base: &TrainConfig,
    thresholds: Thresholds,
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(HarnessError::Config(format!(
            "an ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    if rows.is_empty() {
        return Err(HarnessError::Config("no ablation rows selected".into()));
    }
    let mut summaries = Vec::with_capacity(rows.len());
    for &row in rows {
        let runs = seeds
            .iter()
            .map(|&s| run_row(base, row, s).map(|(r, _)| r))
            .collect::<Result<Vec<_>>>()?;
        let mious: Vec<f64> = runs.iter().map(|r| r.miou).collect();
        let keyed: Vec<f64> = runs.iter().map(|r| r.keyed_accuracy).collect();
        let (mean_miou, std_miou) = mean_std(&mious);
        summaries.push(RowSummary {
            row,
            runs,
            mean_miou,
            std_miou,
            mean_keyed_accuracy: mean_std(&keyed).0,
        });
    }
    let checks = checks(&summaries, &thresholds);
    Ok(AblationTable {
        config: base.clone(),
        seeds: seeds.to_vec(),
        thresholds,
        rows: summaries,
        checks,
    })
}

fn checks(rows: &[RowSummary], t: &Thresholds) -> Checks {
    let fcn = rows.iter().find(|r| r.row == AblationRow::FcnOnly);
    let full = rows.iter().find(|r| r.row == AblationRow::Pyramid);
    let locality_cap =
        fcn.map(|f| f.runs.iter().all(|r| r.keyed_accuracy <= t.chance + t.chance_margin));
    let wins = match (fcn, full) {
        (Some(f), Some(p)) => Some(
            f.runs
                .iter()
                .zip(&p.runs)
                .filter(|(a, b)| b.miou - a.miou >= t.min_gap)
                .count(),
        ),
        _ => None,
    };
    Checks {
        locality_cap,
        wins,
        trend: wins.map(|w| w >= t.min_wins),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: u64, miou: f64, keyed: f64) -> SeedResult {
        SeedResult {
            seed,
            miou,
            keyed_accuracy: keyed,
            pixel_accuracy: 0.0,
            per_class_iou: vec![],
            first_loss: 1.0,
            last_loss: 0.5,
        }
    }

    fn summary(row: AblationRow, runs: Vec<SeedResult>) -> RowSummary {
        RowSummary {
            row,
            runs,
            mean_miou: 0.0,
            std_miou: 0.0,
            mean_keyed_accuracy: 0.0,
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trend_needs_two_wins() {
        let fcn = summary(
            AblationRow::FcnOnly,
            vec![run(0, 0.30, 0.26), run(1, 0.30, 0.30), run(2, 0.30, 0.34)],
        );
        let full = summary(
            AblationRow::Pyramid,
            vec![run(0, 0.45, 0.8), run(1, 0.35, 0.5), run(2, 0.41, 0.8)],
        );
        let c = checks(&[fcn.clone(), full.clone()], &Thresholds::default());
        assert_eq!(c.locality_cap, Some(true));
        assert_eq!(c.wins, Some(2));
        assert_eq!(c.trend, Some(true));

        let mut weak = full;
        weak.runs[2].miou = 0.39;
        let c = checks(&[fcn.clone(), weak], &Thresholds::default());
        assert_eq!(c.trend, Some(false));

        let mut leaky = fcn;
        leaky.runs[1].keyed_accuracy = 0.36;
        assert_eq!(checks(&[leaky], &Thresholds::default()).locality_cap, Some(false));
    }

    #[test]
    fn too_few_seeds_is_a_config_error() {
        let e = run_ablation(&[AblationRow::FcnOnly], &[0, 1], &TrainConfig::default(), Thresholds::default());
        assert!(matches!(e, Err(HarnessError::Config(_))));
    }
}

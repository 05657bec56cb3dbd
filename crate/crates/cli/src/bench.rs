//! Cost-model report plus measured wall time of the factored and
//! materialized forward paths.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use spygr::costmodel::{estimate, CostQuery, CostReport};
use spygr::init::{rng, uniform};
use spygr::layer::graph_reason;
use spygr::layer::oracle::graph_reason_naive;
use spygr::{AttentionMode, Shape, SpyGRParams};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{write_json, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub positions: usize,
    pub factored_ms: f64,
    pub naive_ms: Option<f64>,
    /// Why the materialized path was not run.
    pub naive_refused: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub shape: [usize; 4],
    pub m: usize,
    pub c_out: usize,
    pub levels: usize,
    pub single: CostReport,
    pub pyramid: Option<CostReport>,
    pub timing: Option<Timing>,
}

fn best_ms<R>(repeats: usize, mut f: impl FnMut() -> spygr::Result<R>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Wall time of one forward pass at `shape`, best of `repeats`.
pub fn time_paths(cfg: &RunConfig) -> Result<Timing> {
    let [_, c, h, w] = cfg.shape;
    let n = h * w;
    let mut r = rng(cfg.seed);
    let x = uniform::<f64>(Shape(cfg.shape), -1.0, 1.0, &mut r);
    let p = SpyGRParams::<f64>::init(c, cfg.m, cfg.c_out(), AttentionMode::Dynamic, true, &mut r);
    let factored_ms = best_ms(cfg.bench.repeats, || graph_reason(&x, &p))?;
    let (naive_ms, naive_refused) = if n > cfg.oracle_cap {
        let msg = spygr::Error::OracleSize { n, cap: cfg.oracle_cap }.to_string();
        (None, Some(msg))
    } else {
        (Some(best_ms(cfg.bench.repeats, || graph_reason_naive(&x, &p, cfg.oracle_cap))?), None)
    };
    Ok(Timing {
        positions: n,
        factored_ms,
        naive_ms,
        naive_refused,
    })
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let [batch, c, h, w] = cfg.shape;
    if batch != 1 {
        return Err(CliError::Config(format!("bench takes one image, got N = {batch}")));
    }
    let single = estimate(&CostQuery::single(h, w, c, cfg.m, cfg.c_out()))?;
    let pyramid = if cfg.levels > 1 {
        Some(estimate(&CostQuery {
            levels: cfg.levels,
            ..CostQuery::single(h, w, c, cfg.m, cfg.c_out())
        })?)
    } else {
        None
    };
    let timing = if cfg.bench.timing { Some(time_paths(cfg)?) } else { None };
    let report = BenchReport {
        shape: cfg.shape,
        m: cfg.m,
        c_out: cfg.c_out(),
        levels: cfg.levels,
        single,
        pyramid,
        timing,
    };
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir)?;
        write_json(dir.join("bench.json"), &report)?;
        RunManifest::new("bench", cfg, vec![dir.join("bench.json")]).write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_naive_path_over_the_cap() {
        let cfg = RunConfig {
            shape: [1, 2, 9, 9],
            m: 2,
            oracle_cap: 80,
            ..RunConfig::default()
        };
        let t = time_paths(&cfg).unwrap();
        assert!(t.naive_ms.is_none());
        assert!(t.naive_refused.unwrap().contains("n = 81"));
    }

    #[test]
    fn cost_only_report() {
        let mut cfg = RunConfig {
            shape: [1, 8, 12, 12],
            m: 4,
            levels: 3,
            ..RunConfig::default()
        };
        cfg.bench.timing = false;
        let r = cmd_bench(&cfg).unwrap();
        assert!(r.pyramid.unwrap().flops > r.single.flops);
        assert!(r.timing.is_none());
    }
}

//! Run configuration: defaults, then an optional JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spygr::layer::oracle::DEFAULT_ORACLE_CAP;
use spygr_harness::{AblationRow, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub oracle_cases: usize,
    pub extent_range: [usize; 2],
    pub channels: Vec<usize>,
    pub embeds: Vec<usize>,
    pub oracle_tol: f64,
    pub laplacian_cases: usize,
    pub max_positions: usize,
    pub probes_per_case: usize,
    pub null_tol: f64,
    pub spectrum_slack: f64,
    pub grad_shape: [usize; 4],
    pub grad_embed: usize,
    pub grad_levels: usize,
    pub grad_step: f64,
    pub grad_rel_tol: f64,
    pub kink_margin: f64,
    pub smooth_search: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            oracle_cases: 50,
            extent_range: [5, 16],
            channels: vec![4, 8, 16],
            embeds: vec![2, 4, 8],
            oracle_tol: 1e-10,
            laplacian_cases: 20,
            max_positions: 64,
            probes_per_case: 100,
            null_tol: 1e-8,
            spectrum_slack: 1e-10,
            grad_shape: [1, 6, 9, 9],
            grad_embed: 4,
            grad_levels: 4,
            grad_step: 1e-5,
            grad_rel_tol: 1e-4,
            kink_margin: 1e-4,
            smooth_search: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    /// Time the factored and naive forward passes as well as reporting costs.
    pub timing: bool,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            timing: true,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapSettings {
    /// Layer or pyramid directory; weights are drawn from the seed if absent.
    pub params: Option<PathBuf>,
    /// `[1, C, H, W]` tensor file; a synthetic task image if absent.
    pub image: Option<PathBuf>,
    /// `[y, x]`; the image center if absent.
    pub pixel: Option<[usize; 2]>,
}

impl Default for HeatmapSettings {
    fn default() -> Self {
        HeatmapSettings {
            params: None,
            image: None,
            pixel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub shape: [usize; 4],
    pub levels: usize,
    pub m: usize,
    /// Defaults to the input channel count.
    pub c_out: Option<usize>,
    pub oracle_cap: usize,
    pub ablation: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub verify: VerifySettings,
    pub bench: BenchSettings,
    pub heatmap: HeatmapSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            shape: [1, 512, 97, 97],
            levels: 4,
            m: 64,
            c_out: None,
            oracle_cap: DEFAULT_ORACLE_CAP,
            ablation: AblationRow::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            out: None,
            train: TrainConfig::default(),
            verify: VerifySettings::default(),
            bench: BenchSettings::default(),
            heatmap: HeatmapSettings::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the file or default.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub shape: Option<[usize; 4]>,
    pub levels: Option<usize>,
    pub m: Option<usize>,
    pub ablation: Option<Vec<AblationRow>>,
    pub out: Option<PathBuf>,
    pub oracle_cap: Option<usize>,
    pub iters: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub params: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub pixel: Option<[usize; 2]>,
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file`, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flags that name a training knob also set it on `train`.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.train.seed = s;
        }
        if let Some(s) = o.shape {
            self.shape = s;
        }
        if let Some(l) = o.levels {
            self.levels = l;
            self.train.pyramid_levels = l;
        }
        if let Some(m) = o.m {
            self.m = m;
            self.train.embed = m;
        }
        if let Some(rows) = &o.ablation {
            self.ablation = rows.clone();
            if let Some(&first) = rows.first() {
                self.train.ablation = first;
            }
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(cap) = o.oracle_cap {
            self.oracle_cap = cap;
        }
        if let Some(i) = o.iters {
            self.train.total_iters = i;
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(p) = &o.params {
            self.heatmap.params = Some(p.clone());
        }
        if let Some(p) = &o.image {
            self.heatmap.image = Some(p.clone());
        }
        if let Some(p) = o.pixel {
            self.heatmap.pixel = Some(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.shape.contains(&0) {
            return bad(format!("shape {:?} has a zero extent", self.shape));
        }
        if self.levels == 0 || self.m == 0 {
            return bad("levels and m must be positive".into());
        }
        if self.c_out == Some(0) {
            return bad("c_out must be positive".into());
        }
        if self.ablation.is_empty() {
            return bad("at least one ablation row is required".into());
        }
        let v = &self.verify;
        if v.extent_range[0] == 0 || v.extent_range[0] > v.extent_range[1] {
            return bad(format!("verify.extent_range {:?} is empty", v.extent_range));
        }
        if v.channels.contains(&0) || v.embeds.contains(&0) || v.channels.is_empty() || v.embeds.is_empty() {
            return bad("verify.channels and verify.embeds need positive entries".into());
        }
        if v.max_positions == 0 || v.grad_shape.contains(&0) || v.grad_embed == 0 || v.grad_levels == 0 {
            return bad("verify extents must be positive".into());
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn c_out(&self) -> usize {
        self.c_out.unwrap_or(self.shape[1])
    }
}

/// Parses `N,C,H,W`.
pub fn parse_shape(s: &str) -> std::result::Result<[usize; 4], String> {
    let parts = parse_list::<usize>(s)?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected N,C,H,W, got {} values", v.len()))
}

/// Parses `Y,X`.
pub fn parse_pixel(s: &str) -> std::result::Result<[usize; 2], String> {
    let parts = parse_list::<usize>(s)?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected Y,X, got {} values", v.len()))
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

pub fn parse_rows(s: &str) -> std::result::Result<Vec<AblationRow>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<AblationRow>().map_err(|e| e.to_string()))
        .collect()
}

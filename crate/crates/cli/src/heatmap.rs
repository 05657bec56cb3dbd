//! Similarity rows rendered as grayscale images, one per pyramid level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spygr::init::rng;
use spygr::io::{load_params, load_pyramid, load_tensor, PYRAMID_FILE};
use spygr::layer::similarity_factors;
use spygr::pyramid::{level_inputs, max_levels, upsample};
use spygr::{AttentionMode, PyramidConfig, Shape, Tensor};
use spygr_harness::data::{generate_sample, TaskSpec};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{write_json, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelHeatmap {
    pub level: usize,
    pub extent: [usize; 2],
    /// The queried pixel in this level's grid.
    pub pixel: [usize; 2],
    pub min: f64,
    pub max: f64,
    /// Similarity row at level resolution, row-major.
    pub values: Vec<f64>,
    /// 8-bit image at input resolution, row-major.
    #[serde(skip)]
    pub gray: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub image_shape: [usize; 4],
    pub pixel: [usize; 2],
    pub levels: Vec<LevelHeatmap>,
    pub outputs: Vec<PathBuf>,
}

/// Binary PGM (P5) bytes.
pub fn pgm_bytes(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(values: &[f64]) -> (Vec<f64>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let norm = values
        .iter()
        .map(|v| if span > 0.0 { (v - min) / span } else { 0.0 })
        .collect();
    (norm, min, max)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row `pixel` of every level's similarity, rescaled to the input grid.
pub fn similarity_heatmaps(
    image: &Tensor<f64>,
    config: &PyramidConfig<f64>,
    pixel: [usize; 2],
) -> Result<Vec<LevelHeatmap>> {
    let [n, c, h, w] = image.shape().0;
    if n != 1 {
        return Err(CliError::Config(format!("heatmap takes one image, got N = {n}")));
    }
    if c != config.channels() {
        return Err(CliError::Config(format!(
            "image has {c} channels, parameters expect {}",
            config.channels()
        )));
    }
    let [py, px] = pixel;
    if py >= h || px >= w {
        return Err(CliError::Config(format!("pixel ({py}, {px}) outside the {h}x{w} image")));
    }
    config
        .check_extent(h, w)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut maps = Vec::with_capacity(config.levels);
    for (k, xk) in level_inputs(image, config.levels).iter().enumerate() {
        let (hk, wk) = (xk.shape().h(), xk.shape().w());
        let at = [py >> k, px >> k];
        let factors = similarity_factors(xk, config.level(k))?;
        let row = factors.similarity_row(at[0] * wk + at[1])?;
        let values = row.widened();
        let (norm, min, max) = normalize(&values);
        let small = Tensor::from_vec(Shape::new(1, 1, hk, wk), norm)?;
        let gray = upsample(&small, h, w)?.data().iter().map(|&v| quantize(v)).collect();
        maps.push(LevelHeatmap {
            level: k,
            extent: [hk, wk],
            pixel: at,
            min,
            max,
            values,
            gray,
        });
    }
    Ok(maps)
}

fn load_config(dir: &Path) -> Result<PyramidConfig<f64>> {
    if dir.join(PYRAMID_FILE).exists() {
        Ok(load_pyramid(dir)?)
    } else {
        Ok(PyramidConfig::single(load_params(dir)?))
    }
}

fn load_image(cfg: &RunConfig) -> Result<Tensor<f64>> {
    match &cfg.heatmap.image {
        Some(path) => Ok(load_tensor(path)?),
        None => {
            let size = cfg.train.image_size;
            Ok(generate_sample(&TaskSpec::new(size, size, cfg.seed), 0)?.image)
        }
    }
}

pub fn cmd_heatmap(cfg: &RunConfig) -> Result<HeatmapReport> {
    let image = load_image(cfg)?;
    let [_, c, h, w] = image.shape().0;
    let config = match &cfg.heatmap.params {
        Some(dir) => load_config(dir)?,
        None => {
            let levels = cfg.levels.min(max_levels(h, w));
            PyramidConfig::init(levels, c, cfg.m, AttentionMode::Dynamic, true, false, &mut rng(cfg.seed))
        }
    };
    let pixel = cfg.heatmap.pixel.unwrap_or([h / 2, w / 2]);
    let levels = similarity_heatmaps(&image, &config, pixel)?;
    let mut outputs = Vec::new();
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        for m in &levels {
            let pgm = dir.join(format!("heatmap_level{}.pgm", m.level));
            let json = dir.join(format!("heatmap_level{}.json", m.level));
            fs::write(&pgm, pgm_bytes(w, h, &m.gray))?;
            write_json(&json, m)?;
            outputs.extend([pgm, json]);
        }
        RunManifest::new("heatmap", cfg, outputs.clone()).write(dir)?;
    }
    Ok(HeatmapReport {
        image_shape: image.shape().0,
        pixel,
        levels,
        outputs,
    })
}

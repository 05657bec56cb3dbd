//! Synthetic segmentation task that needs long-range context.
//!
//! Every image has a small saturated "key" square near one corner and a set
//! of textured cells, clipped to pixels at least `H/2` from the key center. All
//! textured pixels share one class, chosen by the key's color; the key
//! itself and the plain surround are background. Textures are drawn from the
//! same distribution for every class, so a pixel's class cannot be read from
//! any window that misses the key.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spygr::io::{load_tensor, save_tensor};
use spygr::{Shape, Tensor};

use crate::error::{HarnessError, Result};

pub const NUM_CLASSES: usize = 5;
pub const BACKGROUND: usize = 0;
pub const CELL: usize = 8;
/// Probability that a cell carries texture.
pub const TEXTURE_PROB: f64 = 0.9;

const KEY_COLORS: [[f64; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, 3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    /// `H * W` class indices.
    pub label: Vec<usize>,
    pub key_class: usize,
    pub index: u64,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape().h()
    }

    pub fn width(&self) -> usize {
        self.image.shape().w()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Drop the key so labels carry no visible evidence.
    pub control: bool,
}

impl TaskSpec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        TaskSpec {
            height,
            width,
            seed,
            control: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(HarnessError::Config(format!(
                "synthetic images need H, W >= 32, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn key_size(&self) -> usize {
        (self.height.min(self.width) * 5 / 32).max(4)
    }

    pub fn min_distance(&self) -> f64 {
        self.height as f64 / 2.0
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Sample `index` of the task; independent of how many others are drawn.
pub fn generate_sample(spec: &TaskSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut r = sample_rng(spec.seed, index);
    let mut img = vec![0.0; 3 * h * w];
    for v in img.iter_mut() {
        *v = 0.5 + r.gen_range(-0.04..0.04);
    }
    let mut label = vec![BACKGROUND; h * w];

    let key_color = r.gen_range(0..KEY_COLORS.len());
    let key_class = key_color + 1;
    let ks = spec.key_size();
    let corner = r.gen_range(0..4);
    let top = if corner / 2 == 0 { 2 } else { h - 2 - ks };
    let left = if corner % 2 == 0 { 2 } else { w - 2 - ks };
    let (cy, cx) = (
        top as f64 + (ks as f64 - 1.0) / 2.0,
        left as f64 + (ks as f64 - 1.0) / 2.0,
    );

    for gy in 0..h.div_ceil(CELL) {
        for gx in 0..w.div_ceil(CELL) {
            let (y0, x0) = (gy * CELL, gx * CELL);
            let (y1, x1) = ((y0 + CELL).min(h), (x0 + CELL).min(w));
            // draw unconditionally so the stream does not depend on geometry
            let keep = r.gen_bool(TEXTURE_PROB);
            let pattern = r.gen_range(0..4);
            let period = r.gen_range(2..=4);
            let a: [f64; 3] = [r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.3..0.7)];
            if !keep {
                continue;
            }
            let b = a.map(|v| if v < 0.5 { v + 0.25 } else { v - 0.25 });
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    if (dy * dy + dx * dx).sqrt() < spec.min_distance() {
                        continue;
                    }
                    let (py, px) = ((y - y0) / period, (x - x0) / period);
                    let first = match pattern {
                        0 => py % 2 == 0,
                        1 => px % 2 == 0,
                        2 => (py + px) % 2 == 0,
                        _ => ((y - y0 + x - x0) / period) % 2 == 0,
                    };
                    let color = if first { a } else { b };
                    for (c, v) in color.iter().enumerate() {
                        img[(c * h + y) * w + x] = *v;
                    }
                    label[y * w + x] = key_class;
                }
            }
        }
    }

    if !spec.control {
        for y in top..top + ks {
            for x in left..left + ks {
                for (c, v) in KEY_COLORS[key_color].iter().enumerate() {
                    img[(c * h + y) * w + x] = *v;
                }
            }
        }
    }

    Ok(Sample {
        image: Tensor::from_vec(Shape::new(1, 3, h, w), img)?,
        label,
        key_class,
        index,
    })
}

/// Samples `start..start + count`.
pub fn generate_range(spec: &TaskSpec, start: u64, count: usize) -> Result<Vec<Sample>> {
    (start..start + count as u64)
        .map(|i| generate_sample(spec, i))
        .collect()
}

pub fn generate_dataset(n_samples: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Sample>> {
    generate_range(&TaskSpec::new(height, width, seed), 0, n_samples)
}

/// Fraction of all pixels carrying each class.
pub fn class_histogram(samples: &[Sample]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    let mut total = 0;
    for s in samples {
        for &l in &s.label {
            counts[l] += 1;
        }
        total += s.label.len();
    }
    counts.map(|c| c as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetIndex {
    task: TaskSpec,
    start: u64,
    files: Vec<String>,
    key_classes: Vec<usize>,
}

/// Writes one `[1, 4, H, W]` tensor per sample (channel 3 holds the label)
/// and an `index.json`.
pub fn save_dataset(dir: impl AsRef<Path>, spec: &TaskSpec, start: u64, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let mut data = s.image.data().to_vec();
        data.extend(s.label.iter().map(|&l| l as f64));
        let packed = Tensor::from_vec(Shape::new(1, 4, h, w), data)?;
        let name = format!("sample_{:06}.spgt", s.index);
        save_tensor(dir.join(&name), &packed)?;
        files.push(name);
    }
    let index = DatasetIndex {
        task: *spec,
        start,
        files,
        key_classes: samples.iter().map(|s| s.key_class).collect(),
    };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(TaskSpec, Vec<Sample>)> {
    let dir = dir.as_ref();
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    if index.key_classes.len() != index.files.len() {
        return Err(HarnessError::Config("index lists keys and files of different lengths".into()));
    }
    let mut out = Vec::with_capacity(index.files.len());
    for (i, name) in index.files.iter().enumerate() {
        if name.contains('/') || name.contains('\\') || name.starts_with('.') {
            return Err(HarnessError::Config(format!("bad sample file name {name:?}")));
        }
        let packed: Tensor<f64> = load_tensor(dir.join(name))?;
        let [_, c, h, w] = packed.shape().0;
        if c != 4 {
            return Err(HarnessError::Config(format!("{name}: expected 4 channels, found {c}")));
        }
        let data = packed.into_vec();
        let label: Vec<usize> = data[3 * h * w..].iter().map(|&v| v as usize).collect();
        out.push(Sample {
            image: Tensor::from_vec(Shape::new(1, 3, h, w), data[..3 * h * w].to_vec())?,
            label,
            key_class: index.key_classes[i],
            index: index.start + i as u64,
        });
    }
    Ok((index.task, out))
}

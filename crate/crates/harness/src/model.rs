//! Small segmentation network hosting the reasoning block.
//!
//! Four 3x3 conv blocks (strides 2, 2, 1, 1) reduce the input by 4. An
//! auxiliary 1x1 classifier reads the third block. The fourth block's
//! features `F` pass through the context module `G` (absent for the plain
//! FCN) and the main 1x1 classifier reads `F + G(F)`. Both logit maps are
//! bilinearly resized to the input grid.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use spygr::init::{fan_in_uniform, Rng64};
use spygr::io::{read_tensor_dir, write_tensor_dir, NamedTensor};
use spygr::layer::LayerVars;
use spygr::pyramid::spygr_pyramid_on_tape;
use spygr::{AttentionMode, PyramidConfig, Shape, SpyGRParams, Tape, Tensor, Var};

use crate::error::{HarnessError, Result};

/// Rows of the ablation ladder; each adds one ingredient to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    FcnOnly,
    Gcn,
    StaticAttention,
    DynamicAttention,
    Identity,
    Pyramid,
}

impl AblationRow {
    pub const ALL: [AblationRow; 6] = [
        AblationRow::FcnOnly,
        AblationRow::Gcn,
        AblationRow::StaticAttention,
        AblationRow::DynamicAttention,
        AblationRow::Identity,
        AblationRow::Pyramid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::FcnOnly => "fcn-only",
            AblationRow::Gcn => "gcn",
            AblationRow::StaticAttention => "static-attention",
            AblationRow::DynamicAttention => "dynamic-attention",
            AblationRow::Identity => "identity",
            AblationRow::Pyramid => "pyramid",
        }
    }

    /// Attention mode, identity flag and level count of the context block.
    pub fn context(self, pyramid_levels: usize) -> Option<(AttentionMode, bool, usize)> {
        match self {
            AblationRow::FcnOnly => None,
            AblationRow::Gcn => Some((AttentionMode::None, false, 1)),
            AblationRow::StaticAttention => Some((AttentionMode::Static, false, 1)),
            AblationRow::DynamicAttention => Some((AttentionMode::Dynamic, false, 1)),
            AblationRow::Identity => Some((AttentionMode::Dynamic, true, 1)),
            AblationRow::Pyramid => Some((AttentionMode::Dynamic, true, pyramid_levels)),
        }
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationRow {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationRow::ALL.iter().map(|r| r.name()).collect();
                HarnessError::Config(format!("unknown ablation row {s:?}; expected one of {names:?}"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub classes: usize,
    pub width: usize,
    pub embed: usize,
    pub pyramid_levels: usize,
    pub row: AblationRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl Conv {
    /// He-uniform weights, `U(-k, k)` with `k = sqrt(6 / fan_in)`.
    fn conv3x3(cin: usize, cout: usize, rng: &mut Rng64) -> Self {
        let gain = 6f64.sqrt();
        Conv {
            weight: fan_in_uniform::<f64>(Shape::new(cout, cin, 3, 3), cin * 9, rng).map(|v| v * gain),
            bias: fan_in_uniform(Shape::matrix(1, cout), cin * 9, rng),
        }
    }

    fn conv1x1(cin: usize, cout: usize, rng: &mut Rng64) -> Self {
        Conv {
            weight: fan_in_uniform(Shape::matrix(cin, cout), cin, rng),
            bias: fan_in_uniform(Shape::matrix(1, cout), cin, rng),
        }
    }
}

const STRIDES: [usize; 4] = [2, 2, 1, 1];
const INPUT_MEAN: f64 = 0.5;
const INPUT_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub backbone: Vec<Conv>,
    pub aux: Conv,
    pub classifier: Conv,
    pub context: Option<PyramidConfig<f64>>,
}

/// Logits resized to the input grid.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub logits: Var,
    pub aux: Var,
}

impl Model {
    pub fn init(spec: ModelSpec, rng: &mut Rng64) -> Result<Self> {
        if spec.classes < 2 || spec.width == 0 || spec.embed == 0 || spec.pyramid_levels == 0 {
            return Err(HarnessError::Config(format!("degenerate model spec {spec:?}")));
        }
        let c = spec.width;
        let backbone = (0..4)
            .map(|i| Conv::conv3x3(if i == 0 { 3 } else { c }, c, rng))
            .collect();
        let aux = Conv::conv1x1(c, spec.classes, rng);
        let classifier = Conv::conv1x1(c, spec.classes, rng);
        let context = spec.row.context(spec.pyramid_levels).map(|(mode, identity, levels)| {
            PyramidConfig::init(levels, c, spec.embed, mode, identity, false, rng)
        });
        Ok(Model {
            spec,
            backbone,
            aux,
            classifier,
            context,
        })
    }

    /// Every trainable tensor with a stable name, in update order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut v = Vec::new();
        for (i, conv) in self.backbone.iter().enumerate() {
            v.push((format!("block{i}.weight"), &conv.weight));
            v.push((format!("block{i}.bias"), &conv.bias));
        }
        v.push(("aux.weight".into(), &self.aux.weight));
        v.push(("aux.bias".into(), &self.aux.bias));
        v.push(("classifier.weight".into(), &self.classifier.weight));
        v.push(("classifier.bias".into(), &self.classifier.bias));
        if let Some(cfg) = &self.context {
            for (k, p) in cfg.params.iter().enumerate() {
                for (name, t) in p.tensors() {
                    v.push((format!("context{k}.{name}"), t));
                }
            }
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = Vec::new();
        for conv in &mut self.backbone {
            v.push(&mut conv.weight);
            v.push(&mut conv.bias);
        }
        v.push(&mut self.aux.weight);
        v.push(&mut self.aux.bias);
        v.push(&mut self.classifier.weight);
        v.push(&mut self.classifier.bias);
        if let Some(cfg) = &mut self.context {
            for p in &mut cfg.params {
                v.extend(p.tensors_mut());
            }
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor, in [`Model::named_tensors`] order.
    pub fn record(&self, tape: &mut Tape<f64>, trainable: bool) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Runs the network on a `[1, 3, H, W]` image in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape<f64>, image: &Tensor<f64>, vars: &[Var]) -> Result<Outputs> {
        let [_, _, h, w] = image.shape().0;
        let x = tape.constant(image.map(|v| (v - INPUT_MEAN) / INPUT_SCALE));
        let mut feats = x;
        let mut third = x;
        for (i, stride) in STRIDES.iter().enumerate() {
            let pre = tape.conv3x3(feats, vars[2 * i], Some(vars[2 * i + 1]), *stride, 1)?;
            feats = tape.relu(pre);
            if i == 2 {
                third = feats;
            }
        }
        let aux = tape.conv1x1(third, vars[8], Some(vars[9]))?;
        let mixed = match &self.context {
            None => feats,
            Some(cfg) => {
                let layer_vars = context_vars(cfg, &vars[12..]);
                let g = spygr_pyramid_on_tape(tape, feats, cfg, &layer_vars)?;
                tape.add(feats, g)?
            }
        };
        let logits = tape.conv1x1(mixed, vars[10], Some(vars[11]))?;
        Ok(Outputs {
            logits: tape.upsample(logits, h, w)?,
            aux: tape.upsample(aux, h, w)?,
        })
    }

    /// Per-pixel argmax of the main head.
    pub fn predict(&self, image: &Tensor<f64>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let out = self.forward(&mut tape, image, &vars)?;
        Ok(argmax_channels(tape.value(out.logits)))
    }

    /// Projects static attention weights back onto `λ >= 0`.
    pub fn project(&mut self) {
        if let Some(cfg) = &mut self.context {
            for p in &mut cfg.params {
                if let Some(l) = &mut p.static_lambda {
                    *l = l.map(|v| v.max(0.0));
                }
            }
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let tensors: Vec<_> = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let role = name.split('.').next().unwrap_or("").to_string();
                NamedTensor::new(name, role, t.clone())
            })
            .collect();
        write_tensor_dir(dir, "seg-model", &tensors, serde_json::to_value(self.spec)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = read_tensor_dir::<f64>(dir)?;
        if manifest.kind != "seg-model" {
            return Err(HarnessError::Config(format!(
                "expected a seg-model manifest, found {:?}",
                manifest.kind
            )));
        }
        let spec: ModelSpec = serde_json::from_value(manifest.meta)?;
        let mut model = Model::init(spec, &mut spygr::init::rng(0))?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != tensors.len() {
            return Err(HarnessError::Config(format!(
                "model needs {} tensors, directory has {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((name, slot), stored) in names.iter().zip(model.tensors_mut()).zip(tensors) {
            if &stored.name != name || stored.tensor.shape() != slot.shape() {
                return Err(HarnessError::Config(format!(
                    "tensor {} does not match expected {name} {}",
                    stored.name,
                    slot.shape()
                )));
            }
            *slot = stored.tensor;
        }
        Ok(model)
    }
}

fn context_vars(cfg: &PyramidConfig<f64>, vars: &[Var]) -> Vec<LayerVars> {
    let mut out = Vec::with_capacity(cfg.params.len());
    let mut i = 0;
    for p in &cfg.params {
        let has_static = p.static_lambda.is_some();
        out.push(LayerVars {
            w_phi: vars[i],
            w_rho: vars[i + 1],
            theta: vars[i + 2],
            static_lambda: has_static.then(|| vars[i + 3]),
        });
        i += if has_static { 4 } else { 3 };
    }
    out
}

/// Index of the largest channel at every pixel of a `[1, K, H, W]` map;
/// ties go to the lowest class.
pub fn argmax_channels(logits: &Tensor<f64>) -> Vec<usize> {
    let [_, k, h, w] = logits.shape().0;
    let d = logits.data();
    (0..h * w)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * h * w + p] > d[best * h * w + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Plain block weights of a context level, for inspection.
pub fn context_level(model: &Model, k: usize) -> Option<&SpyGRParams<f64>> {
    model.context.as_ref().map(|c| c.level(k))
}

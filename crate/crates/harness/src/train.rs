//! SGD training with a poly schedule, two-head loss, and mIoU evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spygr::ops::cross_entropy;
use spygr::{Tape, Tensor, Var};

use crate::data::{generate_range, Sample, TaskSpec, NUM_CLASSES};
use crate::error::{HarnessError, Result};
use crate::metrics::Confusion;
use crate::model::{argmax_channels, AblationRow, Model, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aux_weight: f64,
    pub total_iters: usize,
    pub batch: usize,
    pub ablation: AblationRow,
    pub seed: u64,
    pub width: usize,
    pub embed: usize,
    pub pyramid_levels: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub control: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.009,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            aux_weight: 0.4,
            total_iters: 2000,
            batch: 8,
            ablation: AblationRow::Pyramid,
            seed: 0,
            width: 16,
            embed: 8,
            pyramid_levels: 4,
            image_size: 64,
            train_samples: 2000,
            test_samples: 500,
            control: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.aux_weight) {
            return bad("aux_weight must lie in [0, 1]");
        }
        if self.total_iters == 0 {
            return bad("total_iters must be at least 1");
        }
        if self.batch == 0 || self.train_samples == 0 {
            return bad("batch and train_samples must be positive");
        }
        if !(self.base_lr > 0.0 && self.power > 0.0) {
            return bad("base_lr and power must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.image_size < 32 {
            return bad("image_size must be at least 32");
        }
        Ok(())
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            control: self.control,
            ..TaskSpec::new(self.image_size, self.image_size, self.seed)
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            classes: NUM_CLASSES,
            width: self.width,
            embed: self.embed,
            pyramid_levels: self.pyramid_levels,
            row: self.ablation,
        }
    }
}

/// `base_lr · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, config: &TrainConfig) -> Result<f64> {
    if iter > config.total_iters {
        return Err(HarnessError::Config(format!(
            "iteration {iter} beyond total {}",
            config.total_iters
        )));
    }
    let frac = iter as f64 / config.total_iters as f64;
    Ok(config.base_lr * (1.0 - frac).powf(config.power))
}

/// `CE(final) + aux_weight · CE(aux)` without a tape.
pub fn loss(final_logits: &Tensor<f64>, aux_logits: &Tensor<f64>, labels: &[usize], aux_weight: f64) -> Result<f64> {
    let (main, _) = cross_entropy(final_logits, labels)?;
    let (aux, _) = cross_entropy(aux_logits, labels)?;
    Ok(main + aux_weight * aux)
}

/// The same objective recorded on a tape; returns `(total, main, aux)`.
pub fn loss_on_tape(
    tape: &mut Tape<f64>,
    final_logits: Var,
    aux_logits: Var,
    labels: &[usize],
    aux_weight: f64,
) -> Result<(Var, Var, Var)> {
    let main = tape.cross_entropy(final_logits, labels)?;
    let aux = tape.cross_entropy(aux_logits, labels)?;
    let weighted = tape.scale(aux, aux_weight)?;
    let total = tape.add(main, weighted)?;
    Ok((total, main, aux))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub aux_loss: f64,
    pub miou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

struct SampleStep {
    grads: Vec<Tensor<f64>>,
    loss: f64,
    aux: f64,
    predictions: Vec<usize>,
}

fn sample_step(model: &Model, sample: &Sample, aux_weight: f64) -> Result<SampleStep> {
    let mut tape = Tape::new();
    let vars = model.record(&mut tape, true);
    let out = model.forward(&mut tape, &sample.image, &vars)?;
    let (total, _, aux) = loss_on_tape(&mut tape, out.logits, out.aux, &sample.label, aux_weight)?;
    let mut grads = tape.backward(total)?;
    let grads = vars
        .iter()
        .map(|&v| grads.take(v).expect("every parameter has a gradient"))
        .collect();
    Ok(SampleStep {
        grads,
        loss: tape.value(total).data()[0],
        aux: tape.value(aux).data()[0],
        predictions: argmax_channels(tape.value(out.logits)),
    })
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

/// Worker count from `SPYGR_THREADS`, defaulting to one.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("SPYGR_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(HarnessError::Config(format!("SPYGR_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

/// Generates the training split for `config` and trains on it.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let samples = generate_range(&config.task(), 0, config.train_samples)?;
    train_on(config, &samples)
}

/// Trains a fresh model on `samples`. The result does not depend on
/// `config.threads`: per-sample gradients are summed in batch order.
pub fn train_on(config: &TrainConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(HarnessError::Config("no training samples".into()));
    }
    let mut init_rng = spygr::init::rng(config.seed);
    let mut model = Model::init(config.model_spec(), &mut init_rng)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut velocity: Vec<Vec<f64>> = model
        .named_tensors()
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    let workers = pool(config.threads)?;
    let mut trace = Vec::with_capacity(config.total_iters);

    for iter in 0..config.total_iters {
        let lr = poly_lr(iter, config)?;
        let batch: Vec<&Sample> = (0..config.batch)
            .map(|_| &samples[batch_rng.gen_range(0..samples.len())])
            .collect();
        let steps: Vec<Result<SampleStep>> = workers.install(|| {
            batch
                .par_iter()
                .map(|s| sample_step(&model, s, config.aux_weight))
                .collect()
        });
        let steps = steps
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(|e| diverged(iter, e))?;

        let scale = 1.0 / config.batch as f64;
        let mut confusion = Confusion::new(NUM_CLASSES);
        let (mut total, mut aux) = (0.0, 0.0);
        for (s, step) in batch.iter().zip(&steps) {
            total += step.loss;
            aux += step.aux;
            confusion.add(&step.predictions, &s.label);
        }
        total *= scale;
        aux *= scale;
        if !total.is_finite() {
            return Err(HarnessError::Diverged {
                iter,
                detail: format!("loss {total}"),
            });
        }

        for (p, (param, v)) in model.tensors_mut().into_iter().zip(&mut velocity).enumerate() {
            let shape = param.shape();
            let mut w = std::mem::replace(param, Tensor::zeros(shape)).into_vec();
            for (i, (wi, vi)) in w.iter_mut().zip(v.iter_mut()).enumerate() {
                let g: f64 = steps.iter().map(|s| s.grads[p].data()[i]).sum::<f64>() * scale;
                *vi = config.momentum * *vi + g + config.weight_decay * *wi;
                *wi -= lr * *vi;
            }
            *param = Tensor::from_vec(shape, w)?;
        }
        model.project();

        trace.push(TraceRow {
            iter,
            lr,
            loss: total,
            aux_loss: aux,
            miou: confusion.miou(),
        });
    }
    Ok(TrainOutcome { model, trace })
}

fn diverged(iter: usize, e: HarnessError) -> HarnessError {
    match e {
        HarnessError::Core(spygr::Error::NonFinite { op }) => HarnessError::Diverged {
            iter,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub keyed_accuracy: f64,
    pub confusion: Confusion,
}

/// Scores `model` on `samples` with the main head.
pub fn evaluate(model: &Model, samples: &[Sample], threads: usize) -> Result<Evaluation> {
    let preds: Vec<Result<Vec<usize>>> =
        pool(threads)?.install(|| samples.par_iter().map(|s| model.predict(&s.image)).collect());
    let mut confusion = Confusion::new(NUM_CLASSES);
    for (s, p) in samples.iter().zip(preds) {
        confusion.add(&p?, &s.label);
    }
    Ok(Evaluation {
        per_class_iou: confusion.per_class_iou(),
        miou: confusion.miou(),
        pixel_accuracy: confusion.pixel_accuracy(),
        keyed_accuracy: confusion.keyed_accuracy(),
        confusion,
    })
}

/// Held-out split: the indices right after the training range.
pub fn test_split(config: &TrainConfig) -> Result<Vec<Sample>> {
    generate_range(&config.task(), config.train_samples as u64, config.test_samples)
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spygr::init::{rng, uniform};
    use spygr::Shape;

    #[test]
    fn poly_schedule_endpoints() {
        let c = TrainConfig {
            total_iters: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(poly_lr(0, &c).unwrap(), 0.009);
        assert_eq!(poly_lr(1000, &c).unwrap(), 0.0);
        let half = poly_lr(500, &c).unwrap();
        assert!((half - 0.004822980581413319).abs() < 1e-15, "{half}");
        assert!(poly_lr(1001, &c).is_err());
    }

    fn log_softmax_ce(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
        let [_, k, h, w] = logits.shape().0;
        let mut total = 0.0;
        for p in 0..h * w {
            let z: Vec<f64> = (0..k).map(|c| logits.get([0, c, p / w, p % w])).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[labels[p]];
        }
        total / (h * w) as f64
    }

    #[test]
    fn uniform_logits_cost_ln_k_per_head() {
        let z = Tensor::zeros(Shape::new(1, 5, 3, 4));
        let labels = vec![2; 12];
        let l = loss(&z, &z, &labels, 0.4).unwrap();
        assert!((l - 1.4 * 5f64.ln()).abs() < 1e-12);
        assert!((loss(&z, &z, &labels, 0.0).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_log_softmax_oracle() {
        let mut r = rng(3);
        let a = uniform::<f64>(Shape::new(1, 5, 4, 6), -4.0, 4.0, &mut r);
        let b = uniform::<f64>(Shape::new(1, 5, 4, 6), -4.0, 4.0, &mut r);
        let labels: Vec<usize> = (0..24).map(|i| (i * 7) % 5).collect();
        let want = log_softmax_ce(&a, &labels) + 0.4 * log_softmax_ce(&b, &labels);
        assert!((loss(&a, &b, &labels, 0.4).unwrap() - want).abs() < 1e-12);

        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let (t, _, _) = loss_on_tape(&mut tape, va, vb, &labels, 0.4).unwrap();
        assert!((tape.value(t).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let z = Tensor::zeros(Shape::new(1, 5, 1, 2));
        assert!(loss(&z, &z, &[0, 5], 0.4).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            TrainConfig { aux_weight: 1.5, ..TrainConfig::default() },
            TrainConfig { total_iters: 0, ..TrainConfig::default() },
            TrainConfig { threads: 0, ..TrainConfig::default() },
            TrainConfig { image_size: 16, ..TrainConfig::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = vec![
            TraceRow { iter: 0, lr: 0.009, loss: 2.25, aux_loss: 1.5, miou: 0.125 },
            TraceRow { iter: 1, lr: 0.0085, loss: 2.0, aux_loss: 1.25, miou: 0.25 },
        ];
        write_trace(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,lr,loss,aux_loss,miou\n"));
        assert_eq!(read_trace(&path).unwrap(), rows);
    }
}

//! Central finite-difference check of tape gradients.
//!
//! The function under test may return any shape; it is reduced to a scalar
//! by a fixed random projection `sum(y ⊙ R)` so every output element
//! contributes to the checked gradient.
//!
//! Central differences only estimate a derivative where the function is
//! smooth on the scale of the step. [`kink_margin`] measures how far a point
//! is from the ReLU and max-pool switching surfaces, and [`smooth_point`]
//! draws seeded points until that margin is comfortably above the step.

use rand::Rng;

use crate::error::Result;
use crate::init::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Bound on `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub rel_tol: f64,
    /// Bound on `|analytic - numeric|` where both are below `small`.
    pub abs_tol: f64,
    pub small: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            small: 1e-8,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs_small: f64,
    /// Flat offset of the worst relative mismatch.
    pub worst_at: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    /// [`Tape::kink_margin`] of the checked point.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.passed)
    }

    pub fn worst_rel(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel).fold(0.0, f64::max)
    }

    pub fn worst_abs_small(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_abs_small).fold(0.0, f64::max)
    }
}

fn projected_loss<F>(
    tape: &mut Tape<f64>,
    inputs: &[Var],
    build: &F,
    projection: &mut Option<Tensor<f64>>,
    seed: u64,
) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let y = build(tape, inputs)?;
    let shape = tape.value(y).shape();
    let r = projection
        .get_or_insert_with(|| {
            let mut g = rng(seed);
            Tensor::from_fn(shape, |_| g.gen_range(-1.0..1.0))
        })
        .clone();
    let rv = tape.constant(r);
    let prod = tape.mul(y, rv)?;
    Ok(tape.sum(prod))
}

/// Kink margin of `build` evaluated at `inputs`, without differentiating.
pub fn kink_margin<F>(inputs: &[Tensor<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    build(&mut tape, &vars)?;
    Ok(tape.kink_margin())
}

/// Draws `draw(seed)` for each seed in order and returns the first point
/// whose kink margin reaches `min_margin`.
pub fn smooth_point<D, F>(
    seeds: std::ops::Range<u64>,
    min_margin: f64,
    draw: D,
    build: F,
) -> Result<Option<(u64, Vec<Tensor<f64>>)>>
where
    D: Fn(u64) -> Vec<Tensor<f64>>,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in seeds {
        let inputs = draw(seed);
        if kink_margin(&inputs, &build)? >= min_margin {
            return Ok(Some((seed, inputs)));
        }
    }
    Ok(None)
}

/// Compares tape gradients of `build` against central differences for every
/// element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    build: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut projection = None;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = projected_loss(&mut tape, &vars, &build, &mut projection, config.seed)?;
    let grads = tape.backward(loss)?;
    let kink_margin = tape.kink_margin();

    let eval = |values: &[Tensor<f64>], projection: &mut Option<Tensor<f64>>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = projected_loss(&mut tape, &vars, &build, projection, config.seed)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("parameter gradient").clone();
        let base = inputs[idx].clone().into_vec();
        let shape = inputs[idx].shape();
        let mut report = InputReport {
            index: idx,
            checked: base.len(),
            max_rel: 0.0,
            max_abs_small: 0.0,
            worst_at: 0,
            passed: true,
        };
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus[k] += config.step;
            work[idx] = Tensor::from_vec(shape, plus)?;
            let fp = eval(&work, &mut projection)?;
            let mut minus = base.clone();
            minus[k] -= config.step;
            work[idx] = Tensor::from_vec(shape, minus)?;
            let fm = eval(&work, &mut projection)?;
            let numeric = (fp - fm) / (2.0 * config.step);
            let a = analytic.data()[k];
            let scale = a.abs().max(numeric.abs());
            let diff = (a - numeric).abs();
            if scale > config.small {
                let rel = diff / scale;
                if rel > report.max_rel {
                    report.max_rel = rel;
                    report.worst_at = k;
                }
                if rel > config.rel_tol {
                    report.passed = false;
                }
            } else {
                report.max_abs_small = report.max_abs_small.max(diff);
                if diff > config.abs_tol {
                    report.passed = false;
                }
            }
        }
        work[idx] = inputs[idx].clone();
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        kink_margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::uniform;
    use crate::tensor::Shape;

    fn away_from_zero(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        uniform::<f64>(shape, -1.0, 1.0, &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
    }

    fn check<F>(inputs: &[Tensor<f64>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let report = check_gradients(inputs, build, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn primitive_adjoints_match_central_differences() {
        let m = |r, c, s| away_from_zero(Shape::matrix(r, c), s);
        check(&[m(4, 3, 1), m(3, 5, 2)], |t, v| t.matmul(v[0], v[1]));
        check(&[m(4, 3, 3), m(4, 5, 4)], |t, v| t.matmul_tn(v[0], v[1]));
        check(&[m(3, 4, 5)], |t, v| Ok(t.relu(v[0])));
        check(&[m(3, 4, 6)], |t, v| Ok(t.sigmoid(v[0])));
        check(&[m(3, 4, 7), m(3, 4, 8)], |t, v| t.mul(v[0], v[1]));
        check(&[m(3, 4, 9), m(3, 4, 10)], |t, v| t.sub(v[0], v[1]));
        check(&[m(5, 3, 11), m(5, 1, 12)], |t, v| t.scale_rows(v[0], v[1]));
        check(&[m(5, 3, 13), m(1, 3, 14)], |t, v| t.scale_cols(v[0], v[1]));
        check(&[m(5, 3, 15)], |t, v| Ok(t.col_sum(v[0])));
        check(&[m(4, 4, 16)], |t, v| Ok(t.transpose(v[0])));
        let pos = away_from_zero(Shape::matrix(3, 3), 17).map(|v| v.abs() + 0.5);
        check(&[pos], |t, v| t.inv_sqrt_eps(v[0], 1e-6));

        let x = away_from_zero(Shape::new(2, 3, 5, 4), 18);
        check(&[x.clone()], |t, v| Ok(t.global_avg_pool(v[0])));
        check(&[x.clone()], |t, v| Ok(t.max_pool2x2(v[0])));
        check(&[x.clone()], |t, v| t.upsample(v[0], 9, 7));
        let x1 = away_from_zero(Shape::new(1, 3, 5, 4), 19);
        check(&[x1.clone()], |t, v| {
            let u = t.unfold(v[0])?;
            t.fold(u, 5, 4)
        });
        check(&[x.clone(), m(3, 2, 20), m(1, 2, 21)], |t, v| {
            t.conv1x1(v[0], v[1], Some(v[2]))
        });
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let w = away_from_zero(Shape::new(2, 3, 3, 3), 22);
            check(&[x.clone(), w, m(1, 2, 23)], move |t, v| {
                t.conv3x3(v[0], v[1], Some(v[2]), stride, pad)
            });
        }
        check(&[x.clone()], |t, v| {
            let a = t.select_batch(v[0], 1)?;
            let b = t.select_batch(v[0], 0)?;
            t.stack(&[a, b])
        });
        let labels: Vec<usize> = (0..2 * 20).map(|i| i % 3).collect();
        check(&[x], move |t, v| t.cross_entropy(v[0], &labels));
    }
}

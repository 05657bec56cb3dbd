//! Oracle, Laplacian-structure, zero-degree and gradient suites.

use rand::Rng;
use serde::{Deserialize, Serialize};
use spygr::costmodel::{estimate, CostQuery};
use spygr::counter::count_macs;
use spygr::gradcheck::{check_gradients, smooth_point, GradCheckConfig, GradCheckReport};
use spygr::init::{rng, uniform};
use spygr::layer::oracle::{apply_laplacian_naive, graph_reason_naive};
use spygr::layer::{apply_laplacian_factored, graph_reason, graph_reason_on_tape, similarity_factors, LayerVars};
use spygr::pyramid::spygr_pyramid_on_tape;
use spygr::{AttentionMode, PyramidConfig, Shape, SimilarityFactors, SpyGRParams, Tape, Tensor, Var};

use crate::config::{RunConfig, VerifySettings};
use crate::error::{CliError, Result};

/// Deliberate faults for negative tests of the suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Run the zero-degree case with `ε = 0`.
    SkipEpsilon,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "skip-epsilon" => Ok(Fault::SkipEpsilon),
            _ => Err(format!("unknown fault {s:?}; expected skip-epsilon")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    /// What `worst` measures.
    pub metric: String,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// The configuration behind `worst`, or the first failing one.
    pub offending: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub suites: Vec<SuiteReport>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

const MODES: [AttentionMode; 3] = [AttentionMode::None, AttentionMode::Static, AttentionMode::Dynamic];

/// Tracks the worst value seen and the case that produced it.
struct Worst {
    value: f64,
    case: Option<String>,
    first_failure: Option<String>,
}

impl Worst {
    fn new() -> Self {
        Worst {
            value: 0.0,
            case: None,
            first_failure: None,
        }
    }

    fn see(&mut self, value: f64, ok: bool, case: impl FnOnce() -> String) {
        let case = (value > self.value || value.is_nan() || (!ok && self.first_failure.is_none()))
            .then(case);
        if !ok && self.first_failure.is_none() {
            self.first_failure = case.clone();
        }
        if value > self.value || value.is_nan() {
            self.value = value;
            self.case = case;
        }
    }

    fn finish(self, name: &str, cases: usize, metric: &str, tolerance: f64) -> SuiteReport {
        let passed = self.first_failure.is_none();
        SuiteReport {
            name: name.to_string(),
            cases,
            metric: metric.to_string(),
            worst: self.value,
            tolerance,
            passed,
            offending: self.first_failure.or(self.case),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct OracleCase {
    h: usize,
    w: usize,
    c: usize,
    m: usize,
    mode: AttentionMode,
    identity: bool,
}

fn oracle_cases(seed: u64, v: &VerifySettings) -> Vec<(OracleCase, Tensor<f64>, SpyGRParams<f64>)> {
    let mut r = rng(seed);
    let [lo, hi] = v.extent_range;
    (0..v.oracle_cases)
        .map(|_| {
            let case = OracleCase {
                h: r.gen_range(lo..=hi),
                w: r.gen_range(lo..=hi),
                c: v.channels[r.gen_range(0..v.channels.len())],
                m: v.embeds[r.gen_range(0..v.embeds.len())],
                mode: MODES[r.gen_range(0..3)],
                identity: r.gen_bool(0.5),
            };
            let x = uniform(Shape::new(1, case.c, case.h, case.w), -1.0, 1.0, &mut r);
            let p = SpyGRParams::init(case.c, case.m, case.c, case.mode, case.identity, &mut r);
            (case, x, p)
        })
        .collect()
}

/// Factored against materialized Laplacian and layer outputs.
pub fn oracle_suite(seed: u64, v: &VerifySettings, cap: usize) -> Result<SuiteReport> {
    let cases = oracle_cases(seed, v);
    let mut worst = Worst::new();
    for (case, x, p) in &cases {
        let f = similarity_factors(x, p)?;
        let lx = apply_laplacian_factored(x, &f, case.identity)?;
        let lx_naive = apply_laplacian_naive(x, &f, case.identity, cap)?;
        let y = graph_reason(x, p)?;
        let y_naive = graph_reason_naive(x, p, cap)?;
        let err = lx.rel_error(&lx_naive).max(y.rel_error(&y_naive));
        worst.see(err, err < v.oracle_tol, || format!("{case:?}"));
    }
    Ok(worst.finish("oracle-equivalence", cases.len(), "max relative error", v.oracle_tol))
}

/// Analytic FLOP count against the instrumented MAC counter.
pub fn cost_counter_suite(seed: u64, v: &VerifySettings) -> Result<SuiteReport> {
    let cases = oracle_cases(seed, v);
    let mut worst = Worst::new();
    for (case, x, p) in &cases {
        let (y, counted) = count_macs(|| graph_reason(x, p));
        y?;
        let analytic = estimate(&CostQuery {
            include_identity: case.identity,
            attention_mode: case.mode,
            ..CostQuery::single(case.h, case.w, case.c, case.m, case.c)
        })?
        .flops;
        let diff = analytic.abs_diff(counted) as f64;
        worst.see(diff, diff == 0.0, || {
            format!("{case:?}: analytic {analytic}, counted {counted}")
        });
    }
    Ok(worst.finish("cost-counter", cases.len(), "absolute MAC difference", 0.0))
}

fn positive_factors(n: usize, m: usize, epsilon: f64, r: &mut spygr::init::Rng64) -> Result<SimilarityFactors<f64>> {
    let phi = uniform(Shape::matrix(n, m), 0.01, 1.0, r);
    let lam = uniform(Shape::matrix(1, m), 0.05, 0.95, r);
    Ok(SimilarityFactors::new(phi, lam, epsilon)?)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖L u‖` for the unit vector `u ∝ D^1/2 1`, with `ε = 0`.
pub fn null_vector_suite(seed: u64, v: &VerifySettings) -> Result<SuiteReport> {
    let mut r = rng(seed ^ 0x0a11);
    let mut worst = Worst::new();
    for _ in 0..v.laplacian_cases {
        let (n, m) = (r.gen_range(1..=v.max_positions), r.gen_range(1..=5));
        let f = positive_factors(n, m, 0.0, &mut r)?;
        let mut sqrt_d: Vec<f64> = f.degrees.data().iter().map(|d| d.sqrt()).collect();
        let len = norm(&sqrt_d);
        sqrt_d.iter_mut().for_each(|e| *e /= len);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, n), sqrt_d)?;
        let res = norm(apply_laplacian_factored(&x, &f, true)?.data());
        worst.see(res, res < v.null_tol, || format!("n = {n}, M = {m}"));
    }
    Ok(worst.finish("null-vector", v.laplacian_cases, "residual norm", v.null_tol))
}

/// `xᵀ L x` over unit `x` stays within `[0, 2]`; `worst` is the largest
/// excursion outside that range (0 when inside).
pub fn spectral_range_suite(seed: u64, v: &VerifySettings) -> Result<SuiteReport> {
    let mut r = rng(seed ^ 0x5bec);
    let mut worst = Worst::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..v.laplacian_cases {
        let (n, m) = (r.gen_range(1..=v.max_positions), r.gen_range(1..=5));
        let f = positive_factors(n, m, 1e-6, &mut r)?;
        for _ in 0..v.probes_per_case {
            let raw = uniform::<f64>(Shape::new(1, 1, 1, n), -1.0, 1.0, &mut r);
            let len = norm(raw.data());
            if len == 0.0 {
                continue;
            }
            let x = raw.map(|e| e / len);
            let lx = apply_laplacian_factored(&x, &f, true)?;
            let q: f64 = x.data().iter().zip(lx.data()).map(|(a, b)| a * b).sum();
            lo = lo.min(q);
            hi = hi.max(q);
            let excursion = (-q).max(q - 2.0).max(0.0);
            worst.see(excursion, excursion <= v.spectrum_slack, || {
                format!("n = {n}, M = {m}, xᵀLx = {q}")
            });
        }
    }
    let mut report = worst.finish(
        "spectral-range",
        v.laplacian_cases,
        "distance of xᵀLx outside [0, 2]",
        v.spectrum_slack,
    );
    if report.passed {
        report.offending = Some(format!("observed range [{lo}, {hi}]"));
    }
    Ok(report)
}

/// A position whose features are all zero has degree 0; `ε` keeps the
/// normalization finite there.
pub fn zero_degree_suite(seed: u64, fault: Option<Fault>) -> Result<SuiteReport> {
    let mut r = rng(seed ^ 0x2e70);
    let (c, h, w) = (4, 5, 5);
    let mut x = uniform::<f64>(Shape::new(1, c, h, w), -1.0, 1.0, &mut r).into_vec();
    for ch in 0..c {
        x[ch * h * w] = 0.0;
    }
    let x = Tensor::from_vec(Shape::new(1, c, h, w), x)?;
    let mut p = SpyGRParams::<f64>::init(c, 3, c, AttentionMode::Dynamic, true, &mut r);
    if fault == Some(Fault::SkipEpsilon) {
        p.epsilon = 0.0;
    }
    let case = format!("[1, {c}, {h}, {w}] with a zero feature vector at (0, 0), ε = {}", p.epsilon);
    let (passed, worst, offending) = match graph_reason(&x, &p) {
        Ok(y) if y.is_finite() => (true, 0.0, case),
        Ok(_) => (false, f64::INFINITY, format!("{case}: non-finite output")),
        Err(e) => (false, f64::INFINITY, format!("{case}: {e}")),
    };
    Ok(SuiteReport {
        name: "zero-degree-guard".into(),
        cases: 1,
        metric: "non-finite outputs".into(),
        worst,
        tolerance: 0.0,
        passed,
        offending: Some(offending),
    })
}

fn block_inputs(x: Tensor<f64>, p: &SpyGRParams<f64>) -> Vec<Tensor<f64>> {
    vec![x, p.w_phi.clone(), p.w_rho.clone(), p.theta.clone()]
}

fn block_vars(v: &[Var]) -> LayerVars {
    LayerVars {
        w_phi: v[0],
        w_rho: v[1],
        theta: v[2],
        static_lambda: None,
    }
}

const INPUT_NAMES: [&str; 4] = ["x", "w_phi", "w_rho", "theta"];

fn input_name(i: usize) -> String {
    if i == 0 {
        return "x".into();
    }
    let level = (i - 1) / 3;
    format!("level{level}.{}", INPUT_NAMES[1 + (i - 1) % 3])
}

fn grad_report(
    name: &str,
    v: &VerifySettings,
    found: Option<(u64, GradCheckReport)>,
    names: impl Fn(usize) -> String,
) -> SuiteReport {
    let Some((point, report)) = found else {
        return SuiteReport {
            name: name.into(),
            cases: 0,
            metric: "max relative error".into(),
            worst: f64::INFINITY,
            tolerance: v.grad_rel_tol,
            passed: false,
            offending: Some(format!(
                "no point with kink margin >= {} among {} draws",
                v.kink_margin, v.smooth_search
            )),
        };
    };
    let worst = report
        .inputs
        .iter()
        .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
        .expect("at least one input");
    let failing = report.inputs.iter().find(|i| !i.passed).unwrap_or(worst);
    SuiteReport {
        name: name.into(),
        cases: report.inputs.iter().map(|i| i.checked).sum(),
        metric: "max relative error".into(),
        worst: worst.max_rel,
        tolerance: v.grad_rel_tol,
        passed: report.passed(),
        offending: Some(format!(
            "draw {point}, kink margin {:.3e}, {} element {} (rel {:.3e}, small abs {:.3e})",
            report.kink_margin,
            names(failing.index),
            failing.worst_at,
            failing.max_rel,
            failing.max_abs_small
        )),
    }
}

fn grad_config(v: &VerifySettings, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        step: v.grad_step,
        rel_tol: v.grad_rel_tol,
        seed,
        ..GradCheckConfig::default()
    }
}

fn draw_range(seed: u64, v: &VerifySettings) -> std::ops::Range<u64> {
    let base = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    base..base.wrapping_add(v.smooth_search)
}

/// Central differences against the tape for the block (dynamic attention,
/// identity on) with respect to `x`, `W_φ`, `W_ρ`, `Θ`.
pub fn block_gradient_suite(seed: u64, v: &VerifySettings) -> Result<SuiteReport> {
    let shape = Shape(v.grad_shape);
    let (c, m) = (shape.c(), v.grad_embed);
    let init = |r: &mut _| SpyGRParams::<f64>::init(c, m, c, AttentionMode::Dynamic, true, r);
    let template = init(&mut rng(seed));
    let draw = |s| {
        let mut r = rng(s);
        let x = uniform::<f64>(shape, -1.0, 1.0, &mut r);
        block_inputs(x, &init(&mut r))
    };
    let build = |t: &mut Tape<f64>, vars: &[Var]| graph_reason_on_tape(t, vars[0], &template, &block_vars(&vars[1..]));
    let found = match smooth_point(draw_range(seed, v), v.kink_margin, draw, build)? {
        Some((point, inputs)) => Some((point, check_gradients(&inputs, build, &grad_config(v, seed))?)),
        None => None,
    };
    Ok(grad_report("block-gradients", v, found, |i| INPUT_NAMES[i].to_string()))
}

/// The same check through a `grad_levels` pyramid with independent levels.
pub fn pyramid_gradient_suite(seed: u64, v: &VerifySettings) -> Result<SuiteReport> {
    let shape = Shape(v.grad_shape);
    let (c, m, levels) = (shape.c(), v.grad_embed, v.grad_levels);
    let init = |r: &mut _| PyramidConfig::<f64>::init(levels, c, m, AttentionMode::Dynamic, true, false, r);
    let template = init(&mut rng(seed));
    template
        .check_extent(shape.h(), shape.w())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let draw = |s| {
        let mut r = rng(s);
        let mut inputs = vec![uniform::<f64>(shape, -1.0, 1.0, &mut r)];
        for p in init(&mut r).params {
            inputs.extend([p.w_phi, p.w_rho, p.theta]);
        }
        inputs
    };
    let build = |t: &mut Tape<f64>, vars: &[Var]| {
        let lv: Vec<LayerVars> = vars[1..].chunks(3).map(block_vars).collect();
        spygr_pyramid_on_tape(t, vars[0], &template, &lv)
    };
    let found = match smooth_point(draw_range(seed ^ 0x9, v), v.kink_margin, draw, build)? {
        Some((point, inputs)) => Some((point, check_gradients(&inputs, build, &grad_config(v, seed))?)),
        None => None,
    };
    Ok(grad_report("pyramid-gradients", v, found, input_name))
}

/// Every suite, in a fixed order. The report carries no timings, so equal
/// configurations give equal bytes.
pub fn cmd_verify(cfg: &RunConfig, fault: Option<Fault>) -> Result<VerifyReport> {
    let v = &cfg.verify;
    let seed = cfg.seed;
    let suites = vec![
        oracle_suite(seed, v, cfg.oracle_cap)?,
        cost_counter_suite(seed, v)?,
        null_vector_suite(seed, v)?,
        spectral_range_suite(seed, v)?,
        zero_degree_suite(seed, fault)?,
        block_gradient_suite(seed, v)?,
        pyramid_gradient_suite(seed, v)?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport {
        seed,
        fault,
        suites,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifySettings {
        VerifySettings {
            oracle_cases: 6,
            laplacian_cases: 4,
            probes_per_case: 10,
            ..VerifySettings::default()
        }
    }

    #[test]
    fn fast_suites_pass() {
        let v = small();
        for s in [
            oracle_suite(1, &v, 4096).unwrap(),
            cost_counter_suite(1, &v).unwrap(),
            null_vector_suite(1, &v).unwrap(),
            spectral_range_suite(1, &v).unwrap(),
            zero_degree_suite(1, None).unwrap(),
        ] {
            assert!(s.passed, "{s:?}");
        }
    }

    #[test]
    fn skipping_epsilon_breaks_the_zero_degree_case() {
        let s = zero_degree_suite(1, Some(Fault::SkipEpsilon)).unwrap();
        assert!(!s.passed);
        assert!(s.offending.unwrap().contains("ε = 0"));
    }

    #[test]
    fn oracle_cap_is_enforced() {
        let v = VerifySettings {
            oracle_cases: 2,
            ..small()
        };
        assert!(oracle_suite(0, &v, 4).is_err());
    }

    #[test]
    fn pyramid_input_names() {
        assert_eq!(input_name(0), "x");
        assert_eq!(input_name(1), "level0.w_phi");
        assert_eq!(input_name(6), "level1.theta");
    }
}

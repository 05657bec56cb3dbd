//! The graph-reasoning block.
//!
//! Spatial positions of a `[1, C, H, W]` feature are the vertices of a dense
//! graph whose similarity is `A = φ diag(λ) φᵀ`, with `φ = relu(X W_φ)` an
//! `n x M` embedding (`n = H*W`) and `λ` a per-dimension attention computed
//! from the globally pooled feature. The block outputs
//! `relu((X - D^-1/2 A D^-1/2 X) Θ)` where `D` holds the row sums of `A`.
//!
//! `A` is never built here. Degrees come from `φ (λ ⊙ φᵀ1)` and the
//! normalized product from `P (λ ⊙ Pᵀ X)` with `P = D^-1/2 φ`, so the cost is
//! linear in `n`. The quadratic reference lives in [`oracle`].

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, Rng64};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Floor added to every degree before the inverse square root.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Where the diagonal attention on the embedding inner product comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// `λ ≡ 1`.
    None,
    /// A learned vector shared by every input.
    Static,
    /// `sigmoid(W_ρᵀ mean_{H,W}(X))`.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpyGRParams<T> {
    /// `[C x M]`
    pub w_phi: Tensor<T>,
    /// `[C x M]`
    pub w_rho: Tensor<T>,
    /// `[C x C_out]`
    pub theta: Tensor<T>,
    /// `[1 x M]`, present only for [`AttentionMode::Static`].
    pub static_lambda: Option<Tensor<T>>,
    pub attention_mode: AttentionMode,
    pub include_identity: bool,
    pub epsilon: f64,
}

impl<T: Scalar> SpyGRParams<T> {
    pub fn init(
        channels: usize,
        embed: usize,
        out_channels: usize,
        attention_mode: AttentionMode,
        include_identity: bool,
        rng: &mut Rng64,
    ) -> Self {
        let w_phi = fan_in_uniform(Shape::matrix(channels, embed), channels, rng);
        let w_rho = fan_in_uniform(Shape::matrix(channels, embed), channels, rng);
        let theta = fan_in_uniform(Shape::matrix(channels, out_channels), channels, rng);
        let static_lambda = (attention_mode == AttentionMode::Static)
            .then(|| Tensor::full(Shape::matrix(1, embed), T::one()));
        SpyGRParams {
            w_phi,
            w_rho,
            theta,
            static_lambda,
            attention_mode,
            include_identity,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_phi.shape().rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_phi.shape().cols()
    }

    pub fn out_channels(&self) -> usize {
        self.theta.shape().cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, m) = (self.channels(), self.embed_dim());
        if c == 0 || m == 0 || self.out_channels() == 0 {
            return Err(Error::invalid("params", "C, M and C_out must all be at least 1"));
        }
        let expect = |name: &'static str, t: &Tensor<T>, want: Shape| {
            if t.shape() == want {
                Ok(())
            } else {
                Err(Error::Shape {
                    op: name,
                    lhs: t.shape(),
                    rhs: want,
                })
            }
        };
        expect("w_rho", &self.w_rho, Shape::matrix(c, m))?;
        expect("theta", &self.theta, Shape::matrix(c, self.out_channels()))?;
        match (&self.static_lambda, self.attention_mode) {
            (Some(l), AttentionMode::Static) => expect("static_lambda", l, Shape::matrix(1, m)),
            (None, AttentionMode::Static) => Err(Error::invalid(
                "params",
                "static attention needs a static_lambda vector",
            )),
            (Some(_), _) => Err(Error::invalid(
                "params",
                "static_lambda is only allowed with static attention",
            )),
            (None, _) => Ok(()),
        }?;
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("params", "epsilon must be non-negative"));
        }
        Ok(())
    }

    /// Puts the weights on `tape`, as parameters when `trainable`.
    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> LayerVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LayerVars {
            w_phi: put(&self.w_phi),
            w_rho: put(&self.w_rho),
            theta: put(&self.theta),
            static_lambda: self.static_lambda.as_ref().map(put),
        }
    }

    /// Named tensors, in a fixed order, for serialization and optimizers.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![
            ("w_phi", &self.w_phi),
            ("w_rho", &self.w_rho),
            ("theta", &self.theta),
        ];
        if let Some(l) = &self.static_lambda {
            v.push(("static_lambda", l));
        }
        v
    }

    /// The same weights at another precision.
    pub fn cast<U: Scalar>(&self) -> SpyGRParams<U> {
        SpyGRParams {
            w_phi: self.w_phi.cast(),
            w_rho: self.w_rho.cast(),
            theta: self.theta.cast(),
            static_lambda: self.static_lambda.as_ref().map(|l| l.cast()),
            attention_mode: self.attention_mode,
            include_identity: self.include_identity,
            epsilon: self.epsilon,
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.w_phi, &mut self.w_rho, &mut self.theta];
        if let Some(l) = &mut self.static_lambda {
            v.push(l);
        }
        v
    }
}

/// Tape handles of one block's weights, in [`SpyGRParams::tensors`] order.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_phi: Var,
    pub w_rho: Var,
    pub theta: Var,
    pub static_lambda: Option<Var>,
}

impl LayerVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.w_phi, self.w_rho, self.theta];
        v.extend(self.static_lambda);
        v
    }
}

/// Implicit similarity `φ diag(λ) φᵀ` with its degree vector.
#[derive(Debug, Clone)]
pub struct SimilarityFactors<T> {
    /// `[n x M]`, non-negative.
    pub phi: Tensor<T>,
    /// `[1 x M]`
    pub lambda: Tensor<T>,
    /// `[n x 1]`
    pub degrees: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Scalar> SimilarityFactors<T> {
    pub fn new(phi: Tensor<T>, lambda: Tensor<T>, epsilon: f64) -> Result<Self> {
        if lambda.numel() != phi.shape().cols() {
            return Err(Error::Shape {
                op: "similarity factors",
                lhs: phi.shape(),
                rhs: lambda.shape(),
            });
        }
        let lambda = lambda.reshape(Shape::matrix(1, phi.shape().cols()))?;
        let degrees = degrees_factored(&phi, &lambda)?;
        Ok(SimilarityFactors {
            phi,
            lambda,
            degrees,
            epsilon,
        })
    }

    pub fn positions(&self) -> usize {
        self.phi.shape().rows()
    }

    /// Row `i` of the similarity, `φ_i diag(λ) φᵀ`, as `[1 x n]`.
    pub fn similarity_row(&self, i: usize) -> Result<Tensor<T>> {
        let (n, m) = (self.positions(), self.phi.shape().cols());
        if i >= n {
            return Err(Error::invalid(
                "similarity_row",
                format!("position {i} out of range for {n} positions"),
            ));
        }
        let phi = self.phi.data();
        let lam = self.lambda.widened();
        let row: Vec<f64> = (0..n)
            .map(|j| {
                (0..m)
                    .map(|k| lam[k] * (phi[i * m + k].widen() * phi[j * m + k].widen()))
                    .sum()
            })
            .collect();
        Tensor::from_f64(Shape::matrix(1, n), &row)
    }
}

/// `relu(unfold(x) W_φ)`, the `[n x M]` embedding.
pub fn embed_phi<T: Scalar>(x: &Tensor<T>, w_phi: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ops::relu(&ops::matmul(&ops::unfold(x)?, w_phi)?))
}

/// `sigmoid(W_ρᵀ x̄)` with `x̄` the spatial mean, as `[1 x M]`.
pub fn channel_attention<T: Scalar>(x: &Tensor<T>, w_rho: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().n() != 1 {
        return Err(Error::invalid("channel_attention", "expects one batch element"));
    }
    let pooled = ops::global_avg_pool(x).reshape(Shape::matrix(1, x.shape().c()))?;
    Ok(ops::sigmoid(&ops::matmul(&pooled, w_rho)?))
}

/// `φ (λ ⊙ φᵀ 1)` as `[n x 1]`.
pub fn degrees_factored<T: Scalar>(phi: &Tensor<T>, lambda: &Tensor<T>) -> Result<Tensor<T>> {
    let m = phi.shape().cols();
    let weighted = ops::mul(&ops::col_sum(phi), &lambda.reshape(Shape::matrix(1, m))?)?;
    ops::matmul(phi, &weighted.reshape(Shape::matrix(m, 1))?)
}

/// Builds `φ`, `λ` and the degrees for a single `[1, C, H, W]` input.
pub fn similarity_factors<T: Scalar>(
    x: &Tensor<T>,
    params: &SpyGRParams<T>,
) -> Result<SimilarityFactors<T>> {
    params.validate()?;
    let phi = embed_phi(x, &params.w_phi)?;
    let m = params.embed_dim();
    let lambda = match params.attention_mode {
        AttentionMode::None => Tensor::full(Shape::matrix(1, m), T::one()),
        AttentionMode::Static => params
            .static_lambda
            .clone()
            .expect("validated static lambda"),
        AttentionMode::Dynamic => channel_attention(x, &params.w_rho)?,
    };
    SimilarityFactors::new(phi, lambda, params.epsilon)
}

/// `L X` through the factored route, never forming the `n x n` similarity.
/// With `include_identity` off this is `D^-1/2 A D^-1/2 X` alone.
pub fn apply_laplacian_factored<T: Scalar>(
    x: &Tensor<T>,
    factors: &SimilarityFactors<T>,
    include_identity: bool,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape().0;
    let x2 = ops::unfold(x)?;
    if x2.shape().rows() != factors.positions() {
        return Err(Error::Shape {
            op: "apply_laplacian",
            lhs: x.shape(),
            rhs: factors.phi.shape(),
        });
    }
    let r = ops::inv_sqrt_eps(&factors.degrees, factors.epsilon)?;
    let p = ops::scale_rows(&factors.phi, &r)?;
    let q = ops::scale_rows(&ops::matmul_tn(&p, &x2)?, &factors.lambda)?;
    let z = ops::matmul(&p, &q)?;
    let lx = if include_identity {
        ops::sub(&x2, &z)?
    } else {
        z
    };
    ops::fold(&lx, h, w)
}

/// `relu(L X Θ)` for every batch element.
pub fn graph_reason<T: Scalar>(x: &Tensor<T>, params: &SpyGRParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = params.record(&mut tape, false);
    let y = graph_reason_on_tape(&mut tape, xv, params, &vars)?;
    Ok(tape.value(y).clone())
}

/// The propagation without attention or identity:
/// `relu(D^-1/2 φφᵀ D^-1/2 X Θ)`.
pub fn simplest_gcn<T: Scalar>(x: &Tensor<T>, params: &SpyGRParams<T>) -> Result<Tensor<T>> {
    if params.attention_mode != AttentionMode::None {
        return Err(Error::invalid(
            "simplest_gcn",
            "requires attention mode `none`",
        ));
    }
    let plain = SpyGRParams {
        include_identity: false,
        ..params.clone()
    };
    graph_reason(x, &plain)
}

/// [`graph_reason`] with `λ` replaced by a fixed `[1 x M]` vector.
pub fn graph_reason_with_lambda<T: Scalar>(
    x: &Tensor<T>,
    params: &SpyGRParams<T>,
    lambda: &Tensor<T>,
) -> Result<Tensor<T>> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, false);
    let lv = tape.constant(lambda.reshape(Shape::matrix(1, params.embed_dim()))?);
    let mut outs = Vec::new();
    for i in 0..x.shape().n() {
        let xi = tape.constant(x.batch_item(i)?);
        outs.push(reason_single(&mut tape, xi, params, &vars, Some(lv))?);
    }
    let y = tape.stack(&outs)?;
    Ok(tape.value(y).clone())
}

/// Records the block on `tape`. Batch elements are reasoned over
/// independently and restacked.
pub fn graph_reason_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &SpyGRParams<T>,
    vars: &LayerVars,
) -> Result<Var> {
    params.validate()?;
    let n = tape.value(x).shape().n();
    if n == 1 {
        return reason_single(tape, x, params, vars, None);
    }
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let xi = tape.select_batch(x, i)?;
        outs.push(reason_single(tape, xi, params, vars, None)?);
    }
    tape.stack(&outs)
}

fn reason_single<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &SpyGRParams<T>,
    vars: &LayerVars,
    lambda_override: Option<Var>,
) -> Result<Var> {
    let [_, c, h, w] = tape.value(x).shape().0;
    if c != params.channels() {
        return Err(Error::Shape {
            op: "graph_reason",
            lhs: tape.value(x).shape(),
            rhs: params.w_phi.shape(),
        });
    }
    let m = params.embed_dim();
    let x2 = tape.unfold(x)?;
    let pre = tape.matmul(x2, vars.w_phi)?;
    let phi = tape.relu(pre);

    let lambda = match (lambda_override, params.attention_mode) {
        (Some(l), _) => Some(l),
        (None, AttentionMode::None) => None,
        (None, AttentionMode::Static) => vars.static_lambda,
        (None, AttentionMode::Dynamic) => {
            let pooled = tape.global_avg_pool(x);
            let row = tape.reshape(pooled, Shape::matrix(1, c))?;
            let logits = tape.matmul(row, vars.w_rho)?;
            Some(tape.sigmoid(logits))
        }
    };

    // degrees: φ (λ ⊙ φᵀ1)
    let col = tape.col_sum(phi);
    let weighted = match lambda {
        Some(l) => tape.mul(col, l)?,
        None => col,
    };
    let weighted = tape.reshape(weighted, Shape::matrix(m, 1))?;
    let degrees = tape.matmul(phi, weighted)?;
    let r = tape.inv_sqrt_eps(degrees, params.epsilon)?;

    // P (λ ⊙ Pᵀ X)
    let p = tape.scale_rows(phi, r)?;
    let q = tape.matmul_tn(p, x2)?;
    let q = match lambda {
        Some(l) => tape.scale_rows(q, l)?,
        None => q,
    };
    let z = tape.matmul(p, q)?;
    let lx = if params.include_identity {
        tape.sub(x2, z)?
    } else {
        z
    };
    let pre_y = tape.matmul(lx, vars.theta)?;
    let y = tape.relu(pre_y);
    tape.fold(y, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{rng, uniform};

    fn params(c: usize, m: usize, mode: AttentionMode, identity: bool, seed: u64) -> SpyGRParams<f64> {
        SpyGRParams::init(c, m, c, mode, identity, &mut rng(seed))
    }

    #[test]
    fn embed_phi_cases() {
        let w = uniform::<f64>(Shape::matrix(3, 2), -1.0, 1.0, &mut rng(1));
        let zero = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert_eq!(embed_phi(&zero, &w).unwrap(), Tensor::zeros(Shape::matrix(4, 2)));

        let x = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        let w = Tensor::full(Shape::matrix(1, 1), -1.0);
        assert_eq!(embed_phi(&x, &w).unwrap().data(), &[0.0]);
    }

    #[test]
    fn embed_phi_matches_per_pixel_dot_products() {
        let mut r = rng(2);
        let x = uniform::<f64>(Shape::new(1, 4, 3, 3), -1.0, 1.0, &mut r);
        let w = uniform::<f64>(Shape::matrix(4, 5), -1.0, 1.0, &mut r);
        let phi = embed_phi(&x, &w).unwrap();
        for y in 0..3 {
            for xx in 0..3 {
                for k in 0..5 {
                    let dot: f64 = (0..4).map(|c| x.get([0, c, y, xx]) * w.at(c, k)).sum();
                    assert!((phi.at(y * 3 + xx, k) - dot.max(0.0)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn channel_attention_cases() {
        let mut r = rng(3);
        let x = uniform::<f64>(Shape::new(1, 4, 3, 5), -1.0, 1.0, &mut r);
        let lam = channel_attention(&x, &Tensor::zeros(Shape::matrix(4, 6))).unwrap();
        assert!(lam.data().iter().all(|&v| v == 0.5));

        let w = uniform::<f64>(Shape::matrix(4, 6), -2.0, 2.0, &mut r);
        let lam = channel_attention(&x, &w).unwrap();
        for k in 0..6 {
            let mut z = 0.0;
            for c in 0..4 {
                let mut mean = 0.0;
                for y in 0..3 {
                    for xx in 0..5 {
                        mean += x.get([0, c, y, xx]);
                    }
                }
                z += mean / 15.0 * w.at(c, k);
            }
            let want = 1.0 / (1.0 + (-z).exp());
            assert!(((lam.data()[k] - want) / want).abs() < 1e-12);
            assert!(lam.data()[k] > 0.0 && lam.data()[k] < 1.0);
        }
    }

    #[test]
    fn constant_channels_pool_exactly() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 3, 4, 4), |[_, c, _, _]| 0.25 * c as f64 - 0.1);
        let pooled = ops::global_avg_pool(&x);
        for c in 0..3 {
            assert_eq!(pooled.data()[c], 0.25 * c as f64 - 0.1);
        }
    }

    #[test]
    fn degrees_of_identical_rows() {
        let p = [0.5, 1.0, 2.0];
        let phi = Tensor::<f64>::from_fn(Shape::matrix(6, 3), |[_, _, _, k]| p[k]);
        let lambda = Tensor::matrix(1, 3, vec![0.2, 0.4, 0.8]).unwrap();
        let d = degrees_factored(&phi, &lambda).unwrap();
        let a: f64 = (0..3).map(|k| p[k] * lambda.data()[k] * p[k]).sum();
        for v in d.data() {
            assert!((v - 6.0 * a).abs() < 1e-12);
        }

        let mut rows = vec![0.3, 0.1, 0.0, 0.0, 0.0, 0.0];
        rows.extend([0.2, 0.0, 0.4]);
        let phi = Tensor::<f64>::matrix(3, 3, rows).unwrap();
        let d = degrees_factored(&phi, &lambda).unwrap();
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn constant_field_is_annihilated() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 4, 5, 6), |[_, c, _, _]| 0.3 + 0.2 * c as f64);
        let mut p = params(4, 3, AttentionMode::Dynamic, true, 4);
        p.epsilon = 0.0;
        let f = similarity_factors(&x, &p).unwrap();
        let lx = apply_laplacian_factored(&x, &f, true).unwrap();
        assert!(lx.max_abs() < 1e-14, "{}", lx.max_abs());
        let y = graph_reason(&x, &p).unwrap();
        assert!(y.max_abs() < 1e-14);
    }

    #[test]
    fn theta_zero_gives_zero_output() {
        let x = uniform::<f64>(Shape::new(2, 4, 3, 3), -1.0, 1.0, &mut rng(5));
        let mut p = params(4, 3, AttentionMode::Dynamic, true, 6);
        p.theta = Tensor::zeros(p.theta.shape());
        assert_eq!(graph_reason(&x, &p).unwrap(), Tensor::zeros(x.shape()));
    }

    #[test]
    fn simplest_gcn_is_graph_reason_with_unit_lambda() {
        let x = uniform::<f64>(Shape::new(1, 5, 4, 4), -1.0, 1.0, &mut rng(7));
        let p = params(5, 3, AttentionMode::None, false, 8);
        let a = simplest_gcn(&x, &p).unwrap();
        let dynamic = SpyGRParams {
            attention_mode: AttentionMode::Dynamic,
            ..p.clone()
        };
        let b = graph_reason_with_lambda(&x, &dynamic, &Tensor::full(Shape::matrix(1, 3), 1.0)).unwrap();
        assert_eq!(a, b);
        assert!(simplest_gcn(&x, &dynamic).is_err());
    }

    #[test]
    fn simplest_gcn_preserves_constants() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 3, 4, 4), |[_, c, _, _]| c as f64 - 0.5);
        let mut p = params(3, 2, AttentionMode::None, false, 9);
        p.theta = Tensor::identity(3);
        p.w_phi = Tensor::full(Shape::matrix(3, 2), 0.7);
        p.epsilon = 0.0;
        let y = simplest_gcn(&x, &p).unwrap();
        let want = ops::relu(&x);
        assert!(y.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn validate_rejects_inconsistent_static_lambda() {
        let mut p = params(3, 2, AttentionMode::Dynamic, true, 10);
        p.static_lambda = Some(Tensor::full(Shape::matrix(1, 2), 1.0));
        assert!(p.validate().is_err());
        let mut p = params(3, 2, AttentionMode::Static, true, 10);
        assert!(p.validate().is_ok());
        p.static_lambda = None;
        assert!(p.validate().is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let p = params(4, 2, AttentionMode::Dynamic, true, 11);
        assert!(graph_reason(&x, &p).is_err());
        assert!(embed_phi(&x, &p.w_phi).is_err());
    }
}

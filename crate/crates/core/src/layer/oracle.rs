//! Quadratic reference path: materializes the `n x n` similarity and applies
//! the normalized Laplacian densely. Used to verify the factored path and
//! bounded by an explicit position cap.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::{similarity_factors, SimilarityFactors, SpyGRParams};

pub const DEFAULT_ORACLE_CAP: usize = 4096;

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        Err(Error::OracleSize { n, cap })
    } else {
        Ok(())
    }
}

/// `A = φ diag(λ) φᵀ` as a dense `[n x n]` matrix.
pub fn materialize_similarity<T: Scalar>(
    factors: &SimilarityFactors<T>,
    cap: usize,
) -> Result<Tensor<T>> {
    let (n, m) = (factors.positions(), factors.phi.shape().cols());
    check_cap(n, cap)?;
    let phi = factors.phi.widened();
    let lam = factors.lambda.widened();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..m {
                s += lam[k] * (phi[i * m + k] * phi[j * m + k]);
            }
            a[i * n + j] = s;
        }
    }
    Tensor::from_f64(Shape::matrix(n, n), &a)
}

/// `(I - D^-1/2 A D^-1/2) X` with `D` taken from the row sums of the
/// materialized `A` (not from the factored degrees).
pub fn apply_laplacian_naive<T: Scalar>(
    x: &Tensor<T>,
    factors: &SimilarityFactors<T>,
    include_identity: bool,
    cap: usize,
) -> Result<Tensor<T>> {
    let [_, c, h, w] = x.shape().0;
    let n = h * w;
    if n != factors.positions() {
        return Err(Error::Shape {
            op: "apply_laplacian_naive",
            lhs: x.shape(),
            rhs: factors.phi.shape(),
        });
    }
    let a = materialize_similarity(factors, cap)?.widened();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a[i * n..(i + 1) * n].iter().sum();
            1.0 / (d + factors.epsilon).sqrt()
        })
        .collect();
    let x2 = ops::unfold(x)?.widened();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..n {
            let nij = inv_sqrt[i] * a[i * n + j] * inv_sqrt[j];
            for ch in 0..c {
                out[i * c + ch] += nij * x2[j * c + ch];
            }
        }
    }
    if include_identity {
        for (o, v) in out.iter_mut().zip(&x2) {
            *o = v - *o;
        }
    }
    let lx = Tensor::from_f64(Shape::matrix(n, c), &out)?.ensure_finite("apply_laplacian_naive")?;
    ops::fold(&lx, h, w)
}

/// The whole block through the dense path, batch-mapped.
pub fn graph_reason_naive<T: Scalar>(
    x: &Tensor<T>,
    params: &SpyGRParams<T>,
    cap: usize,
) -> Result<Tensor<T>> {
    let mut outs = Vec::with_capacity(x.shape().n());
    for i in 0..x.shape().n() {
        let xi = x.batch_item(i)?;
        let [_, _, h, w] = xi.shape().0;
        let factors = similarity_factors(&xi, params)?;
        let lx = apply_laplacian_naive(&xi, &factors, params.include_identity, cap)?;
        let y = ops::relu(&ops::matmul(&ops::unfold(&lx)?, &params.theta)?);
        outs.push(ops::fold(&y, h, w)?);
    }
    Tensor::stack(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{rng, uniform};
    use crate::layer::{apply_laplacian_factored, graph_reason, AttentionMode};

    fn factors(n: usize, m: usize, seed: u64) -> SimilarityFactors<f64> {
        let mut r = rng(seed);
        let phi = uniform(Shape::matrix(n, m), 0.0, 1.0, &mut r);
        let lam = uniform(Shape::matrix(1, m), 0.05, 0.95, &mut r);
        SimilarityFactors::new(phi, lam, 1e-6).unwrap()
    }

    #[test]
    fn identical_rows_give_constant_similarity() {
        let p = [0.1, 0.7, 0.3];
        let phi = Tensor::<f64>::from_fn(Shape::matrix(5, 3), |[_, _, _, k]| p[k]);
        let lam = Tensor::matrix(1, 3, vec![0.5, 0.25, 0.9]).unwrap();
        let f = SimilarityFactors::new(phi, lam.clone(), 1e-6).unwrap();
        let a = materialize_similarity(&f, 100).unwrap();
        let want: f64 = (0..3).map(|k| p[k] * lam.data()[k] * p[k]).sum();
        assert!(a.data().iter().all(|v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn unit_lambda_is_plain_gram_matrix() {
        let f = factors(7, 3, 1);
        let unit = SimilarityFactors::new(f.phi.clone(), Tensor::full(Shape::matrix(1, 3), 1.0), 1e-6).unwrap();
        let a = materialize_similarity(&unit, 100).unwrap();
        let gram = ops::matmul_nt(&f.phi, &f.phi).unwrap();
        assert!(a.max_rel_diff(&gram) < 1e-14);
    }

    #[test]
    fn similarity_is_symmetric_and_non_negative() {
        let f = factors(9, 4, 2);
        let a = materialize_similarity(&f, 100).unwrap();
        for i in 0..9 {
            assert!(a.at(i, i) >= 0.0);
            for j in 0..9 {
                assert_eq!(a.at(i, j), a.at(j, i));
                assert!(a.at(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn factored_degrees_match_row_sums() {
        let f = factors(30, 5, 3);
        let a = materialize_similarity(&f, 100).unwrap();
        for i in 0..30 {
            let row: f64 = (0..30).map(|j| a.at(i, j)).sum();
            assert!(((f.degrees.data()[i] - row) / row).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_cap_is_enforced() {
        let f = factors(20, 2, 4);
        assert!(matches!(
            materialize_similarity(&f, 19),
            Err(Error::OracleSize { n: 20, cap: 19 })
        ));
    }

    #[test]
    fn zero_similarity_keeps_identity() {
        let x = uniform::<f64>(Shape::new(1, 3, 2, 3), -1.0, 1.0, &mut rng(5));
        let f = SimilarityFactors::new(
            Tensor::zeros(Shape::matrix(6, 2)),
            Tensor::full(Shape::matrix(1, 2), 0.5),
            1e-6,
        )
        .unwrap();
        assert_eq!(apply_laplacian_naive(&x, &f, true, 100).unwrap(), x);
        assert_eq!(apply_laplacian_factored(&x, &f, true).unwrap(), x);
    }

    #[test]
    fn single_vertex_graph_is_annihilated() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 1), vec![0.8, -1.3]).unwrap();
        let f = SimilarityFactors::new(
            Tensor::matrix(1, 2, vec![0.6, 1.1]).unwrap(),
            Tensor::matrix(1, 2, vec![0.5, 0.7]).unwrap(),
            0.0,
        )
        .unwrap();
        let naive = apply_laplacian_naive(&x, &f, true, 100).unwrap();
        let fast = apply_laplacian_factored(&x, &f, true).unwrap();
        assert!(naive.max_abs() < 1e-15 && fast.max_abs() < 1e-15);
    }

    #[test]
    fn factored_matches_naive_on_random_input() {
        let mut r = rng(6);
        let x = uniform::<f64>(Shape::new(1, 8, 7, 7), -1.0, 1.0, &mut r);
        for identity in [true, false] {
            let p = SpyGRParams::init(8, 4, 8, AttentionMode::Dynamic, identity, &mut r);
            let f = similarity_factors(&x, &p).unwrap();
            let fast = apply_laplacian_factored(&x, &f, identity).unwrap();
            let naive = apply_laplacian_naive(&x, &f, identity, 4096).unwrap();
            assert!(fast.rel_error(&naive) < 1e-10, "{}", fast.rel_error(&naive));

            let y = graph_reason(&x, &p).unwrap();
            let y_naive = graph_reason_naive(&x, &p, 4096).unwrap();
            assert!(y.rel_error(&y_naive) < 1e-10);
        }
    }
}

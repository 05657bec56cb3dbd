use proptest::prelude::*;
use spygr::init::{rng, uniform};
use spygr::layer::oracle::{apply_laplacian_naive, graph_reason_naive};
use spygr::layer::{apply_laplacian_factored, graph_reason, similarity_factors};
use spygr::{AttentionMode, Shape, SimilarityFactors, SpyGRParams, Tensor};

fn mode_from(i: u8) -> AttentionMode {
    [AttentionMode::None, AttentionMode::Static, AttentionMode::Dynamic][i as usize % 3]
}

/// Random factors with strictly positive degrees.
fn positive_factors(n: usize, m: usize, seed: u64, epsilon: f64) -> SimilarityFactors<f64> {
    let mut r = rng(seed);
    let phi = uniform(Shape::matrix(n, m), 0.01, 1.0, &mut r);
    let lam = uniform(Shape::matrix(1, m), 0.05, 0.95, &mut r);
    SimilarityFactors::new(phi, lam, epsilon).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn factored_path_matches_dense_oracle(
        h in 1usize..12, w in 1usize..12, c in 1usize..9, m in 1usize..7,
        mode in 0u8..3, identity: bool, seed: u64,
    ) {
        let mut r = rng(seed);
        let x = uniform::<f64>(Shape::new(1, c, h, w), -1.0, 1.0, &mut r);
        let p = SpyGRParams::init(c, m, c, mode_from(mode), identity, &mut r);
        let f = similarity_factors(&x, &p).unwrap();
        let fast = apply_laplacian_factored(&x, &f, identity).unwrap();
        let naive = apply_laplacian_naive(&x, &f, identity, 4096).unwrap();
        prop_assert!(fast.rel_error(&naive) < 1e-10);
        let y = graph_reason(&x, &p).unwrap();
        let y_naive = graph_reason_naive(&x, &p, 4096).unwrap();
        prop_assert!(y.rel_error(&y_naive) < 1e-10);
    }

    #[test]
    fn normalized_spectrum_lies_in_zero_two(n in 1usize..65, m in 1usize..6, seed: u64) {
        let f = positive_factors(n, m, seed, 1e-6);
        let mut r = rng(seed ^ 0x9e37);
        for _ in 0..100 {
            let x = uniform::<f64>(Shape::new(1, 1, 1, n), -1.0, 1.0, &mut r);
            let lx = apply_laplacian_factored(&x, &f, true).unwrap();
            let q = dot(x.data(), lx.data());
            let xx = dot(x.data(), x.data());
            prop_assert!(q >= -1e-10, "xᵀLx = {q}");
            prop_assert!(2.0 * xx - q >= -1e-10, "xᵀ(2I - L)x = {}", 2.0 * xx - q);
        }
    }

    #[test]
    fn sqrt_degrees_are_annihilated(n in 1usize..65, m in 1usize..6, seed: u64) {
        let f = positive_factors(n, m, seed, 0.0);
        let v: Vec<f64> = f.degrees.data().iter().map(|d| d.sqrt()).collect();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, n), v).unwrap();
        let lx = apply_laplacian_factored(&x, &f, true).unwrap();
        prop_assert!(lx.max_abs() < 1e-8);
    }

    #[test]
    fn dynamic_attention_is_strictly_inside_unit_interval(
        c in 1usize..8, m in 1usize..8, seed: u64,
    ) {
        let mut r = rng(seed);
        let x = uniform::<f64>(Shape::new(1, c, 4, 3), -3.0, 3.0, &mut r);
        let p = SpyGRParams::init(c, m, c, AttentionMode::Dynamic, true, &mut r);
        let f = similarity_factors(&x, &p).unwrap();
        prop_assert!(f.lambda.data().iter().all(|&l| l > 0.0 && l < 1.0));
        prop_assert!(f.phi.data().iter().all(|&v| v >= 0.0));
        prop_assert!(f.degrees.data().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn batches_are_reasoned_independently(
        batch in 1usize..4, c in 1usize..5, m in 1usize..4, seed: u64,
    ) {
        let mut r = rng(seed);
        let x = uniform::<f64>(Shape::new(batch, c, 5, 4), -1.0, 1.0, &mut r);
        let p = SpyGRParams::init(c, m, c, AttentionMode::Dynamic, true, &mut r);
        let whole = graph_reason(&x, &p).unwrap();
        let parts: Vec<_> = (0..batch)
            .map(|i| graph_reason(&x.batch_item(i).unwrap(), &p).unwrap())
            .collect();
        prop_assert_eq!(whole, Tensor::stack(&parts).unwrap());
    }

    #[test]
    fn forward_is_pure(c in 1usize..5, seed: u64) {
        let mut r = rng(seed);
        let x = uniform::<f32>(Shape::new(1, c, 6, 6), -1.0, 1.0, &mut r);
        let p = SpyGRParams::init(c, 3, c, AttentionMode::Dynamic, true, &mut r);
        let a = graph_reason(&x, &p).unwrap();
        let b = graph_reason(&x, &p).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let mut r = rng(11);
    let x = uniform::<f64>(Shape::new(1, 6, 9, 9), -1.0, 1.0, &mut r);
    let p = SpyGRParams::<f64>::init(6, 4, 6, AttentionMode::Dynamic, true, &mut r);
    let p32 = p.cast::<f32>();
    let y64 = graph_reason(&x, &p).unwrap();
    let y32 = graph_reason(&x.cast::<f32>(), &p32).unwrap();
    assert!(y32.cast::<f64>().rel_error(&y64) < 1e-5);
}

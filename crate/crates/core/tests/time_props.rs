use proptest::prelude::*;
use ptbox::time_codec::{bernstein_basis, TimeCodec, TimeSpan};

fn codec(order: usize, dim: usize, basis: Vec<f64>) -> TimeCodec {
    TimeCodec::new(order, TimeSpan::new(1900, 2020), dim, basis)
}

fn embed_at(c: &TimeCodec, x: f64) -> Vec<f64> {
    let alpha = bernstein_basis(x, c.order).alpha;
    let mut out = vec![0.0; c.dim];
    for (k, a) in alpha.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(c.basis_row(k)) {
            *o += a * v;
        }
    }
    out
}

#[test]
fn partition_of_unity_on_grid() {
    for n in [2, 5, 20, 64] {
        for i in 0..1000 {
            let x = i as f64 / 999.0;
            let a = bernstein_basis(x, n).alpha;
            assert_eq!(a.len(), n + 1);
            assert!(a.iter().all(|&v| v >= 0.0), "n={n} x={x}");
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12, "n={n} x={x}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn endpoints_interpolate_first_and_last_rows(basis in prop::collection::vec(-1.0f64..1.0, 6 * 3)) {
        let c = codec(5, 3, basis);
        prop_assert_eq!(c.time_embedding(1900), c.basis_row(0).to_vec());
        prop_assert_eq!(c.time_embedding(2020), c.basis_row(5).to_vec());
    }

    #[test]
    fn lipschitz_in_unit_time(basis in prop::collection::vec(-1.0f64..1.0, 21 * 4), x in 0.0f64..0.999) {
        let c = codec(20, 4, basis.clone());
        let delta = 1e-6;
        // d/dx Σ B_{k,n} X_k = n Σ B_{k,n-1} (X_{k+1} - X_k), so n·max|ΔX| bounds the slope.
        let step = (0..20)
            .flat_map(|k| (0..4).map(move |j| (k, j)))
            .map(|(k, j)| (basis[(k + 1) * 4 + j] - basis[k * 4 + j]).abs())
            .fold(0.0f64, f64::max);
        let bound = 20.0 * step * delta;
        let (p, q) = (embed_at(&c, x), embed_at(&c, x + delta));
        let diff = p.iter().zip(&q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(diff <= bound * (1.0 + 1e-6) + 1e-15, "{diff} > {bound}");
    }

    #[test]
    fn embedding_is_linear_in_basis(
        a in prop::collection::vec(-1.0f64..1.0, 4 * 2),
        b in prop::collection::vec(-1.0f64..1.0, 4 * 2),
        year in 1900..=2020i32,
    ) {
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ca, cb, cs) = (codec(3, 2, a), codec(3, 2, b), codec(3, 2, sum));
        let (pa, pb, ps) = (ca.time_embedding(year), cb.time_embedding(year), cs.time_embedding(year));
        for i in 0..2 {
            prop_assert!((pa[i] + pb[i] - ps[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn every_year_gives_a_finite_embedding(basis in prop::collection::vec(-1.0f64..1.0, 21 * 3), year in -5000..5000i32) {
        let c = codec(20, 3, basis);
        prop_assert!(c.time_embedding(year).iter().all(|v| v.is_finite()));
    }
}

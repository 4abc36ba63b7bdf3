use proptest::prelude::*;
use ptbox::box_algebra::{conditional_prob, expected_volume, join, meet, GumbelBox, MeetMode};

const DIM: usize = 3;

fn boxes(beta: f64) -> impl Strategy<Value = GumbelBox> {
    (
        prop::collection::vec(-1.0f64..1.0, DIM),
        prop::collection::vec(0.05f64..1.5, DIM),
    )
        .prop_map(move |(lo, w)| {
            let hi = lo.iter().zip(&w).map(|(a, b)| a + b).collect();
            GumbelBox::new(lo, hi, beta)
        })
}

fn close(a: &GumbelBox, b: &GumbelBox, tol: f64) -> bool {
    a.mu_min.iter().zip(&b.mu_min).all(|(x, y)| (x - y).abs() <= tol)
        && a.mu_max.iter().zip(&b.mu_max).all(|(x, y)| (x - y).abs() <= tol)
}

fn log_vol(b: &GumbelBox) -> f64 {
    expected_volume(b).log_volume
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn translation_invariance(a in boxes(0.1), b in boxes(0.1), off in prop::collection::vec(-3.0f64..3.0, DIM)) {
        let (ta, tb) = (a.translated(&off), b.translated(&off));
        prop_assert!((log_vol(&a) - log_vol(&ta)).abs() < 1e-10);
        for mode in [MeetMode::Gumbel, MeetMode::Hard] {
            let p = conditional_prob(&a, &b, mode).unwrap().raw;
            let q = conditional_prob(&ta, &tb, mode).unwrap().raw;
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn volume_is_monotone_in_corners(a in boxes(0.1), i in 0..DIM, grow in 0.0f64..1.0) {
        let mut up = a.clone();
        up.mu_max[i] += grow;
        let mut down = a.clone();
        down.mu_min[i] -= grow;
        prop_assert!(log_vol(&up) >= log_vol(&a));
        prop_assert!(log_vol(&down) >= log_vol(&a));
    }

    #[test]
    fn meet_and_join_commute_and_associate(a in boxes(0.1), b in boxes(0.1), c in boxes(0.1)) {
        for mode in [MeetMode::Gumbel, MeetMode::Hard] {
            for op in [meet, join] {
                prop_assert!(close(&op(&a, &b, mode).unwrap(), &op(&b, &a, mode).unwrap(), 1e-10));
                let left = op(&op(&a, &b, mode).unwrap(), &c, mode).unwrap();
                let right = op(&a, &op(&b, &c, mode).unwrap(), mode).unwrap();
                // Smooth max is associative too: both sides are β·logsumexp of three corners.
                prop_assert!(close(&left, &right, 1e-10));
            }
        }
    }

    #[test]
    fn idempotence(a in boxes(0.1)) {
        prop_assert!(close(&meet(&a, &a, MeetMode::Hard).unwrap(), &a, 0.0));
        prop_assert!(close(&join(&a, &a, MeetMode::Hard).unwrap(), &a, 0.0));
        let shift = 0.1 * std::f64::consts::LN_2;
        let m = meet(&a, &a, MeetMode::Gumbel).unwrap();
        let j = join(&a, &a, MeetMode::Gumbel).unwrap();
        for i in 0..DIM {
            prop_assert!((m.mu_min[i] - (a.mu_min[i] + shift)).abs() < 1e-12);
            prop_assert!((m.mu_max[i] - (a.mu_max[i] - shift)).abs() < 1e-12);
            prop_assert!((j.mu_min[i] - (a.mu_min[i] - shift)).abs() < 1e-12);
            prop_assert!((j.mu_max[i] - (a.mu_max[i] + shift)).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_conditional_is_at_most_one(a in boxes(0.1), b in boxes(0.1)) {
        let p = conditional_prob(&a, &b, MeetMode::Hard).unwrap();
        prop_assert!(p.raw >= 0.0 && p.raw <= 1.0 + 1e-9, "{}", p.raw);
    }

    #[test]
    fn gumbel_meet_approaches_hard_meet(lo in prop::collection::vec(-1.0f64..1.0, 2 * DIM), w in prop::collection::vec(0.05f64..1.5, 2 * DIM)) {
        let mut errs = Vec::new();
        for beta in [1e-2, 1e-4, 1e-6] {
            let mk = |k: usize| {
                let l = lo[k * DIM..(k + 1) * DIM].to_vec();
                let h = l.iter().zip(&w[k * DIM..(k + 1) * DIM]).map(|(a, b)| a + b).collect();
                GumbelBox::new(l, h, beta)
            };
            let (a, b) = (mk(0), mk(1));
            let g = meet(&a, &b, MeetMode::Gumbel).unwrap();
            let h = meet(&a, &b, MeetMode::Hard).unwrap();
            let err = g.mu_min.iter().zip(&h.mu_min).chain(g.mu_max.iter().zip(&h.mu_max))
                .map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            errs.push(err);
        }
        // Once the smoothing error underflows only rounding (~1e-16) is left.
        let floor = 1e-15;
        prop_assert!(errs[0] + floor >= errs[1] && errs[1] + floor >= errs[2], "{errs:?}");
        prop_assert!(errs[2] <= 1e-6 * std::f64::consts::LN_2 + 1e-15, "{errs:?}");
    }
}

//! Per-score cost grows linearly in the box dimension.

mod common;

use common::*;
use ptbox::model::{init_params, EvolutionTarget, ModelConfig};
use ptbox::quad_store::Quadruple;
use ptbox::time_codec::TimeSpan;
use std::hint::black_box;
use std::time::Instant;

const SCORES: usize = 100_000;

fn seconds_per_batch(dim: usize, quads: &[Quadruple]) -> f64 {
    let cfg = ModelConfig {
        dim,
        order: 20,
        evolution: EvolutionTarget::Both,
        ..ModelConfig::default()
    };
    let m = init_params(TOY_ENTITIES, TOY_RELATIONS, TimeSpan::new(TOY_SPAN.0, TOY_SPAN.1), &cfg, &mut rng(4));
    (0..3)
        .map(|_| {
            let start = Instant::now();
            let mut acc = 0.0;
            for q in quads {
                acc += m.log_score(black_box(q));
            }
            black_box(acc);
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn doubling_dimension_at_most_two_and_a_half_times_slower() {
    let quads = random_quads(SCORES, TOY_ENTITIES, TOY_RELATIONS, TOY_SPAN, &mut rng(3));
    let small = seconds_per_batch(64, &quads);
    let large = seconds_per_batch(128, &quads);
    let ratio = large / small;
    println!("d=64: {small:.4}s, d=128: {large:.4}s, ratio {ratio:.2}");
    assert!(ratio <= 2.5, "ratio {ratio:.2}");
}

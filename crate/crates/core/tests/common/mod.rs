#![allow(dead_code)]

use ptbox::box_algebra::MeetMode;
use ptbox::grad::ParamSet;
use ptbox::model::{
    init_params, EvolutionTarget, InitRanges, ModelConfig, ModelParams, ScoreMode, ENTITIES, RELATIONS, TIME_BASIS,
    TIME_WARP,
};
use ptbox::quad_store::{Quadruple, SeenIndex, Year};
use ptbox::time_codec::{TimeSpan, TimeWarp};
use ptbox::trainer::{evaluate_loss, loss_and_grads, sample_negatives};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_ENTITIES: usize = 10;
pub const TOY_RELATIONS: usize = 3;
pub const TOY_SPAN: (Year, Year) = (2000, 2020);

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small model whose boxes overlap enough for every score to be well away from 0.
pub fn toy_config(meet: MeetMode, score: ScoreMode, evolution: EvolutionTarget) -> ModelConfig {
    ModelConfig {
        dim: 4,
        order: 3,
        beta: 0.1,
        meet,
        score,
        evolution,
        normalize_time: true,
        warp: TimeWarp::Linear,
        init: InitRanges {
            center: 0.3,
            width_min: 0.2,
            width_max: 0.6,
            translation: 0.2,
            time_basis: 0.3,
        },
    }
}

/// Random toy parameters, with non-zero relation log-scales.
pub fn toy_model(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let span = TimeSpan::new(TOY_SPAN.0, TOY_SPAN.1);
    let mut m = init_params(TOY_ENTITIES, TOY_RELATIONS, span, cfg, &mut r);
    let d = cfg.dim;
    for rel in 0..TOY_RELATIONS {
        for i in 0..d {
            m.relations.values[rel * 2 * d + d + i] = r.gen_range(-0.3..0.3);
        }
    }
    m
}

pub fn random_quads<R: Rng>(n: usize, ne: usize, nr: usize, span: (Year, Year), rng: &mut R) -> Vec<Quadruple> {
    (0..n)
        .map(|_| {
            Quadruple::new(
                rng.gen_range(0..ne as u32),
                rng.gen_range(0..nr as u32),
                rng.gen_range(0..ne as u32),
                rng.gen_range(span.0..=span.1),
            )
        })
        .collect()
}

/// `|a - n| / (max(|a|, |n|) + 1e-6)`; the floor absorbs finite-difference
/// round-off on gradients that are exactly zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-6)
}

#[derive(Debug, Clone)]
pub struct ClassCheck {
    pub class: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

fn class_of(m: &ModelParams, id: ptbox::grad::ParamId, index: usize) -> &'static str {
    let d = m.dim();
    match id {
        ENTITIES => "entity corners",
        RELATIONS if index % (2 * d) < d => "relation translation",
        RELATIONS => "relation log-scale",
        TIME_BASIS => "time basis",
        TIME_WARP => "time warp",
        _ => "other",
    }
}

/// Central finite differences of the batch loss against tape gradients, for every scalar.
pub fn gradient_check(model: &ModelParams, pos: &[Quadruple], neg: &[Quadruple], eps: f64, h: f64) -> Vec<ClassCheck> {
    let mut m = model.clone();
    m.zero_grads();
    let batch = loss_and_grads(&m, pos, neg, eps, 1).expect("finite loss");
    batch.apply_to(&mut m);
    let mut out: Vec<ClassCheck> = Vec::new();
    for id in model.param_ids() {
        for i in 0..model.param(id).len() {
            let mut plus = model.clone();
            plus.param_mut(id).values[i] += h;
            let mut minus = model.clone();
            minus.param_mut(id).values[i] -= h;
            let numeric = (evaluate_loss(&plus, pos, neg, eps) - evaluate_loss(&minus, pos, neg, eps)) / (2.0 * h);
            let analytic = m.param(id).grad[i];
            let class = class_of(model, id, i);
            let err = rel_err(analytic, numeric);
            match out.iter_mut().find(|c| c.class == class) {
                Some(c) => {
                    c.checked += 1;
                    c.max_rel_err = c.max_rel_err.max(err);
                    c.max_abs_grad = c.max_abs_grad.max(analytic.abs());
                }
                None => out.push(ClassCheck {
                    class,
                    checked: 1,
                    max_rel_err: err,
                    max_abs_grad: analytic.abs(),
                }),
            }
        }
    }
    out
}

/// 50 random quadruples with 2 negatives each on a fresh toy model.
pub fn toy_gradient_case(cfg: &ModelConfig, seed: u64) -> Vec<ClassCheck> {
    let model = toy_model(cfg, seed);
    let mut r = rng(seed + 1000);
    let pos = random_quads(50, TOY_ENTITIES, TOY_RELATIONS, TOY_SPAN, &mut r);
    let neg = sample_negatives(&pos, TOY_ENTITIES, 2, &mut r, &SeenIndex::default());
    gradient_check(&model, &pos, &neg, 1e-12, 1e-5)
}

pub const MEETS: [MeetMode; 2] = [MeetMode::Gumbel, MeetMode::Hard];
pub const SCORES: [ScoreMode; 2] = [ScoreMode::Shared, ScoreMode::Head];

//! The temporal box model: time-evolved entity boxes and relation transforms,
//! scored by a conditional volume ratio.
//!
//! For a quadruple `(h, r, t, τ)` the time embedding `w` (unit-normalized by
//! default) evolves entities and/or relation vectors with `v ↦ v + (wᵀv) w`.
//! A relation acts on a box as `c ↦ (c + translation) ⊙ exp(log_scale)` on both
//! corners. In `Shared` mode the score is `Vol(A ∧ B) / Vol(B)` with both boxes
//! transformed; in `Head` mode only the head box is transformed.

use std::collections::HashMap;

use rand::Rng;

use crate::box_algebra::{self, BoxError, BoxVars, GumbelBox, MeetMode, Probability};
use crate::grad::{Param, ParamId, ParamSet, Tape, Var};
use crate::quad_store::{EntityId, EntityQuery, Quadruple, RelationId, Slot, Vocab, Year};
use crate::time_codec::{TimeCodec, TimeSpan, TimeWarp};

/// Lower/upper clamp applied to scores used as probabilities.
pub const SCORE_EPS: f64 = 1e-12;

pub const ENTITIES: ParamId = ParamId(0);
pub const RELATIONS: ParamId = ParamId(1);
pub const TIME_BASIS: ParamId = ParamId(2);
pub const TIME_WARP: ParamId = ParamId(3);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Both boxes go through the relation transform.
    Shared,
    /// Only the head box is transformed.
    Head,
}

/// What the time embedding acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvolutionTarget {
    Entity,
    Relation,
    Both,
}

impl EvolutionTarget {
    pub fn entities(self) -> bool {
        matches!(self, EvolutionTarget::Entity | EvolutionTarget::Both)
    }

    pub fn relations(self) -> bool {
        matches!(self, EvolutionTarget::Relation | EvolutionTarget::Both)
    }
}

/// Uniform initialization ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitRanges {
    /// Box centers ~ U(-center, center).
    pub center: f64,
    /// Box half-widths ~ U(width_min, width_max).
    pub width_min: f64,
    pub width_max: f64,
    /// Relation translations ~ U(-translation, translation).
    pub translation: f64,
    /// Time basis entries ~ U(-time_basis, time_basis).
    pub time_basis: f64,
}

impl Default for InitRanges {
    fn default() -> Self {
        Self {
            center: 0.1,
            width_min: 0.001,
            width_max: 0.1,
            translation: 0.01,
            time_basis: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub order: usize,
    pub beta: f64,
    pub meet: MeetMode,
    pub score: ScoreMode,
    pub evolution: EvolutionTarget,
    /// Normalize the time embedding to unit length before projecting.
    pub normalize_time: bool,
    pub warp: TimeWarp,
    pub init: InitRanges,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            order: 20,
            beta: 1.0,
            meet: MeetMode::Gumbel,
            score: ScoreMode::Shared,
            evolution: EvolutionTarget::Relation,
            normalize_time: true,
            warp: TimeWarp::Linear,
            init: InitRanges::default(),
        }
    }
}

/// Relation affine transform; the scale is stored as its logarithm.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationParams {
    pub translation: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl RelationParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            translation: vec![0.0; dim],
            log_scale: vec![0.0; dim],
        }
    }

    pub fn scale(&self) -> Vec<f64> {
        self.log_scale.iter().map(|s| s.exp()).collect()
    }
}

/// `v + (wᵀv) w`.
pub fn project_vec(v: &[f64], w: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    v.iter().zip(w).map(|(a, b)| a + s * b).collect()
}

pub fn temporal_project_box(b: &GumbelBox, w: &[f64]) -> Result<GumbelBox, BoxError> {
    if w.len() != b.dim() {
        return Err(BoxError::DimensionMismatch(b.dim(), w.len()));
    }
    Ok(GumbelBox::new(project_vec(&b.mu_min, w), project_vec(&b.mu_max, w), b.beta))
}

pub fn temporal_project_vec(r: &RelationParams, w: &[f64]) -> Result<RelationParams, BoxError> {
    if w.len() != r.translation.len() {
        return Err(BoxError::DimensionMismatch(r.translation.len(), w.len()));
    }
    Ok(RelationParams {
        translation: project_vec(&r.translation, w),
        log_scale: project_vec(&r.log_scale, w),
    })
}

/// Translate then scale both corners.
pub fn relation_transform(b: &GumbelBox, r: &RelationParams) -> GumbelBox {
    let apply = |c: &[f64]| -> Vec<f64> {
        c.iter()
            .zip(&r.translation)
            .zip(&r.log_scale)
            .map(|((x, t), s)| (x + t) * s.exp())
            .collect()
    };
    GumbelBox::new(apply(&b.mu_min), apply(&b.mu_max), b.beta)
}

/// Composition of `first` then `second` as a single transform.
pub fn compose_relations(first: &RelationParams, second: &RelationParams) -> RelationParams {
    // ((c + t1) s1 + t2) s2 = (c + t1 + t2 / s1) (s1 s2)
    let translation = first
        .translation
        .iter()
        .zip(&first.log_scale)
        .zip(&second.translation)
        .map(|((t1, ls1), t2)| t1 + t2 * (-ls1).exp())
        .collect();
    let log_scale = first
        .log_scale
        .iter()
        .zip(&second.log_scale)
        .map(|(a, b)| a + b)
        .collect();
    RelationParams {
        translation,
        log_scale,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub num_entities: usize,
    pub num_relations: usize,
    /// Per entity: `[mu_min (d), mu_max (d)]`.
    pub entities: Param,
    /// Per relation: `[translation (d), log_scale (d)]`.
    pub relations: Param,
    pub time: TimeCodec,
}

impl ParamSet for ModelParams {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ENTITIES, RELATIONS, TIME_BASIS];
        if !self.time.warp_params.is_empty() {
            ids.push(TIME_WARP);
        }
        ids
    }

    fn param(&self, id: ParamId) -> &Param {
        match id {
            ENTITIES => &self.entities,
            RELATIONS => &self.relations,
            TIME_BASIS => &self.time.basis,
            TIME_WARP => &self.time.warp_params,
            other => panic!("unknown parameter {other:?}"),
        }
    }

    fn param_mut(&mut self, id: ParamId) -> &mut Param {
        match id {
            ENTITIES => &mut self.entities,
            RELATIONS => &mut self.relations,
            TIME_BASIS => &mut self.time.basis,
            TIME_WARP => &mut self.time.warp_params,
            other => panic!("unknown parameter {other:?}"),
        }
    }
}

/// Random parameters for `num_entities × num_relations` over `span`.
pub fn init_params<R: Rng + ?Sized>(
    num_entities: usize,
    num_relations: usize,
    span: TimeSpan,
    config: &ModelConfig,
    rng: &mut R,
) -> ModelParams {
    assert!(num_entities >= 1 && num_relations >= 1);
    let d = config.dim;
    let init = &config.init;
    let mut entities = vec![0.0; num_entities * 2 * d];
    for e in 0..num_entities {
        let row = &mut entities[e * 2 * d..(e + 1) * 2 * d];
        for i in 0..d {
            let c = rng.gen_range(-init.center..=init.center);
            let half = rng.gen_range(init.width_min..=init.width_max);
            row[i] = c - half;
            row[d + i] = c + half;
        }
    }
    let mut relations = vec![0.0; num_relations * 2 * d];
    for r in 0..num_relations {
        for i in 0..d {
            relations[r * 2 * d + i] = rng.gen_range(-init.translation..=init.translation);
        }
    }
    let basis = (0..(config.order + 1) * d)
        .map(|_| rng.gen_range(-init.time_basis..=init.time_basis))
        .collect();
    let warp_params = match config.warp {
        TimeWarp::Linear => Vec::new(),
        TimeWarp::Mlp { hidden } => {
            let mut p: Vec<f64> = (0..3 * hidden).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            p.push(0.0);
            p
        }
    };
    let time = TimeCodec::new(config.order, span, d, basis).with_warp(config.warp, warp_params);
    ModelParams {
        config: *config,
        num_entities,
        num_relations,
        entities: Param::new(entities),
        relations: Param::new(relations),
        time,
    }
}

pub fn init_for_vocab<R: Rng + ?Sized>(vocab: &Vocab, config: &ModelConfig, rng: &mut R) -> ModelParams {
    init_params(vocab.num_entities(), vocab.num_relations(), vocab.time_span, config, rng)
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `(2|E| + 2|R| + K) d`, plus warp-MLP weights when enabled.
    pub fn trainable_scalar_count(&self) -> usize {
        self.scalar_count()
    }

    pub fn expected_scalar_count(&self) -> usize {
        (2 * self.num_entities + 2 * self.num_relations + self.time.rows()) * self.dim()
            + self.config.warp.param_len()
    }

    pub fn entity_box(&self, e: EntityId) -> GumbelBox {
        let d = self.dim();
        let row = &self.entities.values[e.index() * 2 * d..(e.index() + 1) * 2 * d];
        GumbelBox::new(row[..d].to_vec(), row[d..].to_vec(), self.config.beta)
    }

    pub fn set_entity_box(&mut self, e: EntityId, b: &GumbelBox) {
        let d = self.dim();
        let row = &mut self.entities.values[e.index() * 2 * d..(e.index() + 1) * 2 * d];
        row[..d].copy_from_slice(&b.mu_min);
        row[d..].copy_from_slice(&b.mu_max);
    }

    pub fn relation(&self, r: RelationId) -> RelationParams {
        let d = self.dim();
        let row = &self.relations.values[r.index() * 2 * d..(r.index() + 1) * 2 * d];
        RelationParams {
            translation: row[..d].to_vec(),
            log_scale: row[d..].to_vec(),
        }
    }

    pub fn set_relation(&mut self, r: RelationId, p: &RelationParams) {
        let d = self.dim();
        let row = &mut self.relations.values[r.index() * 2 * d..(r.index() + 1) * 2 * d];
        row[..d].copy_from_slice(&p.translation);
        row[d..].copy_from_slice(&p.log_scale);
    }

    /// Projection direction `w` at `tau`.
    pub fn time_direction(&self, tau: Year) -> Vec<f64> {
        let p = self.time.time_embedding(tau);
        if !self.config.normalize_time {
            return p;
        }
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            p
        } else {
            p.iter().map(|x| x / norm).collect()
        }
    }

    pub fn evolved_entity(&self, e: EntityId, w: &[f64]) -> GumbelBox {
        let b = self.entity_box(e);
        if self.config.evolution.entities() {
            temporal_project_box(&b, w).expect("time direction has model dimension")
        } else {
            b
        }
    }

    pub fn evolved_relation(&self, r: RelationId, w: &[f64]) -> RelationParams {
        let p = self.relation(r);
        if self.config.evolution.relations() {
            temporal_project_vec(&p, w).expect("time direction has model dimension")
        } else {
            p
        }
    }

    /// Head-side and tail-side boxes for `q`.
    pub fn scoring_boxes(&self, q: &Quadruple) -> (GumbelBox, GumbelBox) {
        let w = self.time_direction(q.tau);
        let rel = self.evolved_relation(q.r, &w);
        let a = relation_transform(&self.evolved_entity(q.h, &w), &rel);
        let t = self.evolved_entity(q.t, &w);
        let b = match self.config.score {
            ScoreMode::Shared => relation_transform(&t, &rel),
            ScoreMode::Head => t,
        };
        (a, b)
    }

    /// `ln Vol(A ∧ B) − ln Vol(B)`, unclamped and never erroring.
    pub fn log_score(&self, q: &Quadruple) -> f64 {
        let (a, b) = self.scoring_boxes(q);
        let beta = self.config.beta;
        box_algebra::log_meet_volume_of(&a.mu_min, &a.mu_max, &b.mu_min, &b.mu_max, beta, self.config.meet)
            - box_algebra::log_volume_of(&b.mu_min, &b.mu_max, beta)
    }

    /// Score in `[SCORE_EPS, 1 - SCORE_EPS]`; `raw` holds the unclamped ratio.
    pub fn score(&self, q: &Quadruple) -> Result<Probability, BoxError> {
        let (a, b) = self.scoring_boxes(q);
        let p = box_algebra::conditional_prob(&a, &b, self.config.meet)?;
        Ok(Probability {
            value: p.raw.clamp(SCORE_EPS, 1.0 - SCORE_EPS),
            raw: p.raw,
        })
    }

    /// Log scores of every entity placed in the query's open slot.
    pub fn entity_log_scores(&self, query: &EntityQuery) -> Vec<f64> {
        let q = query.fact;
        let beta = self.config.beta;
        let mode = self.config.meet;
        let w = self.time_direction(q.tau);
        let rel = self.evolved_relation(q.r, &w);
        let head_view = |e: EntityId| relation_transform(&self.evolved_entity(e, &w), &rel);
        let tail_view = |e: EntityId| match self.config.score {
            ScoreMode::Shared => relation_transform(&self.evolved_entity(e, &w), &rel),
            ScoreMode::Head => self.evolved_entity(e, &w),
        };
        let all = (0..self.num_entities as u32).map(EntityId);
        match query.slot {
            Slot::Tail => {
                let a = head_view(q.h);
                all.map(|e| {
                    let b = tail_view(e);
                    box_algebra::log_meet_volume_of(&a.mu_min, &a.mu_max, &b.mu_min, &b.mu_max, beta, mode)
                        - box_algebra::log_volume_of(&b.mu_min, &b.mu_max, beta)
                })
                .collect()
            }
            Slot::Head => {
                let b = tail_view(q.t);
                let log_b = box_algebra::log_volume_of(&b.mu_min, &b.mu_max, beta);
                all.map(|e| {
                    let a = head_view(e);
                    box_algebra::log_meet_volume_of(&a.mu_min, &a.mu_max, &b.mu_min, &b.mu_max, beta, mode)
                        - log_b
                })
                .collect()
            }
        }
    }

    /// Log scores of `(h, r, t, τ)` for every relation `r`.
    pub fn relation_log_scores(&self, q: &Quadruple) -> Vec<f64> {
        (0..self.num_relations as u32)
            .map(|r| {
                let mut c = *q;
                c.r = RelationId(r);
                self.log_score(&c)
            })
            .collect()
    }
}

/// Shared leaves for one tape, so each parameter slice is read once per tape.
#[derive(Debug, Default)]
pub struct TapeCache {
    basis: Option<Var>,
    warp: Option<[Var; 4]>,
    directions: HashMap<Year, Var>,
    entities: HashMap<EntityId, BoxVars>,
    relations: HashMap<RelationId, (Var, Var)>,
    evolved_relations: HashMap<(RelationId, Year), (Var, Var)>,
    evolved_entities: HashMap<(EntityId, Year), BoxVars>,
}

impl TapeCache {
    pub fn new() -> Self {
        Self::default()
    }
}

fn record_project(t: &mut Tape, v: Var, w: Var) -> Var {
    let s = t.dot(w, v);
    let sw = t.scalar_mul(s, w);
    t.add(v, sw)
}

impl ModelParams {
    fn record_direction(&self, t: &mut Tape, cache: &mut TapeCache, tau: Year) -> Var {
        if let Some(&v) = cache.directions.get(&tau) {
            return v;
        }
        let basis = *cache
            .basis
            .get_or_insert_with(|| t.param(self, TIME_BASIS, 0, self.time.basis.len()));
        if cache.warp.is_none() {
            cache.warp = self.time.record_warp_leaves(t, self, TIME_WARP);
        }
        let p = self.time.record_embedding(t, tau, basis, cache.warp);
        let w = if self.config.normalize_time {
            let n2 = t.dot(p, p);
            if t.scalar(n2) == 0.0 {
                p
            } else {
                let n = t.sqrt(n2);
                let inv = t.recip(n);
                t.scalar_mul(inv, p)
            }
        } else {
            p
        };
        cache.directions.insert(tau, w);
        w
    }

    fn record_entity(&self, t: &mut Tape, cache: &mut TapeCache, e: EntityId, tau: Year) -> BoxVars {
        let d = self.dim();
        let base = match cache.entities.get(&e) {
            Some(&b) => b,
            None => {
                let off = e.index() * 2 * d;
                let b = BoxVars {
                    lo: t.param(self, ENTITIES, off, d),
                    hi: t.param(self, ENTITIES, off + d, d),
                };
                cache.entities.insert(e, b);
                b
            }
        };
        if !self.config.evolution.entities() {
            return base;
        }
        if let Some(&b) = cache.evolved_entities.get(&(e, tau)) {
            return b;
        }
        let w = self.record_direction(t, cache, tau);
        let b = BoxVars {
            lo: record_project(t, base.lo, w),
            hi: record_project(t, base.hi, w),
        };
        cache.evolved_entities.insert((e, tau), b);
        b
    }

    /// Evolved `(translation, exp(log_scale))` leaves for `r` at `tau`.
    fn record_relation(&self, t: &mut Tape, cache: &mut TapeCache, r: RelationId, tau: Year) -> (Var, Var) {
        if let Some(&v) = cache.evolved_relations.get(&(r, tau)) {
            return v;
        }
        let d = self.dim();
        let (tr, ls) = match cache.relations.get(&r) {
            Some(&v) => v,
            None => {
                let off = r.index() * 2 * d;
                let v = (t.param(self, RELATIONS, off, d), t.param(self, RELATIONS, off + d, d));
                cache.relations.insert(r, v);
                v
            }
        };
        let (tr, ls) = if self.config.evolution.relations() {
            let w = self.record_direction(t, cache, tau);
            (record_project(t, tr, w), record_project(t, ls, w))
        } else {
            (tr, ls)
        };
        let scale = t.exp(ls);
        cache.evolved_relations.insert((r, tau), (tr, scale));
        (tr, scale)
    }

    fn record_transform(t: &mut Tape, b: BoxVars, (tr, scale): (Var, Var)) -> BoxVars {
        let lo = t.add(b.lo, tr);
        let hi = t.add(b.hi, tr);
        BoxVars {
            lo: t.mul(lo, scale),
            hi: t.mul(hi, scale),
        }
    }

    /// Records `ln Vol(A ∧ B) − ln Vol(B)` for `q`.
    pub fn record_log_score(&self, t: &mut Tape, cache: &mut TapeCache, q: &Quadruple) -> Var {
        let rel = self.record_relation(t, cache, q.r, q.tau);
        let h = self.record_entity(t, cache, q.h, q.tau);
        let tb = self.record_entity(t, cache, q.t, q.tau);
        let a = Self::record_transform(t, h, rel);
        let b = match self.config.score {
            ScoreMode::Shared => Self::record_transform(t, tb, rel),
            ScoreMode::Head => tb,
        };
        box_algebra::record::log_conditional(t, a, b, self.config.beta, self.config.meet)
    }
}

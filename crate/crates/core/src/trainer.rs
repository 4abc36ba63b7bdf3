//! Negative-sampling training: binary NLL on the score, Adam updates, periodic
//! validation and best-checkpoint tracking.
//!
//! Each batch is split into `workers` contiguous shards. Every shard records its
//! own tape and gradient buffer; buffers are applied in shard order by a single
//! reducer, so a run is bit-reproducible for a fixed seed and worker count.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::evaluator::{self, Setting};
use crate::grad::{GradBuffer, GradError, ParamSet, Tape, Var};
use crate::model::{ModelParams, TapeCache, ENTITIES};
use crate::quad_store::{negative_sample, Corrupt, Dataset, IntervalMode, Quadruple, SeenIndex};

/// Independent random streams derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Negatives = 3,
    Intervals = 4,
    Validation = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub neg_ratio: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub clamp_eps: f64,
    /// Weight of an optional `l2 · Σθ²` penalty over all parameters.
    pub l2: f64,
    pub workers: usize,
    pub interval_mode: IntervalMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 200,
            batch_size: 128,
            neg_ratio: 5,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 10,
            clamp_eps: 1e-12,
            l2: 0.0,
            workers: 1,
            interval_mode: IntervalMode::Expand,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if self.neg_ratio < 1 {
            return bad("neg_ratio must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.workers < 1 {
            return bad("workers must be at least 1");
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return bad("clamp_eps must lie in (0, 0.5)");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrain,
    #[error("non-finite value at epoch {epoch}, batch {batch}: {source}\n{dump}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        source: GradError,
        dump: String,
    },
    #[error("parameter tensor {param} became non-finite at epoch {epoch}, batch {batch}\n{dump}")]
    NonFiniteParam {
        epoch: usize,
        batch: usize,
        param: usize,
        dump: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        let shapes: Vec<usize> = params.param_ids().iter().map(|&id| params.param(id).len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam over every tensor's accumulated `grad`.
pub fn adam_step<P: ParamSet + ?Sized>(params: &mut P, state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, id) in params.param_ids().into_iter().enumerate() {
        let p = params.param_mut(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.values.len() {
            let g = p.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.values[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// `neg_ratio` corruptions per positive, grouped by positive; head and tail
/// corruption alternate along the sequence.
pub fn sample_negatives<R: Rng + ?Sized>(
    batch: &[Quadruple],
    num_entities: usize,
    neg_ratio: usize,
    rng: &mut R,
    seen: &SeenIndex,
) -> Vec<Quadruple> {
    let mut out = Vec::with_capacity(batch.len() * neg_ratio);
    for q in batch {
        for _ in 0..neg_ratio {
            let mode = if out.len() % 2 == 0 { Corrupt::Tail } else { Corrupt::Head };
            out.push(negative_sample(q, num_entities, mode, rng, seen));
        }
    }
    out
}

/// `-(1/N) [Σ log s(pos) + Σ log(1 - s(neg))]` from log scores.
///
/// Log scores are capped at `ln(1 - eps)`. The positive term has no lower clamp:
/// at initialization scores sit far below any useful `eps`, and a floor there would
/// zero every positive gradient.
pub fn nll_from_log_scores(pos: &[f64], neg: &[f64], eps: f64) -> f64 {
    let cap = (-eps).ln_1p();
    let n = (pos.len() + neg.len()).max(1) as f64;
    let sum: f64 = pos.iter().map(|&l| l.min(cap)).sum::<f64>()
        + neg
            .iter()
            .map(|&l| crate::grad::scalar::log1mexp(l.min(cap)))
            .sum::<f64>();
    -sum / n
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub terms: usize,
    /// Scores that hit the upper clamp.
    pub clamp_events: usize,
    /// One buffer per shard, in shard order, already scaled by `-1/N`.
    pub grads: Vec<GradBuffer>,
}

impl BatchLoss {
    pub fn apply_to<P: ParamSet>(&self, params: &mut P) {
        for g in &self.grads {
            g.apply_to(params);
        }
    }
}

struct Shard {
    sum: f64,
    clamp_events: usize,
    grads: GradBuffer,
}

fn record_shard(
    model: &ModelParams,
    pos: &[Quadruple],
    neg: &[Quadruple],
    eps: f64,
    seed: f64,
) -> Result<Shard, GradError> {
    let cap = (-eps).ln_1p();
    let mut tape = Tape::new();
    let mut cache = TapeCache::new();
    let mut terms: Vec<Var> = Vec::with_capacity(pos.len() + neg.len());
    let mut clamp_events = 0;
    for q in pos {
        let ls = model.record_log_score(&mut tape, &mut cache, q);
        clamp_events += usize::from(tape.scalar(ls) > cap);
        terms.push(tape.clamp(ls, f64::NEG_INFINITY, cap));
    }
    for q in neg {
        let ls = model.record_log_score(&mut tape, &mut cache, q);
        clamp_events += usize::from(tape.scalar(ls) > cap);
        let c = tape.clamp(ls, f64::NEG_INFINITY, cap);
        terms.push(tape.log1mexp(c));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    let sum = tape.forward_scalar(total)?;
    let mut grads = GradBuffer::new();
    tape.backward(total, seed, &mut grads)?;
    Ok(Shard {
        sum,
        clamp_events,
        grads,
    })
}

/// Loss and per-shard gradients for given positives and their grouped negatives.
pub fn loss_and_grads(
    model: &ModelParams,
    pos: &[Quadruple],
    neg: &[Quadruple],
    eps: f64,
    shards: usize,
) -> Result<BatchLoss, GradError> {
    assert!(!pos.is_empty(), "empty batch");
    assert_eq!(neg.len() % pos.len(), 0, "negatives must be grouped per positive");
    let ratio = neg.len() / pos.len();
    let n = pos.len() + neg.len();
    let chunk = pos.len().div_ceil(shards.max(1));
    let seed = -1.0 / n as f64;
    let parts: Vec<Result<Shard, GradError>> = (0..pos.len().div_ceil(chunk))
        .into_par_iter()
        .map(|s| {
            let lo = s * chunk;
            let hi = (lo + chunk).min(pos.len());
            record_shard(model, &pos[lo..hi], &neg[lo * ratio..hi * ratio], eps, seed)
        })
        .collect();
    let mut sum = 0.0;
    let mut clamp_events = 0;
    let mut grads = Vec::with_capacity(parts.len());
    for p in parts {
        let p = p?;
        sum += p.sum;
        clamp_events += p.clamp_events;
        grads.push(p.grads);
    }
    Ok(BatchLoss {
        loss: -sum / n as f64,
        terms: n,
        clamp_events,
        grads,
    })
}

/// Samples negatives for `batch` and computes its loss and gradients on one shard.
pub fn batch_loss<R: Rng + ?Sized>(
    batch: &[Quadruple],
    model: &ModelParams,
    cfg: &TrainConfig,
    rng: &mut R,
    seen: &SeenIndex,
) -> Result<BatchLoss, GradError> {
    let neg = sample_negatives(batch, model.num_entities, cfg.neg_ratio, rng, seen);
    loss_and_grads(model, batch, &neg, cfg.clamp_eps, 1)
}

/// Loss without gradients, e.g. on validation quadruples.
pub fn evaluate_loss(model: &ModelParams, pos: &[Quadruple], neg: &[Quadruple], eps: f64) -> f64 {
    let pos_ls: Vec<f64> = pos.par_iter().map(|q| model.log_score(q)).collect();
    let neg_ls: Vec<f64> = neg.par_iter().map(|q| model.log_score(q)).collect();
    nll_from_log_scores(&pos_ls, &neg_ls, eps)
}

fn l2_penalty<P: ParamSet + ?Sized>(params: &mut P, weight: f64) -> f64 {
    let mut total = 0.0;
    for id in params.param_ids() {
        let p = params.param_mut(id);
        for (g, &v) in p.grad.iter_mut().zip(&p.values) {
            *g += 2.0 * weight * v;
            total += v * v;
        }
    }
    weight * total
}

/// Per-tensor ranges and the inverted-box fraction, for failure reports.
pub fn diagnostics(model: &ModelParams, batch: &[Quadruple]) -> String {
    let mut s = String::new();
    for id in model.param_ids() {
        let p = model.param(id);
        let bad = p.values.iter().filter(|v| !v.is_finite()).count();
        let (lo, hi) = p
            .values
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let gmax = p.grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        s.push_str(&format!(
            "tensor {}: len {} range [{lo:e}, {hi:e}] non-finite {bad} max|grad| {gmax:e}\n",
            id.0,
            p.len()
        ));
    }
    s.push_str(&format!("inverted entity dimensions: {:.4}\n", inverted_fraction(model)));
    for q in batch.iter().take(8) {
        s.push_str(&format!("  batch quad {} {} {} {}\n", q.h.0, q.r.0, q.t.0, q.tau));
    }
    s
}

/// Fraction of entity dimensions with `mu_max < mu_min`.
pub fn inverted_fraction(model: &ModelParams) -> f64 {
    let d = model.dim();
    let v = &model.param(ENTITIES).values;
    let inverted = (0..model.num_entities)
        .flat_map(|e| (0..d).map(move |i| (e, i)))
        .filter(|&(e, i)| v[e * 2 * d + d + i] < v[e * 2 * d + i])
        .count();
    inverted as f64 / (model.num_entities * d).max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_mrr: Option<f64>,
    pub val_hits10: Option<f64>,
    pub val_loss: Option<f64>,
    /// Running minimum of `val_loss`.
    pub best_val_loss: Option<f64>,
    pub clamp_events: usize,
    pub wallclock_s: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,loss,val_mrr,val_hits10,wallclock_s,val_loss,best_val_loss";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{:.3},{},{}",
            self.epoch,
            self.loss,
            opt(self.val_mrr),
            opt(self.val_hits10),
            self.wallclock_s,
            opt(self.val_loss),
            opt(self.best_val_loss)
        )
    }
}

/// Called after every epoch; `improved` marks a new best validation MRR.
pub trait FitObserver {
    fn on_epoch(&mut self, record: &EpochRecord, model: &ModelParams, improved: bool) -> std::io::Result<()>;
}

impl FitObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord, _: &ModelParams, _: bool) -> std::io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub last: ModelParams,
    pub log: Vec<EpochRecord>,
}

impl FitResult {
    pub fn final_val_mrr(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.val_mrr)
    }
}

fn check_params(model: &ModelParams) -> Option<usize> {
    model
        .param_ids()
        .into_iter()
        .find(|&id| model.param(id).values.iter().any(|v| !v.is_finite()))
        .map(|id| id.0)
}

/// Trains `model` on `dataset.train`, validating on `dataset.valid`.
pub fn fit(
    dataset: &Dataset,
    mut model: ModelParams,
    cfg: &TrainConfig,
    observer: &mut dyn FitObserver,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .expect("thread pool");
    let train_seen = SeenIndex::new(&dataset.train);
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut neg_rng = stream_rng(cfg.seed, Stream::Negatives);
    let mut interval_rng = stream_rng(cfg.seed, Stream::Intervals);
    let valid_neg = if dataset.valid.is_empty() {
        Vec::new()
    } else {
        let mut rng = stream_rng(cfg.seed, Stream::Validation);
        sample_negatives(&dataset.valid, model.num_entities, cfg.neg_ratio, &mut rng, &dataset.seen)
    };

    let mut adam = AdamState::new(&model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_mrr = f64::NEG_INFINITY;
    let mut best_val_loss: Option<f64> = None;
    let start = Instant::now();
    info!(
        "training {} epochs, {} trainable scalars, {} workers",
        cfg.epochs,
        model.trainable_scalar_count(),
        cfg.workers
    );

    for epoch in 1..=cfg.epochs {
        let mut positives = dataset.epoch_positives(cfg.interval_mode, &mut interval_rng);
        positives.shuffle(&mut shuffle_rng);
        let (mut weighted, mut terms, mut clamp_events) = (0.0, 0usize, 0usize);
        for (b, batch) in positives.chunks(cfg.batch_size).enumerate() {
            let neg = sample_negatives(batch, model.num_entities, cfg.neg_ratio, &mut neg_rng, &train_seen);
            let result = pool.install(|| loss_and_grads(&model, batch, &neg, cfg.clamp_eps, cfg.workers));
            let bl = result.map_err(|source| TrainError::NonFinite {
                epoch,
                batch: b,
                source,
                dump: diagnostics(&model, batch),
            })?;
            model.zero_grads();
            bl.apply_to(&mut model);
            let mut loss = bl.loss;
            if cfg.l2 > 0.0 {
                loss += l2_penalty(&mut model, cfg.l2);
            }
            adam_step(&mut model, &mut adam, cfg.lr, &cfg.adam);
            if let Some(param) = check_params(&model) {
                return Err(TrainError::NonFiniteParam {
                    epoch,
                    batch: b,
                    param,
                    dump: diagnostics(&model, batch),
                });
            }
            weighted += loss * bl.terms as f64;
            terms += bl.terms;
            clamp_events += bl.clamp_events;
        }
        let mut record = EpochRecord {
            epoch,
            loss: weighted / terms.max(1) as f64,
            val_mrr: None,
            val_hits10: None,
            val_loss: None,
            best_val_loss,
            clamp_events,
            wallclock_s: 0.0,
        };
        let validate = cfg.eval_every > 0
            && !dataset.valid.is_empty()
            && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let mut improved = false;
        if validate {
            let (report, vloss) = pool.install(|| {
                (
                    evaluator::link_prediction(&dataset.valid, &model, &dataset.seen, Setting::Filtered, false),
                    evaluate_loss(&model, &dataset.valid, &valid_neg, cfg.clamp_eps),
                )
            });
            record.val_mrr = Some(report.mrr);
            record.val_hits10 = Some(report.hits_at(10));
            record.val_loss = Some(vloss);
            best_val_loss = Some(best_val_loss.map_or(vloss, |b| b.min(vloss)));
            record.best_val_loss = best_val_loss;
            if report.mrr > best_mrr {
                best_mrr = report.mrr;
                best = model.clone();
                best_epoch = Some(epoch);
                improved = true;
            }
        }
        record.wallclock_s = start.elapsed().as_secs_f64();
        debug!(
            "epoch {epoch}: clamp events {clamp_events}, inverted dims {:.4}",
            inverted_fraction(&model)
        );
        match record.val_mrr {
            Some(mrr) => info!("epoch {epoch}: loss {:.6} val MRR {mrr:.4}", record.loss),
            None => info!("epoch {epoch}: loss {:.6}", record.loss),
        }
        observer.on_epoch(&record, &model, improved)?;
        log.push(record);
    }
    if best_epoch.is_none() {
        best = model.clone();
    }
    Ok(FitResult {
        best,
        best_epoch,
        last: model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Param, ParamId};

    struct Scalar(Param);

    impl ParamSet for Scalar {
        fn param_ids(&self) -> Vec<ParamId> {
            vec![ParamId(0)]
        }
        fn param(&self, _: ParamId) -> &Param {
            &self.0
        }
        fn param_mut(&mut self, _: ParamId) -> &mut Param {
            &mut self.0
        }
    }

    #[test]
    fn nll_examples() {
        let eps: f64 = 1e-12;
        let hi = (1.0 - eps).ln();
        let lo = eps.ln();
        let l = nll_from_log_scores(&[hi, hi], &[lo, lo, lo], eps);
        assert!(l > 0.0 && l < 2e-11, "{l}");
        assert!((nll_from_log_scores(&[0.5f64.ln()], &[], eps) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Scalar(Param::new(vec![1.5, -2.0]));
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, 0.1, &AdamConfig::default());
        assert_eq!(p.0.values, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Scalar(Param::new(vec![0.0, 0.0]));
        p.0.grad = vec![3.0, -0.2];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, 0.01, &AdamConfig::default());
        assert!((p.0.values[0] + 0.01).abs() < 1e-9);
        assert!((p.0.values[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut p = Scalar(Param::new(vec![1.0]));
        let mut s = AdamState::new(&p);
        for _ in 0..200 {
            p.0.grad[0] = 2.0 * p.0.values[0];
            adam_step(&mut p, &mut s, 0.1, &AdamConfig::default());
        }
        assert!(p.0.values[0].abs() < 0.05, "{}", p.0.values[0]);
    }

    #[test]
    fn negatives_alternate_slots() {
        let mut rng = stream_rng(1, Stream::Negatives);
        let batch = [Quadruple::new(0, 0, 1, 2000)];
        let neg = sample_negatives(&batch, 50, 4, &mut rng, &SeenIndex::default());
        assert_eq!(neg.len(), 4);
        assert!(neg[0].h.0 == 0 && neg[0].t.0 != 1);
        assert!(neg[1].t.0 == 1 && neg[1].h.0 != 0);
    }

    #[test]
    fn streams_differ() {
        let a: u64 = stream_rng(9, Stream::Shuffle).gen();
        let b: u64 = stream_rng(9, Stream::Negatives).gen();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(9, Stream::Shuffle).gen::<u64>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            neg_ratio: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

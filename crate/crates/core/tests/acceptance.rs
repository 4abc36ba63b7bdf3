//! Acceptance runner: one PASS / FAIL / NOT RUN line per criterion.
//!
//! Criteria 1 and 8 need the public YAGO11k and WikiData splits. Point
//! `PTBOX_DATA_DIR` at a directory holding `yago11k/` and `wikidata/` (each with
//! train/valid/test) to run criterion 1; criterion 8 trains for hours and also
//! needs `PTBOX_BENCHMARK=1`.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use ptbox::box_algebra::{expected_volume, meet, GumbelBox, MeetMode};
use ptbox::checkpoint;
use ptbox::evaluator::probe::{self, Pattern, ProbeInstance};
use ptbox::evaluator::{self, Setting};
use ptbox::model::{init_for_vocab, init_params, EvolutionTarget, ModelConfig, ScoreMode};
use ptbox::quad_store::{DataOptions, Dataset, EntityId, Quadruple, RelationId};
use ptbox::synthetic::{generate, SyntheticSpec, SYMMETRIC};
use ptbox::time_codec::{bernstein_basis, TimeSpan};
use ptbox::trainer::{fit, stream_rng, Stream, TrainConfig};
use rand::Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn data_dir(name: &str) -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("PTBOX_DATA_DIR")?);
    [name.to_string(), name.to_uppercase()]
        .into_iter()
        .map(|n| root.join(n))
        .find(|p| p.is_dir())
}

fn c1_dataset_fidelity() -> Verdict {
    let (Some(yago), Some(wiki)) = (data_dir("yago11k"), data_dir("wikidata")) else {
        return Verdict::NotRun("PTBOX_DATA_DIR with yago11k/ and wikidata/ not available".into());
    };
    let start = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for (dir, expected) in [(yago, [10623, 10, 16408, 2050, 2051]), (wiki, [500, 24, 32497, 4062, 4062])] {
        match Dataset::load(&dir, DataOptions::default()) {
            Ok(ds) => {
                let got = [
                    ds.vocab.num_entities(),
                    ds.vocab.num_relations(),
                    ds.counts[0].raw,
                    ds.counts[1].raw,
                    ds.counts[2].raw,
                ];
                ok &= got == expected;
                details.push(format!("{}: {got:?} (want {expected:?})", dir.display()));
            }
            Err(e) => {
                ok = false;
                details.push(format!("{}: {e}", dir.display()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 10.0;
    verdict(ok, format!("{}; {secs:.2}s (< 10 s)", details.join("; ")))
}

fn c2_bernstein() -> Verdict {
    let start = Instant::now();
    let mut worst_sum = 0.0f64;
    let mut negative = 0;
    let mut endpoints_exact = true;
    for n in [2, 5, 20, 64] {
        for i in 0..1000 {
            let a = bernstein_basis(i as f64 / 999.0, n).alpha;
            worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
            negative += a.iter().filter(|&&v| v < 0.0).count();
        }
        let (zero, one) = (bernstein_basis(0.0, n).alpha, bernstein_basis(1.0, n).alpha);
        endpoints_exact &= (0..=n).all(|k| zero[k] == f64::from(k == 0) && one[k] == f64::from(k == n));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_sum < 1e-12 && negative == 0 && endpoints_exact && secs < 1.0,
        format!(
            "max |sum-1| {worst_sum:.2e} (< 1e-12), negatives {negative}, endpoints exact {endpoints_exact}, {secs:.3}s (< 1 s)"
        ),
    )
}

fn c3_volume_oracle() -> Verdict {
    const D: usize = 3;
    let mut r = rng(303);
    // Sides of at least 500β, so the box is "hard" at this temperature.
    let random_box = |beta: f64, r: &mut rand_chacha::ChaCha8Rng| {
        let lo: Vec<f64> = (0..D).map(|_| r.gen_range(-1.0..1.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + r.gen_range(0.5..2.0)).collect();
        GumbelBox::new(lo, hi, beta)
    };
    let mut worst_vol = 0.0f64;
    for _ in 0..500 {
        let b = random_box(1e-3, &mut r);
        let exact: f64 = b.mu_min.iter().zip(&b.mu_max).map(|(l, h)| h - l).product();
        worst_vol = worst_vol.max((expected_volume(&b).volume() - exact).abs() / exact);
    }
    let betas = [1e-2, 1e-4, 1e-6];
    let mut mean = [0.0; 3];
    let mut non_monotone = 0;
    for _ in 0..500 {
        let (a, b) = (random_box(1.0, &mut r), random_box(1.0, &mut r));
        let mut errs = [0.0; 3];
        for (k, &beta) in betas.iter().enumerate() {
            let a = GumbelBox::new(a.mu_min.clone(), a.mu_max.clone(), beta);
            let b = GumbelBox::new(b.mu_min.clone(), b.mu_max.clone(), beta);
            let g = meet(&a, &b, MeetMode::Gumbel).unwrap();
            let h = meet(&a, &b, MeetMode::Hard).unwrap();
            errs[k] = g
                .mu_min
                .iter()
                .zip(&h.mu_min)
                .chain(g.mu_max.iter().zip(&h.mu_max))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            mean[k] += errs[k] / 500.0;
        }
        // Below ~1e-15 only rounding is left.
        if errs[1] > errs[0] + 1e-15 || errs[2] > errs[1] + 1e-15 {
            non_monotone += 1;
        }
    }
    let shrinking = mean[0] > mean[1] && mean[1] > mean[2];
    verdict(
        worst_vol < 0.01 && non_monotone == 0 && shrinking,
        format!(
            "max volume rel err {worst_vol:.2e} (< 1e-2); meet corner error mean {:.2e} / {:.2e} / {:.2e} at beta 1e-2 / 1e-4 / 1e-6, non-monotone pairs {non_monotone}",
            mean[0], mean[1], mean[2]
        ),
    )
}

fn c4_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut ok = true;
    for meet in MEETS {
        for score in SCORES {
            let cfg = toy_config(meet, score, EvolutionTarget::Both);
            for c in toy_gradient_case(&cfg, 4) {
                ok &= c.max_rel_err < 1e-4;
                let key = c.class.to_string();
                match worst.iter_mut().find(|(k, _)| *k == key) {
                    Some(w) => w.1 = w.1.max(c.max_rel_err),
                    None => worst.push((key, c.max_rel_err)),
                }
            }
        }
    }
    let classes = ["entity corners", "relation translation", "relation log-scale", "time basis"];
    ok &= classes.iter().all(|c| worst.iter().any(|(k, _)| k == c));
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect();
    verdict(
        ok,
        format!(
            "max rel err over gumbel/hard x shared/head, 50 quads, h=1e-5: {} (< 1e-4); {secs:.2}s (< 60 s)",
            detail.join(", ")
        ),
    )
}

fn c5_translation_cancellation() -> Verdict {
    let mut r = rng(505);
    let mut worst = 0.0f64;
    for meet in MEETS {
        for trial in 0..100 {
            let m = toy_model(&toy_config(meet, ScoreMode::Shared, EvolutionTarget::Both), trial);
            let q = random_quads(1, TOY_ENTITIES, TOY_RELATIONS, TOY_SPAN, &mut r)[0];
            let mut moved = m.clone();
            let mut p = m.relation(q.r);
            p.translation = (0..m.dim()).map(|_| r.gen_range(-5.0..5.0)).collect();
            moved.set_relation(q.r, &p);
            worst = worst.max((m.log_score(&q).exp() - moved.log_score(&q).exp()).abs());
        }
    }
    // Head mode: identical unit boxes, then shift the head by half a side.
    let cfg = ModelConfig {
        dim: 2,
        order: 2,
        beta: 1e-3,
        meet: MeetMode::Hard,
        score: ScoreMode::Head,
        ..ModelConfig::default()
    };
    let mut m = init_params(2, 1, TimeSpan::new(2000, 2000), &cfg, &mut rng(0));
    for e in 0..2 {
        m.set_entity_box(EntityId(e), &GumbelBox::new(vec![0.0; 2], vec![1.0; 2], cfg.beta));
    }
    m.set_relation(RelationId(0), &ptbox::model::RelationParams::identity(2));
    m.time.basis.values.fill(0.0);
    let q = Quadruple::new(0, 0, 1, 2000);
    let mut moved = m.clone();
    let mut p = m.relation(RelationId(0));
    p.translation = vec![0.5, 0.0];
    moved.set_relation(RelationId(0), &p);
    let head_delta = (m.log_score(&q).exp() - moved.log_score(&q).exp()).abs();
    verdict(
        worst <= 1e-9 && head_delta > 1e-3,
        format!("shared mode max |delta score| {worst:.2e} over 200 trials (<= 1e-9); head mode constructed delta {head_delta:.3} (> 1e-3)"),
    )
}

fn c6_probe_suite() -> Verdict {
    let results = probe::run_builtin_suite(probe::DEFAULT_TOLERANCE);
    let wrong: Vec<&str> = results
        .iter()
        .filter(|(c, o)| c.expect_satisfied != o.satisfied)
        .map(|(c, _)| c.name.as_str())
        .collect();
    let patterns = Pattern::ALL.iter().all(|p| {
        let rows = || results.iter().filter(|(c, _)| c.instance.pattern == *p);
        rows().any(|(c, _)| c.expect_satisfied) && rows().any(|(c, _)| !c.expect_satisfied)
    });
    verdict(
        wrong.is_empty() && patterns,
        format!(
            "{} of {} constructed cases as expected, every pattern has a satisfying and a violating case: {patterns}; tol 1e-6{}",
            results.len() - wrong.len(),
            results.len(),
            if wrong.is_empty() { String::new() } else { format!("; wrong: {}", wrong.join(", ")) }
        ),
    )
}

/// Settings used for the synthetic run.
fn synthetic_configs() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        dim: 4,
        order: 3,
        beta: 1e-3,
        meet: MeetMode::Hard,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        lr: 0.05,
        epochs: 500,
        batch_size: 8,
        neg_ratio: 1,
        eval_every: 50,
        seed: 1,
        ..TrainConfig::default()
    };
    (model, train)
}

fn c7_synthetic() -> Verdict {
    let start = Instant::now();
    let kg = generate(&SyntheticSpec::default());
    let ds = kg.dataset().unwrap();
    let (mcfg, tcfg) = synthetic_configs();
    let m = init_for_vocab(&ds.vocab, &mcfg, &mut stream_rng(tcfg.seed, Stream::Init));
    let res = fit(&ds, m, &tcfg, &mut ()).unwrap();
    let model = &res.last;
    let report = evaluator::link_prediction(&ds.test, model, &ds.seen, Setting::Filtered, false);
    let sym = ds.vocab.relation_id(SYMMETRIC).unwrap();
    let gaps: Vec<f64> = ds
        .test
        .iter()
        .filter(|q| q.r == sym)
        .map(|q| {
            let inst = ProbeInstance {
                pattern: Pattern::Symmetry,
                relations: vec![sym],
                entities: vec![q.h, q.t],
            };
            probe::evaluate_instance(model, &inst, q.tau, probe::DEFAULT_TOLERANCE).unwrap().gap()
        })
        .collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        report.mrr >= 0.9 && mean_gap < 0.05 && secs < 300.0,
        format!(
            "{} entities, {} facts, {} epochs: test filtered MRR {:.4} (>= 0.9); symmetry gap on {} held-out pairs mean {mean_gap:.4} max {max_gap:.4} (< 0.05); {secs:.1}s (< 300 s)",
            kg.entity_count(),
            kg.fact_count(),
            tcfg.epochs,
            report.mrr,
            gaps.len()
        ),
    )
}

fn benchmark_run(dir: &Path, limit: Duration) -> Result<(ptbox::trainer::FitResult, Dataset, f64), String> {
    let ds = Dataset::load(dir, DataOptions::default()).map_err(|e| e.to_string())?;
    let cfg = ptbox::config::RunConfig::default();
    let m = init_for_vocab(&ds.vocab, &cfg.model, &mut stream_rng(cfg.train.seed, Stream::Init));
    let start = Instant::now();
    let mut train = cfg.train;
    train.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let res = fit(&ds, m, &train, &mut ()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    if start.elapsed() > limit {
        return Err(format!("took {secs:.0}s, limit {}s", limit.as_secs()));
    }
    Ok((res, ds, secs))
}

fn best_loss_monotone(res: &ptbox::trainer::FitResult) -> bool {
    let best: Vec<f64> = res.log.iter().filter_map(|r| r.best_val_loss).collect();
    best.windows(2).all(|w| w[1] <= w[0])
}

fn c8_benchmarks() -> Verdict {
    let (Some(yago), Some(wiki)) = (data_dir("yago11k"), data_dir("wikidata")) else {
        return Verdict::NotRun("PTBOX_DATA_DIR with yago11k/ and wikidata/ not available".into());
    };
    if std::env::var_os("PTBOX_BENCHMARK").is_none() {
        return Verdict::NotRun("multi-hour runs; set PTBOX_BENCHMARK=1".into());
    }
    let wiki = match benchmark_run(&wiki, Duration::from_secs(2 * 3600)) {
        Ok((res, ds, secs)) => {
            let r = evaluator::link_prediction(&ds.test, &res.best, &ds.seen, Setting::Filtered, false);
            (
                r.mrr >= 0.20 && r.hits_at(10) >= 0.40 && best_loss_monotone(&res),
                format!("WikiData MRR {:.4} (>= 0.20) Hits@10 {:.4} (>= 0.40) in {secs:.0}s", r.mrr, r.hits_at(10)),
            )
        }
        Err(e) => (false, format!("WikiData: {e}")),
    };
    let yago = match benchmark_run(&yago, Duration::from_secs(4 * 3600)) {
        Ok((res, ds, secs)) => {
            let r = evaluator::relation_prediction(&ds.test, &res.best, false);
            (
                r.hits_at(1) >= 0.80 && best_loss_monotone(&res),
                format!("YAGO11k relation Hits@1 {:.4} (>= 0.80) in {secs:.0}s", r.hits_at(1)),
            )
        }
        Err(e) => (false, format!("YAGO11k: {e}")),
    };
    verdict(wiki.0 && yago.0, format!("{}; {}", wiki.1, yago.1))
}

fn c9_parameter_accounting() -> Verdict {
    let mut details = Vec::new();
    let mut ok = true;
    for (ne, nr, order, dim) in [(10, 3, 3, 4), (500, 24, 20, 128), (10623, 10, 20, 128)] {
        let cfg = ModelConfig {
            dim,
            order,
            ..ModelConfig::default()
        };
        let m = init_params(ne, nr, TimeSpan::new(0, 1), &cfg, &mut rng(9));
        let want = (2 * ne + 2 * nr + order + 1) * dim;
        ok &= m.trainable_scalar_count() == want;
        details.push(format!("|E|={ne} |R|={nr} n={order} d={dim}: {} (want {want})", m.trainable_scalar_count()));
    }
    verdict(ok, details.join("; "))
}

fn c10_determinism() -> Verdict {
    let kg = generate(&SyntheticSpec::default());
    let ds = kg.dataset().unwrap();
    let (mcfg, mut tcfg) = synthetic_configs();
    tcfg.epochs = 30;
    tcfg.eval_every = 10;
    tcfg.workers = 1;
    let run = || {
        let m = init_for_vocab(&ds.vocab, &mcfg, &mut stream_rng(tcfg.seed, Stream::Init));
        let res = fit(&ds, m, &tcfg, &mut ()).unwrap();
        let report = evaluator::link_prediction(&ds.test, &res.best, &ds.seen, Setting::Filtered, true);
        let mut ranks = Vec::new();
        report.write_per_query(&mut ranks, &evaluator::link_query_labels(&ds.test)).unwrap();
        let losses: Vec<u64> = res.log.iter().map(|r| r.loss.to_bits()).collect();
        (
            checkpoint::encode(&res.best),
            checkpoint::encode(&res.last),
            report.csv_row("link", "filtered"),
            ranks,
            losses,
        )
    };
    let (a, b) = (run(), run());
    let same_ckpt = a.0 == b.0 && a.1 == b.1;
    let same_report = a.2 == b.2 && a.3 == b.3;
    let same_trace = a.4 == b.4;
    verdict(
        same_ckpt && same_report && same_trace,
        format!("checkpoints identical {same_ckpt} ({} bytes), reports identical {same_report}, loss traces identical {same_trace}", a.0.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("dataset fidelity", c1_dataset_fidelity),
        ("Bernstein basis", c2_bernstein),
        ("volume oracle", c3_volume_oracle),
        ("gradient suite", c4_gradients),
        ("translation cancellation", c5_translation_cancellation),
        ("pattern probe suite", c6_probe_suite),
        ("synthetic learnability", c7_synthetic),
        ("benchmark ballpark", c8_benchmarks),
        ("parameter accounting", c9_parameter_accounting),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (status, detail) = match check() {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {:>2} {:<26} {status}: {detail}", i + 1, name);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

//! Ranking evaluation: filtered/raw link prediction, relation prediction and
//! metric reports.

pub mod probe;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;

use crate::model::ModelParams;
use crate::quad_store::{filtered_candidates, EntityId, EntityQuery, Quadruple, SeenIndex, Slot};

pub const HITS_AT: [u32; 3] = [1, 3, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Raw,
    Filtered,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Raw => "raw",
            Setting::Filtered => "filtered",
        }
    }
}

fn finite_or_floor(s: f64) -> f64 {
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// `1 + #(strictly higher) + #(exact ties) / 2`, where `others` excludes the truth.
pub fn mid_rank(truth: f64, others: impl IntoIterator<Item = f64>) -> f64 {
    let truth = finite_or_floor(truth);
    let (mut higher, mut ties) = (0usize, 0usize);
    for s in others {
        let s = finite_or_floor(s);
        if s > truth {
            higher += 1;
        } else if s == truth {
            ties += 1;
        }
    }
    1.0 + higher as f64 + 0.5 * ties as f64
}

/// Rank of the truth among `candidates` (which must contain it) under `scores[e]`.
pub fn rank_among(scores: &[f64], truth: EntityId, candidates: &[EntityId]) -> f64 {
    debug_assert!(candidates.contains(&truth));
    mid_rank(
        scores[truth.index()],
        candidates.iter().filter(|&&e| e != truth).map(|e| scores[e.index()]),
    )
}

pub fn rank_entity_query(query: &EntityQuery, model: &ModelParams, seen: &SeenIndex, setting: Setting) -> f64 {
    let scores = model.entity_log_scores(query);
    let truth = query.truth();
    match setting {
        Setting::Raw => mid_rank(
            scores[truth.index()],
            scores
                .iter()
                .enumerate()
                .filter(|&(e, _)| e != truth.index())
                .map(|(_, &s)| s),
        ),
        Setting::Filtered => rank_among(&scores, truth, &filtered_candidates(query, seen, model.num_entities)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub count: usize,
    pub mr: f64,
    pub mrr: f64,
    pub hits: BTreeMap<u32, f64>,
    pub ranks: Option<Vec<f64>>,
}

impl RankingReport {
    /// Metrics over `ranks`; an empty slice gives a zero report.
    pub fn from_ranks(ranks: &[f64], keep_ranks: bool) -> Self {
        let n = ranks.len();
        let denom = n.max(1) as f64;
        let mr = ranks.iter().sum::<f64>() / denom;
        let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / denom;
        let hits = HITS_AT
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / denom))
            .collect();
        Self {
            count: n,
            mr,
            mrr,
            hits,
            ranks: keep_ranks.then(|| ranks.to_vec()),
        }
    }

    pub fn hits_at(&self, k: u32) -> f64 {
        self.hits.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn csv_header() -> &'static str {
        "task,setting,count,mr,mrr,hits1,hits3,hits10"
    }

    pub fn csv_row(&self, task: &str, setting: &str) -> String {
        format!(
            "{task},{setting},{},{},{},{},{},{}",
            self.count,
            self.mr,
            self.mrr,
            self.hits_at(1),
            self.hits_at(3),
            self.hits_at(10)
        )
    }

    /// One rank per line, aligned with `queries` (head then tail query per quadruple
    /// for link prediction).
    pub fn write_per_query<W: Write>(&self, out: &mut W, labels: &[String]) -> io::Result<()> {
        writeln!(out, "query,rank")?;
        if let Some(ranks) = &self.ranks {
            for (label, r) in labels.iter().zip(ranks) {
                writeln!(out, "{label},{r}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for RankingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "  queries  {:>10}", self.count)?;
        writeln!(f, "  MR       {:>10.3}", self.mr)?;
        writeln!(f, "  MRR      {:>10.4}", self.mrr)?;
        for (k, v) in &self.hits {
            writeln!(f, "  Hits@{k:<3} {v:>10.4}")?;
        }
        Ok(())
    }
}

/// Head and tail query ranks for every quadruple, in `quads` order.
pub fn link_ranks(quads: &[Quadruple], model: &ModelParams, seen: &SeenIndex, setting: Setting) -> Vec<f64> {
    quads
        .par_iter()
        .flat_map_iter(|q| {
            [EntityQuery::head(*q), EntityQuery::tail(*q)]
                .map(|query| rank_entity_query(&query, model, seen, setting))
        })
        .collect()
}

pub fn link_prediction(
    quads: &[Quadruple],
    model: &ModelParams,
    seen: &SeenIndex,
    setting: Setting,
    keep_ranks: bool,
) -> RankingReport {
    RankingReport::from_ranks(&link_ranks(quads, model, seen, setting), keep_ranks)
}

/// Rank of the true relation among all relations for `(h, ?, t, τ)`.
pub fn rank_relation_query(q: &Quadruple, model: &ModelParams) -> f64 {
    let scores = model.relation_log_scores(q);
    mid_rank(
        scores[q.r.index()],
        scores
            .iter()
            .enumerate()
            .filter(|&(r, _)| r != q.r.index())
            .map(|(_, &s)| s),
    )
}

pub fn relation_prediction(quads: &[Quadruple], model: &ModelParams, keep_ranks: bool) -> RankingReport {
    let ranks: Vec<f64> = quads.par_iter().map(|q| rank_relation_query(q, model)).collect();
    RankingReport::from_ranks(&ranks, keep_ranks)
}

/// Labels matching the order of [`link_ranks`].
pub fn link_query_labels(quads: &[Quadruple]) -> Vec<String> {
    quads
        .iter()
        .flat_map(|q| {
            [Slot::Head, Slot::Tail].map(|s| {
                let tag = if s == Slot::Head { "head" } else { "tail" };
                format!("{}-{}-{}-{}:{tag}", q.h.0, q.r.0, q.t.0, q.tau)
            })
        })
        .collect()
}

pub fn relation_query_labels(quads: &[Quadruple]) -> Vec<String> {
    quads
        .iter()
        .map(|q| format!("{}-{}-{}-{}:relation", q.h.0, q.r.0, q.t.0, q.tau))
        .collect()
}

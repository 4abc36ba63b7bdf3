//! Inference-pattern probe at a fixed timestamp.
//!
//! `P_r(e1|e2)` is the model score of `(e1, r, e2, τ)`. For two relations,
//! `I_r = f_r(e1) ∧ g_r(e2)` is the relation-wise intersection box (`g_r` being the
//! tail view: transformed in shared mode, untouched in head mode) and
//! `P_{r1,r2}(e1|e2) = Vol(I_{r1} ∧ I_{r2}) / Vol(g_{r1}(e2) ∧ g_{r2}(e2))`.
//! Conditioning on a near-empty box yields probability 0 here instead of an error.

use std::fmt;

use crate::box_algebra::{self, GumbelBox, MeetMode, MIN_CONDITIONING_LOG_VOLUME};
use crate::grad::Param;
use crate::model::{relation_transform, EvolutionTarget, InitRanges, ModelConfig, ModelParams, ScoreMode};
use crate::quad_store::{EntityId, RelationId, Year};
use crate::time_codec::{TimeCodec, TimeSpan, TimeWarp};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Symmetry,
    Antisymmetry,
    Inversion,
    Composition,
    Hierarchy,
    Intersection,
    MutualExclusion,
}

impl Pattern {
    pub const ALL: [Pattern; 7] = [
        Pattern::Symmetry,
        Pattern::Antisymmetry,
        Pattern::Inversion,
        Pattern::Composition,
        Pattern::Hierarchy,
        Pattern::Intersection,
        Pattern::MutualExclusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Symmetry => "symmetry",
            Pattern::Antisymmetry => "antisymmetry",
            Pattern::Inversion => "inversion",
            Pattern::Composition => "composition",
            Pattern::Hierarchy => "hierarchy",
            Pattern::Intersection => "intersection",
            Pattern::MutualExclusion => "mutual_exclusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// `(relations, entities)` an instance must name.
    pub fn arity(self) -> (usize, usize) {
        match self {
            Pattern::Symmetry | Pattern::Antisymmetry => (1, 2),
            Pattern::Inversion | Pattern::Hierarchy | Pattern::MutualExclusion => (2, 2),
            Pattern::Composition => (3, 3),
            Pattern::Intersection => (3, 2),
        }
    }

    /// Name of the headline statistic reported per instance.
    pub fn gap_name(self) -> &'static str {
        match self {
            Pattern::Symmetry | Pattern::Inversion => "gap",
            Pattern::Antisymmetry => "reverse_prob",
            Pattern::Composition => "joint",
            Pattern::Hierarchy | Pattern::Intersection => "margin",
            Pattern::MutualExclusion => "overlap_volume",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeInstance {
    pub pattern: Pattern,
    pub relations: Vec<RelationId>,
    pub entities: Vec<EntityId>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("line {line}: unknown pattern {name:?}")]
    UnknownPattern { line: usize, name: String },
    #[error("line {line}: expected `<pattern> <relation ids> <entity ids>`, found {text:?}")]
    Malformed { line: usize, text: String },
    #[error("{pattern} needs {relations} relation(s) and {entities} entit(ies)")]
    Arity {
        pattern: Pattern,
        relations: usize,
        entities: usize,
    },
    #[error("{kind} id {id} out of range (have {count})")]
    OutOfRange { kind: &'static str, id: u32, count: usize },
}

fn parse_ids(field: &str) -> Option<Vec<u32>> {
    field.split(',').map(|s| s.trim().parse().ok()).collect()
}

/// Parses lines `<pattern> <r,r,..> <e,e,..>`; blank lines and `#` comments are skipped.
pub fn parse_probe_file(text: &str) -> Result<Vec<ProbeInstance>, ProbeError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let pattern = Pattern::parse(fields[0]).ok_or_else(|| ProbeError::UnknownPattern {
            line,
            name: fields[0].to_string(),
        })?;
        let malformed = || ProbeError::Malformed {
            line,
            text: raw.to_string(),
        };
        if fields.len() != 3 {
            return Err(malformed());
        }
        let relations = parse_ids(fields[1]).ok_or_else(malformed)?;
        let entities = parse_ids(fields[2]).ok_or_else(malformed)?;
        let inst = ProbeInstance {
            pattern,
            relations: relations.into_iter().map(RelationId).collect(),
            entities: entities.into_iter().map(EntityId).collect(),
        };
        check_arity(&inst)?;
        out.push(inst);
    }
    Ok(out)
}

fn check_arity(inst: &ProbeInstance) -> Result<(), ProbeError> {
    let (relations, entities) = inst.pattern.arity();
    if inst.relations.len() != relations || inst.entities.len() != entities {
        return Err(ProbeError::Arity {
            pattern: inst.pattern,
            relations,
            entities,
        });
    }
    Ok(())
}

fn check_ids(m: &ModelParams, inst: &ProbeInstance) -> Result<(), ProbeError> {
    check_arity(inst)?;
    for r in &inst.relations {
        if r.index() >= m.num_relations {
            return Err(ProbeError::OutOfRange {
                kind: "relation",
                id: r.0,
                count: m.num_relations,
            });
        }
    }
    for e in &inst.entities {
        if e.index() >= m.num_entities {
            return Err(ProbeError::OutOfRange {
                kind: "entity",
                id: e.0,
                count: m.num_entities,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub instance: ProbeInstance,
    /// Named intermediate quantities, headline statistic first.
    pub values: Vec<(&'static str, f64)>,
    pub satisfied: bool,
}

impl ProbeOutcome {
    pub fn gap(&self) -> f64 {
        self.values[0].1
    }
}

/// Time-evolved, relation-transformed views of a model at one timestamp.
struct Views<'a> {
    m: &'a ModelParams,
    w: Vec<f64>,
}

impl Views<'_> {
    fn head(&self, e: EntityId, r: RelationId) -> GumbelBox {
        relation_transform(&self.m.evolved_entity(e, &self.w), &self.m.evolved_relation(r, &self.w))
    }

    fn tail(&self, e: EntityId, r: RelationId) -> GumbelBox {
        match self.m.config.score {
            ScoreMode::Shared => self.head(e, r),
            ScoreMode::Head => self.m.evolved_entity(e, &self.w),
        }
    }

    fn mode(&self) -> MeetMode {
        self.m.config.meet
    }

    fn log_vol(&self, b: &GumbelBox) -> f64 {
        box_algebra::log_volume_of(&b.mu_min, &b.mu_max, b.beta)
    }

    fn meet(&self, a: &GumbelBox, b: &GumbelBox) -> GumbelBox {
        box_algebra::meet(a, b, self.mode()).expect("views share dimension and scale")
    }

    fn ratio(&self, log_num: f64, log_den: f64) -> f64 {
        if log_den < MIN_CONDITIONING_LOG_VOLUME {
            0.0
        } else {
            (log_num - log_den).exp()
        }
    }

    /// `P_r(e1|e2)`.
    fn cond(&self, r: RelationId, e1: EntityId, e2: EntityId) -> f64 {
        let a = self.head(e1, r);
        let b = self.tail(e2, r);
        self.ratio(self.log_vol(&self.meet(&a, &b)), self.log_vol(&b))
    }

    fn intersection(&self, r: RelationId, e1: EntityId, e2: EntityId) -> GumbelBox {
        self.meet(&self.head(e1, r), &self.tail(e2, r))
    }

    /// `P_{r1,r2}(e1|e2)`.
    fn joint_cond(&self, r1: RelationId, r2: RelationId, e1: EntityId, e2: EntityId) -> f64 {
        let num = self.meet(&self.intersection(r1, e1, e2), &self.intersection(r2, e1, e2));
        let den = self.meet(&self.tail(e2, r1), &self.tail(e2, r2));
        self.ratio(self.log_vol(&num), self.log_vol(&den))
    }
}

pub fn evaluate_instance(
    m: &ModelParams,
    inst: &ProbeInstance,
    tau: Year,
    tol: f64,
) -> Result<ProbeOutcome, ProbeError> {
    check_ids(m, inst)?;
    let v = Views {
        m,
        w: m.time_direction(tau),
    };
    let r = &inst.relations;
    let e = &inst.entities;
    let (values, satisfied) = match inst.pattern {
        Pattern::Symmetry => {
            let fwd = v.cond(r[0], e[0], e[1]);
            let bwd = v.cond(r[0], e[1], e[0]);
            let gap = (fwd - bwd).abs();
            (vec![("gap", gap), ("forward", fwd), ("backward", bwd)], gap <= tol && fwd >= tol)
        }
        Pattern::Antisymmetry => {
            let fwd = v.cond(r[0], e[0], e[1]);
            let bwd = v.cond(r[0], e[1], e[0]);
            (vec![("reverse_prob", bwd), ("forward", fwd)], fwd >= tol && bwd <= tol)
        }
        Pattern::Inversion => {
            let p1 = v.cond(r[0], e[0], e[1]);
            let p2 = v.cond(r[1], e[1], e[0]);
            let gap = (p1 - p2).abs();
            (vec![("gap", gap), ("p_r1", p1), ("p_r2_inverse", p2)], gap <= tol && p1 >= tol)
        }
        Pattern::Composition => {
            let joint = box_algebra::joint_prob3(
                &v.head(e[0], r[2]),
                &v.tail(e[1], r[2]),
                &v.tail(e[2], r[2]),
                v.mode(),
            )
            .expect("views share dimension and scale");
            (vec![("joint", joint)], joint >= tol)
        }
        Pattern::Hierarchy => {
            let p1 = v.cond(r[0], e[0], e[1]);
            let p2 = v.cond(r[1], e[0], e[1]);
            let joint = v.joint_cond(r[0], r[1], e[0], e[1]);
            let product = p1 * p2;
            let margin = joint - product;
            (
                vec![("margin", margin), ("joint", joint), ("product", product)],
                margin >= -tol && product >= tol,
            )
        }
        Pattern::Intersection => {
            let p3 = v.cond(r[2], e[0], e[1]);
            let joint = v.joint_cond(r[0], r[1], e[0], e[1]);
            let margin = p3 - joint;
            (
                vec![("margin", margin), ("p_r3", p3), ("joint", joint)],
                margin >= -tol && joint >= tol,
            )
        }
        Pattern::MutualExclusion => {
            let both = v.meet(&v.intersection(r[0], e[0], e[1]), &v.intersection(r[1], e[0], e[1]));
            let vol = v.log_vol(&both).exp();
            (vec![("overlap_volume", vol)], vol <= tol)
        }
    };
    Ok(ProbeOutcome {
        instance: inst.clone(),
        values,
        satisfied,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternSummary {
    pub pattern: Pattern,
    pub count: usize,
    pub satisfied: usize,
    pub mean_gap: f64,
}

impl PatternSummary {
    pub fn rate(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.satisfied as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternReport {
    pub tau: Year,
    pub tol: f64,
    pub outcomes: Vec<ProbeOutcome>,
}

impl PatternReport {
    /// One summary per pattern that has at least one instance, in canonical order.
    pub fn summaries(&self) -> Vec<PatternSummary> {
        Pattern::ALL
            .iter()
            .filter_map(|&p| {
                let rows: Vec<&ProbeOutcome> = self.outcomes.iter().filter(|o| o.instance.pattern == p).collect();
                if rows.is_empty() {
                    return None;
                }
                Some(PatternSummary {
                    pattern: p,
                    count: rows.len(),
                    satisfied: rows.iter().filter(|o| o.satisfied).count(),
                    mean_gap: rows.iter().map(|o| o.gap()).sum::<f64>() / rows.len() as f64,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pattern,relations,entities,satisfied,statistic,value\n");
        for o in &self.outcomes {
            let rels: Vec<String> = o.instance.relations.iter().map(|r| r.0.to_string()).collect();
            let ents: Vec<String> = o.instance.entities.iter().map(|e| e.0.to_string()).collect();
            for (name, value) in &o.values {
                s.push_str(&format!(
                    "{},{},{},{},{name},{value}\n",
                    o.instance.pattern,
                    rels.join(";"),
                    ents.join(";"),
                    o.satisfied
                ));
            }
        }
        s
    }
}

impl fmt::Display for PatternReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pattern probe at tau={} (tol {:e})", self.tau, self.tol)?;
        writeln!(f, "{:<18}{:>7}{:>11}{:>7}  {:<15}{:>12}", "pattern", "count", "satisfied", "rate", "statistic", "mean")?;
        for s in self.summaries() {
            writeln!(
                f,
                "{:<18}{:>7}{:>11}{:>7.3}  {:<15}{:>12.4e}",
                s.pattern.name(),
                s.count,
                s.satisfied,
                s.rate(),
                s.pattern.gap_name(),
                s.mean_gap
            )?;
        }
        Ok(())
    }
}

pub fn probe_patterns(
    m: &ModelParams,
    probes: &[ProbeInstance],
    tau: Year,
    tol: f64,
) -> Result<PatternReport, ProbeError> {
    let outcomes = probes
        .iter()
        .map(|p| evaluate_instance(m, p, tau, tol))
        .collect::<Result<_, _>>()?;
    Ok(PatternReport { tau, tol, outcomes })
}

/// A hand-built configuration with the outcome it must produce.
#[derive(Debug, Clone)]
pub struct BuiltinCase {
    pub name: String,
    pub model: ModelParams,
    pub instance: ProbeInstance,
    pub expect_satisfied: bool,
}

const BUILTIN_TAU: Year = 2000;
const BUILTIN_BETA: f64 = 1e-3;

/// 2-D hard-meet model with a zero time basis. Each entity is `[lo, hi] × [0, 1]`;
/// each relation translates along the first axis with unit scale.
fn constructed(score: ScoreMode, entities: &[(f64, f64)], translations: &[f64]) -> ModelParams {
    let d = 2;
    let config = ModelConfig {
        dim: d,
        order: 1,
        beta: BUILTIN_BETA,
        meet: MeetMode::Hard,
        score,
        evolution: EvolutionTarget::Relation,
        normalize_time: true,
        warp: TimeWarp::Linear,
        init: InitRanges::default(),
    };
    let ent: Vec<f64> = entities.iter().flat_map(|&(lo, hi)| [lo, 0.0, hi, 1.0]).collect();
    let rel: Vec<f64> = translations.iter().flat_map(|&t| [t, 0.0, 0.0, 0.0]).collect();
    ModelParams {
        config,
        num_entities: entities.len(),
        num_relations: translations.len(),
        entities: Param::new(ent),
        relations: Param::new(rel),
        time: TimeCodec::new(1, TimeSpan::new(BUILTIN_TAU, BUILTIN_TAU), d, vec![0.0; 2 * d]),
    }
}

fn case(
    pattern: Pattern,
    label: &str,
    expect_satisfied: bool,
    model: ModelParams,
    relations: &[u32],
    entities: &[u32],
) -> BuiltinCase {
    BuiltinCase {
        name: format!("{pattern}/{label}"),
        model,
        instance: ProbeInstance {
            pattern,
            relations: relations.iter().copied().map(RelationId).collect(),
            entities: entities.iter().copied().map(EntityId).collect(),
        },
        expect_satisfied,
    }
}

/// One satisfying configuration and one counterexample per pattern.
pub fn builtin_suite() -> Vec<BuiltinCase> {
    use Pattern::*;
    use ScoreMode::{Head, Shared};
    vec![
        case(Symmetry, "identical boxes", true, constructed(Shared, &[(0.0, 1.0), (0.0, 1.0)], &[0.0]), &[0], &[0, 1]),
        case(Symmetry, "nested boxes", false, constructed(Shared, &[(0.0, 0.5), (0.0, 1.0)], &[0.0]), &[0], &[0, 1]),
        case(Antisymmetry, "one-way shift", true, constructed(Head, &[(0.0, 1.0), (2.0, 3.0)], &[2.0]), &[0], &[0, 1]),
        case(Antisymmetry, "symmetric boxes", false, constructed(Head, &[(0.0, 1.0), (0.0, 1.0)], &[0.0]), &[0], &[0, 1]),
        case(Inversion, "opposite shifts", true, constructed(Head, &[(0.0, 1.0), (2.0, 3.0)], &[2.0, -2.0]), &[0, 1], &[0, 1]),
        case(Inversion, "inverse is identity", false, constructed(Head, &[(0.0, 1.0), (2.0, 3.0)], &[2.0, 0.0]), &[0, 1], &[0, 1]),
        case(
            Composition,
            "shared region",
            true,
            constructed(Shared, &[(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)], &[0.0, 0.0, 0.0]),
            &[0, 1, 2],
            &[0, 1, 2],
        ),
        case(
            Composition,
            "third box disjoint",
            false,
            constructed(Shared, &[(0.0, 1.0), (0.0, 1.0), (5.0, 6.0)], &[0.0, 0.0, 0.0]),
            &[0, 1, 2],
            &[0, 1, 2],
        ),
        case(Hierarchy, "nested boxes", true, constructed(Shared, &[(0.0, 0.5), (0.0, 1.0)], &[0.0, 0.0]), &[0, 1], &[0, 1]),
        case(
            Hierarchy,
            "separated intersections",
            false,
            constructed(Head, &[(0.0, 1.0), (0.0, 4.0)], &[0.0, 2.0]),
            &[0, 1],
            &[0, 1],
        ),
        case(
            Intersection,
            "implied relation covers",
            true,
            constructed(Shared, &[(0.0, 0.5), (0.0, 1.0)], &[0.0, 0.0, 0.0]),
            &[0, 1, 2],
            &[0, 1],
        ),
        case(
            Intersection,
            "implied relation misses",
            false,
            constructed(Head, &[(0.0, 0.5), (0.0, 1.0)], &[0.0, 0.0, 5.0]),
            &[0, 1, 2],
            &[0, 1],
        ),
        case(
            MutualExclusion,
            "disjoint intersections",
            true,
            constructed(Head, &[(0.0, 1.0), (0.0, 4.0)], &[0.0, 2.0]),
            &[0, 1],
            &[0, 1],
        ),
        case(
            MutualExclusion,
            "shared intersection",
            false,
            constructed(Head, &[(0.0, 1.0), (0.0, 4.0)], &[0.0, 0.0]),
            &[0, 1],
            &[0, 1],
        ),
    ]
}

/// Runs every built-in case; returns each case with its outcome.
pub fn run_builtin_suite(tol: f64) -> Vec<(BuiltinCase, ProbeOutcome)> {
    builtin_suite()
        .into_iter()
        .map(|c| {
            let out = evaluate_instance(&c.model, &c.instance, BUILTIN_TAU, tol)
                .expect("built-in cases are well-formed");
            (c, out)
        })
        .collect()
}

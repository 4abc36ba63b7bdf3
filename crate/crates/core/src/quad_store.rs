//! Temporal fact loading: TSV parsing, vocabularies, interval expansion,
//! negative sampling and filtered candidate sets.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use thiserror::Error;

use crate::time_codec::TimeSpan;

pub type Year = i32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected at least 5 tab-separated fields, found {found}")]
    Malformed { path: PathBuf, line: usize, found: usize },
    #[error("{path}:{line}: empty {field}")]
    EmptyField {
        path: PathBuf,
        line: usize,
        field: &'static str,
    },
    #[error("{path}:{line}: cannot parse date `{text}`")]
    Date { path: PathBuf, line: usize, text: String },
    #[error("no facts to build a vocabulary from")]
    Empty,
    #[error("no split file `{0}` (.txt or .tsv) in dataset directory")]
    MissingSplit(PathBuf),
}

/// One endpoint of a validity interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DateBound {
    Year(Year),
    /// `####-##-##`, or a year with wildcard digits.
    Open,
}

impl DateBound {
    pub fn year(self) -> Option<Year> {
        match self {
            DateBound::Year(y) => Some(y),
            DateBound::Open => None,
        }
    }
}

impl fmt::Display for DateBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DateBound::Year(y) => write!(f, "{y}"),
            DateBound::Open => write!(f, "-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFact {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub since: DateBound,
    pub until: DateBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadruple {
    pub h: EntityId,
    pub r: RelationId,
    pub t: EntityId,
    pub tau: Year,
}

impl Quadruple {
    pub fn new(h: u32, r: u32, t: u32, tau: Year) -> Self {
        Self {
            h: EntityId(h),
            r: RelationId(r),
            t: EntityId(t),
            tau,
        }
    }
}

/// Input file layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// `head \t relation \t tail \t since \t until`, extra columns ignored.
    Tsv5,
}

/// Parses a `[-]YYYY[-MM[-DD]]` date with `#` wildcards down to year granularity.
pub fn parse_date(text: &str) -> Option<DateBound> {
    let text = text.trim();
    let (negative, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let mut parts = body.split('-');
    let year = parts.next()?;
    if year.is_empty() || !year.chars().all(|c| c.is_ascii_digit() || c == '#') {
        return None;
    }
    for part in parts {
        if part.is_empty() || !part.chars().all(|c| c.is_ascii_digit() || c == '#') {
            return None;
        }
    }
    if year.contains('#') {
        return Some(DateBound::Open);
    }
    let y: Year = year.parse().ok()?;
    Some(DateBound::Year(if negative { -y } else { y }))
}

pub fn parse_dataset(path: &Path, fmt: DataFormat) -> Result<Vec<RawFact>, DataError> {
    let DataFormat::Tsv5 = fmt;
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut facts = Vec::new();
    let mut swapped = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                found: fields.len(),
            });
        }
        let names = ["head", "relation", "tail"];
        for (field, name) in fields.iter().zip(names) {
            if field.trim().is_empty() {
                return Err(DataError::EmptyField {
                    path: path.to_path_buf(),
                    line: line_no,
                    field: name,
                });
            }
        }
        let date = |text: &str| {
            parse_date(text).ok_or_else(|| DataError::Date {
                path: path.to_path_buf(),
                line: line_no,
                text: text.to_string(),
            })
        };
        let mut since = date(fields[3])?;
        let mut until = date(fields[4])?;
        if let (DateBound::Year(s), DateBound::Year(u)) = (since, until) {
            if s > u {
                std::mem::swap(&mut since, &mut until);
                swapped += 1;
            }
        }
        facts.push(RawFact {
            head: fields[0].trim().to_string(),
            relation: fields[1].trim().to_string(),
            tail: fields[2].trim().to_string(),
            since,
            until,
        });
    }
    if swapped > 0 {
        warn!("{}: {swapped} facts had since > until; endpoints swapped", path.display());
    }
    Ok(facts)
}

#[derive(Debug, Clone, Default)]
struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    entities: Interner,
    relations: Interner,
    pub time_span: TimeSpan,
}

impl Vocab {
    pub fn num_entities(&self) -> usize {
        self.entities.names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.names.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.ids.get(name).copied().map(EntityId)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.ids.get(name).copied().map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities.names[id.index()]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations.names[id.index()]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities.names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations.names
    }
}

/// Ids by first appearance over the splits in the given order; span over every closed endpoint.
pub fn build_vocab(splits: &[&[RawFact]]) -> Result<Vocab, DataError> {
    let mut entities = Interner::default();
    let mut relations = Interner::default();
    let mut span: Option<(Year, Year)> = None;
    for fact in splits.iter().flat_map(|s| s.iter()) {
        entities.intern(&fact.head);
        relations.intern(&fact.relation);
        entities.intern(&fact.tail);
        for y in [fact.since.year(), fact.until.year()].into_iter().flatten() {
            span = Some(match span {
                None => (y, y),
                Some((lo, hi)) => (lo.min(y), hi.max(y)),
            });
        }
    }
    if entities.names.is_empty() {
        return Err(DataError::Empty);
    }
    let (lo, hi) = span.ok_or(DataError::Empty)?;
    Ok(Vocab {
        entities,
        relations,
        time_span: TimeSpan::new(lo, hi),
    })
}

/// Id-coded fact with its validity interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntervalFact {
    pub h: EntityId,
    pub r: RelationId,
    pub t: EntityId,
    pub since: Option<Year>,
    pub until: Option<Year>,
}

impl IntervalFact {
    pub fn encode(fact: &RawFact, vocab: &Vocab) -> Option<Self> {
        Some(Self {
            h: vocab.entity_id(&fact.head)?,
            r: vocab.relation_id(&fact.relation)?,
            t: vocab.entity_id(&fact.tail)?,
            since: fact.since.year(),
            until: fact.until.year(),
        })
    }

    /// Years at which this fact is instantiated.
    pub fn years(&self, granularity: u32, cap: usize) -> Vec<Year> {
        assert!(granularity >= 1, "granularity must be >= 1");
        match (self.since, self.until) {
            (None, None) => Vec::new(),
            (Some(y), None) | (None, Some(y)) => vec![y],
            (Some(s), Some(u)) => interval_years(s, u, granularity, cap),
        }
    }

    pub fn at(&self, tau: Year) -> Quadruple {
        Quadruple {
            h: self.h,
            r: self.r,
            t: self.t,
            tau,
        }
    }
}

fn interval_years(s: Year, u: Year, granularity: u32, cap: usize) -> Vec<Year> {
    let (s64, u64_) = (i64::from(s), i64::from(u));
    let g = i64::from(granularity);
    let n = ((u64_ - s64 + 1) + g - 1) / g;
    let n = n.max(1) as usize;
    if cap == 0 {
        return Vec::new();
    }
    if n <= cap {
        let mut years: Vec<Year> = (0..n).map(|i| (s64 + i as i64 * g) as Year).collect();
        if n >= 2 {
            *years.last_mut().unwrap() = u;
        }
        return years;
    }
    if cap == 1 {
        return vec![s];
    }
    let width = (u64_ - s64) as f64;
    (0..cap)
        .map(|i| s + (i as f64 * width / (cap - 1) as f64).round() as Year)
        .collect()
}

/// Expands one fact into quadruples at year steps of `granularity`, at most `cap` of them.
///
/// Closed intervals always keep both endpoints; an open endpoint yields one quadruple
/// at the known end; facts with no known endpoint (or unknown names) yield nothing.
pub fn expand_interval(fact: &RawFact, vocab: &Vocab, granularity: u32, cap: usize) -> Vec<Quadruple> {
    match IntervalFact::encode(fact, vocab) {
        Some(f) => f.years(granularity, cap).into_iter().map(|y| f.at(y)).collect(),
        None => Vec::new(),
    }
}

/// Every known quadruple, plus per-query indexes for filtering.
#[derive(Debug, Clone, Default)]
pub struct SeenIndex {
    all: HashSet<Quadruple>,
    tails: HashMap<(EntityId, RelationId, Year), Vec<EntityId>>,
    heads: HashMap<(RelationId, EntityId, Year), Vec<EntityId>>,
}

impl SeenIndex {
    pub fn new<'a>(quads: impl IntoIterator<Item = &'a Quadruple>) -> Self {
        let mut index = Self::default();
        for q in quads {
            index.insert(*q);
        }
        index
    }

    pub fn insert(&mut self, q: Quadruple) {
        if self.all.insert(q) {
            self.tails.entry((q.h, q.r, q.tau)).or_default().push(q.t);
            self.heads.entry((q.r, q.t, q.tau)).or_default().push(q.h);
        }
    }

    pub fn contains(&self, q: &Quadruple) -> bool {
        self.all.contains(q)
    }

    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    pub fn true_tails(&self, h: EntityId, r: RelationId, tau: Year) -> &[EntityId] {
        self.tails.get(&(h, r, tau)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn true_heads(&self, r: RelationId, t: EntityId, tau: Year) -> &[EntityId] {
        self.heads.get(&(r, t, tau)).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corrupt {
    Head,
    Tail,
}

const NEGATIVE_RETRIES: usize = 16;

/// Replaces the head or tail of `q` with a different uniformly drawn entity, rejecting
/// known quadruples for a bounded number of draws before accepting the last one.
pub fn negative_sample<R: Rng + ?Sized>(
    q: &Quadruple,
    num_entities: usize,
    mode: Corrupt,
    rng: &mut R,
    seen: &SeenIndex,
) -> Quadruple {
    assert!(num_entities >= 2, "negative sampling needs at least two entities");
    let original = match mode {
        Corrupt::Head => q.h,
        Corrupt::Tail => q.t,
    };
    let mut candidate = *q;
    for _ in 0..NEGATIVE_RETRIES {
        let mut e = rng.gen_range(0..num_entities as u32 - 1);
        if e >= original.0 {
            e += 1;
        }
        match mode {
            Corrupt::Head => candidate.h = EntityId(e),
            Corrupt::Tail => candidate.t = EntityId(e),
        }
        if !seen.contains(&candidate) {
            break;
        }
    }
    candidate
}

/// Which slot of a quadruple a ranking query asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Head,
    Tail,
}

/// `(?, r, t, τ)` or `(h, r, ?, τ)` with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityQuery {
    pub slot: Slot,
    pub fact: Quadruple,
}

impl EntityQuery {
    pub fn head(fact: Quadruple) -> Self {
        Self { slot: Slot::Head, fact }
    }

    pub fn tail(fact: Quadruple) -> Self {
        Self { slot: Slot::Tail, fact }
    }

    pub fn truth(&self) -> EntityId {
        match self.slot {
            Slot::Head => self.fact.h,
            Slot::Tail => self.fact.t,
        }
    }

    /// The query's fact with the asked-for slot set to `e`.
    pub fn with(&self, e: EntityId) -> Quadruple {
        let mut q = self.fact;
        match self.slot {
            Slot::Head => q.h = e,
            Slot::Tail => q.t = e,
        }
        q
    }
}

/// All entities except other known answers for the same query at the same time.
pub fn filtered_candidates(query: &EntityQuery, seen: &SeenIndex, num_entities: usize) -> Vec<EntityId> {
    let q = query.fact;
    let truth = query.truth();
    let known = match query.slot {
        Slot::Head => seen.true_heads(q.r, q.t, q.tau),
        Slot::Tail => seen.true_tails(q.h, q.r, q.tau),
    };
    let mut excluded = vec![false; num_entities];
    for e in known {
        if *e != truth {
            excluded[e.index()] = true;
        }
    }
    (0..num_entities as u32)
        .map(EntityId)
        .filter(|e| !excluded[e.index()])
        .collect()
}

/// How train interval facts become training points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalMode {
    /// Fixed expansion into year-step quadruples.
    Expand,
    /// One year drawn per fact per epoch from the expansion grid.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataOptions {
    pub granularity: u32,
    pub interval_cap: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            granularity: 1,
            interval_cap: 20,
        }
    }
}

/// Counts recorded while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub raw: usize,
    pub expanded: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub train_facts: Vec<IntervalFact>,
    pub seen: SeenIndex,
    pub counts: [SplitCounts; 3],
    pub options: DataOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

fn split_file(dir: &Path, name: &str) -> Result<PathBuf, DataError> {
    for ext in ["txt", "tsv"] {
        let p = dir.join(format!("{name}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(DataError::MissingSplit(dir.join(name)))
}

impl Dataset {
    /// Reads `train`, `valid` and `test` (`.txt` or `.tsv`) from `dir`.
    pub fn load(dir: &Path, options: DataOptions) -> Result<Self, DataError> {
        let mut raw = Vec::with_capacity(3);
        for name in ["train", "valid", "test"] {
            raw.push(parse_dataset(&split_file(dir, name)?, DataFormat::Tsv5)?);
        }
        let test = raw.pop().unwrap();
        let valid = raw.pop().unwrap();
        let train = raw.pop().unwrap();
        Self::from_raw(&train, &valid, &test, options)
    }

    pub fn from_raw(
        train: &[RawFact],
        valid: &[RawFact],
        test: &[RawFact],
        options: DataOptions,
    ) -> Result<Self, DataError> {
        let vocab = build_vocab(&[train, valid, test])?;
        let mut counts = [SplitCounts::default(); 3];
        let expand = |facts: &[RawFact], c: &mut SplitCounts| {
            c.raw = facts.len();
            let mut out = Vec::new();
            for f in facts {
                let q = expand_interval(f, &vocab, options.granularity, options.interval_cap);
                if q.is_empty() {
                    c.dropped += 1;
                }
                out.extend(q);
            }
            c.expanded = out.len();
            out
        };
        let train_q = expand(train, &mut counts[0]);
        let valid_q = expand(valid, &mut counts[1]);
        let test_q = expand(test, &mut counts[2]);
        let dropped: usize = counts.iter().map(|c| c.dropped).sum();
        if dropped > 0 {
            warn!("dropped {dropped} facts without a usable date");
        }
        let train_facts = train
            .iter()
            .filter_map(|f| IntervalFact::encode(f, &vocab))
            .filter(|f| f.since.is_some() || f.until.is_some())
            .collect();
        let seen = SeenIndex::new(train_q.iter().chain(&valid_q).chain(&test_q));
        info!(
            "dataset: {} entities, {} relations, span {}..{}, quads {}/{}/{}",
            vocab.num_entities(),
            vocab.num_relations(),
            vocab.time_span.min,
            vocab.time_span.max,
            train_q.len(),
            valid_q.len(),
            test_q.len()
        );
        Ok(Self {
            vocab,
            train: train_q,
            valid: valid_q,
            test: test_q,
            train_facts,
            seen,
            counts,
            options,
        })
    }

    pub fn split(&self, split: Split) -> &[Quadruple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Training points for one epoch.
    pub fn epoch_positives<R: Rng + ?Sized>(&self, mode: IntervalMode, rng: &mut R) -> Vec<Quadruple> {
        match mode {
            IntervalMode::Expand => self.train.clone(),
            IntervalMode::Sample => self
                .train_facts
                .iter()
                .map(|f| {
                    let years = f.years(self.options.granularity, usize::MAX);
                    f.at(years[rng.gen_range(0..years.len())])
                })
                .collect(),
        }
    }
}

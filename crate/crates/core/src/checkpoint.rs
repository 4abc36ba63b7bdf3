//! Binary checkpoint format and its plain-text sidecar.
//!
//! Layout, all little-endian:
//! `"PTBX"`, version `u16`, dims `|E| |R| K d` as `u64`, config flags
//! (meet, score, evolution, normalize as `u8`; warp hidden size `u32`, 0 for linear;
//! beta `f64`), then tagged sections `ENT`, `REL`, `TIME` (order `u64`, span as two
//! `i32`, then the basis matrix) and, with a warp MLP, `WARP`. Each section is a
//! 4-byte tag followed by a `u64` float count and the floats.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::box_algebra::MeetMode;
use crate::grad::Param;
use crate::model::{EvolutionTarget, InitRanges, ModelConfig, ModelParams, ScoreMode};
use crate::quad_store::Vocab;
use crate::time_codec::{TimeCodec, TimeSpan, TimeWarp};

pub const MAGIC: &[u8; 4] = b"PTBX";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("expected section {expected:?}, found {found:?}")]
    Section { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
}

/// Everything before the tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u16,
    pub num_entities: usize,
    pub num_relations: usize,
    pub rows: usize,
    pub dim: usize,
    pub meet: MeetMode,
    pub score: ScoreMode,
    pub evolution: EvolutionTarget,
    pub normalize_time: bool,
    pub warp: TimeWarp,
    pub beta: f64,
}

fn meet_code(m: MeetMode) -> u8 {
    match m {
        MeetMode::Gumbel => 0,
        MeetMode::Hard => 1,
    }
}

fn score_code(s: ScoreMode) -> u8 {
    match s {
        ScoreMode::Shared => 0,
        ScoreMode::Head => 1,
    }
}

fn evolution_code(e: EvolutionTarget) -> u8 {
    match e {
        EvolutionTarget::Entity => 0,
        EvolutionTarget::Relation => 1,
        EvolutionTarget::Both => 2,
    }
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], values: &[f64]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(m: &ModelParams) -> Vec<u8> {
    let c = &m.config;
    let mut out = Vec::with_capacity(64 + 8 * m.trainable_scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for n in [m.num_entities, m.num_relations, m.time.rows(), c.dim] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.extend_from_slice(&[
        meet_code(c.meet),
        score_code(c.score),
        evolution_code(c.evolution),
        u8::from(c.normalize_time),
    ]);
    let hidden = match c.warp {
        TimeWarp::Linear => 0u32,
        TimeWarp::Mlp { hidden } => hidden as u32,
    };
    out.extend_from_slice(&hidden.to_le_bytes());
    out.extend_from_slice(&c.beta.to_le_bytes());
    put_section(&mut out, b"ENT\0", &m.entities.values);
    put_section(&mut out, b"REL\0", &m.relations.values);
    out.extend_from_slice(b"TIME");
    out.extend_from_slice(&(m.time.basis.len() as u64).to_le_bytes());
    out.extend_from_slice(&(m.time.order as u64).to_le_bytes());
    out.extend_from_slice(&m.time.span.min.to_le_bytes());
    out.extend_from_slice(&m.time.span.max.to_le_bytes());
    for v in &m.time.basis.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if hidden > 0 {
        put_section(&mut out, b"WARP", &m.time.warp_params.values);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Corrupt("size overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(self.pos))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn tag(&mut self, expected: &[u8; 4]) -> Result<(), CheckpointError> {
        let found = self.array::<4>()?;
        if &found != expected {
            return Err(CheckpointError::Section {
                expected: String::from_utf8_lossy(expected).trim_end_matches('\0').to_string(),
                found: String::from_utf8_lossy(&found).trim_end_matches('\0').to_string(),
            });
        }
        Ok(())
    }

    fn section(&mut self, tag: &[u8; 4], len: usize) -> Result<Vec<f64>, CheckpointError> {
        self.tag(tag)?;
        let n = self.usize()?;
        if n != len {
            return Err(CheckpointError::Corrupt(format!(
                "section {} holds {n} floats, expected {len}",
                String::from_utf8_lossy(tag).trim_end_matches('\0')
            )));
        }
        self.f64s(n)
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<Header, CheckpointError> {
    let magic = r.array::<4>()?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let (num_entities, num_relations, rows, dim) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let [meet, score, evolution, normalize] = r.array::<4>()?;
    let hidden = u32::from_le_bytes(r.array()?);
    let beta = f64::from_le_bytes(r.array()?);
    let corrupt = |what: &str, v: u8| CheckpointError::Corrupt(format!("bad {what} flag {v}"));
    Ok(Header {
        version,
        num_entities,
        num_relations,
        rows,
        dim,
        meet: match meet {
            0 => MeetMode::Gumbel,
            1 => MeetMode::Hard,
            v => return Err(corrupt("meet", v)),
        },
        score: match score {
            0 => ScoreMode::Shared,
            1 => ScoreMode::Head,
            v => return Err(corrupt("score", v)),
        },
        evolution: match evolution {
            0 => EvolutionTarget::Entity,
            1 => EvolutionTarget::Relation,
            2 => EvolutionTarget::Both,
            v => return Err(corrupt("evolution", v)),
        },
        normalize_time: match normalize {
            0 => false,
            1 => true,
            v => return Err(corrupt("normalize", v)),
        },
        warp: if hidden == 0 {
            TimeWarp::Linear
        } else {
            TimeWarp::Mlp {
                hidden: hidden as usize,
            }
        },
        beta,
    })
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    read_header(&mut Reader { bytes, pos: 0 })
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let h = read_header(&mut r)?;
    if h.rows < 2 || h.dim == 0 || h.num_entities == 0 || h.num_relations == 0 {
        return Err(CheckpointError::Corrupt("empty dimensions".into()));
    }
    if !(h.beta > 0.0) {
        return Err(CheckpointError::Corrupt(format!("beta {}", h.beta)));
    }
    let size = |a: usize, b: usize| {
        a.checked_mul(b)
            .and_then(|x| x.checked_mul(2))
            .ok_or_else(|| CheckpointError::Corrupt("dimensions overflow".into()))
    };
    let entities = r.section(b"ENT\0", size(h.num_entities, h.dim)?)?;
    let relations = r.section(b"REL\0", size(h.num_relations, h.dim)?)?;
    r.tag(b"TIME")?;
    let n = r.usize()?;
    if n != h.rows * h.dim {
        return Err(CheckpointError::Corrupt(format!("TIME holds {n} floats, expected {}", h.rows * h.dim)));
    }
    let order = r.usize()?;
    if order + 1 != h.rows {
        return Err(CheckpointError::Corrupt(format!("order {order} does not match {} rows", h.rows)));
    }
    let min = i32::from_le_bytes(r.array()?);
    let max = i32::from_le_bytes(r.array()?);
    if min > max {
        return Err(CheckpointError::Corrupt(format!("time span {min}..{max}")));
    }
    let basis = r.f64s(n)?;
    let warp_params = match h.warp {
        TimeWarp::Linear => Vec::new(),
        w => r.section(b"WARP", w.param_len())?,
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let config = ModelConfig {
        dim: h.dim,
        order,
        beta: h.beta,
        meet: h.meet,
        score: h.score,
        evolution: h.evolution,
        normalize_time: h.normalize_time,
        warp: h.warp,
        init: InitRanges::default(),
    };
    Ok(ModelParams {
        config,
        num_entities: h.num_entities,
        num_relations: h.num_relations,
        entities: Param::new(entities),
        relations: Param::new(relations),
        time: TimeCodec::new(order, TimeSpan::new(min, max), h.dim, basis).with_warp(h.warp, warp_params),
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_checkpoint(path: &Path, m: &ModelParams) -> Result<(), CheckpointError> {
    fs::write(path, encode(m)).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

pub fn read_checkpoint_header(path: &Path) -> Result<Header, CheckpointError> {
    decode_header(&fs::read(path).map_err(io_err(path))?)
}

/// `path` with `.meta` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn sha256_lines<'a>(items: impl IntoIterator<Item = &'a String>) -> String {
    let mut h = Sha256::new();
    for s in items {
        h.update(s.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Hashes of the entity and relation vocabularies, in id order.
pub fn vocab_hashes(vocab: &Vocab) -> (String, String) {
    (sha256_lines(vocab.entity_names()), sha256_lines(vocab.relation_names()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sidecar {
    pub entities_sha256: String,
    pub relations_sha256: String,
    pub checkpoint_sha256: String,
    /// Full resolved run configuration.
    pub config: String,
}

const CONFIG_MARKER: &str = "# resolved configuration";

impl Sidecar {
    pub fn new(vocab: &Vocab, checkpoint_bytes: &[u8], config: String) -> Self {
        let (entities_sha256, relations_sha256) = vocab_hashes(vocab);
        Self {
            entities_sha256,
            relations_sha256,
            checkpoint_sha256: hex::encode(Sha256::digest(checkpoint_bytes)),
            config,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "format = ptbx/{VERSION}\nentities_sha256 = {}\nrelations_sha256 = {}\ncheckpoint_sha256 = {}\n{CONFIG_MARKER}\n{}",
            self.entities_sha256, self.relations_sha256, self.checkpoint_sha256, self.config
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CheckpointError> {
        let err = |reason: String| CheckpointError::Sidecar {
            path: path.to_path_buf(),
            reason,
        };
        let (head, config) = text
            .split_once(&format!("{CONFIG_MARKER}\n"))
            .ok_or_else(|| err("missing configuration block".into()))?;
        let mut fields = std::collections::HashMap::new();
        for line in head.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("malformed line {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut get = |k: &str| fields.remove(k).ok_or_else(|| err(format!("missing {k}")));
        Ok(Self {
            entities_sha256: get("entities_sha256")?,
            relations_sha256: get("relations_sha256")?,
            checkpoint_sha256: get("checkpoint_sha256")?,
            config: config.to_string(),
        })
    }

    pub fn matches_vocab(&self, vocab: &Vocab) -> bool {
        let (e, r) = vocab_hashes(vocab);
        e == self.entities_sha256 && r == self.relations_sha256
    }
}

/// Writes `path` and its sidecar.
pub fn save(path: &Path, m: &ModelParams, vocab: &Vocab, config: String) -> Result<(), CheckpointError> {
    let bytes = encode(m);
    fs::write(path, &bytes).map_err(io_err(path))?;
    let meta = sidecar_path(path);
    fs::write(&meta, Sidecar::new(vocab, &bytes, config).to_text()).map_err(io_err(&meta))
}

/// Reads a checkpoint and its sidecar, checking the payload hash.
pub fn load(path: &Path) -> Result<(ModelParams, Sidecar), CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let model = decode(&bytes)?;
    let meta = sidecar_path(path);
    let text = fs::read_to_string(&meta).map_err(io_err(&meta))?;
    let sidecar = Sidecar::parse(&text, &meta)?;
    if hex::encode(Sha256::digest(&bytes)) != sidecar.checkpoint_sha256 {
        return Err(CheckpointError::Sidecar {
            path: meta,
            reason: "checkpoint hash mismatch".into(),
        });
    }
    Ok((model, sidecar))
}

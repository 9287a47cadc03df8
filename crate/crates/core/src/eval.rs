//! Ranking evaluation: raw and filtered ranks, Hits@k and mean rank.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::data::{build_reason_template, EntityId, MultimodalKG, RelationId, Triple, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::FusedModel;
use crate::tensor::ParamStore;

/// Known true tails per `(head, relation)` and heads per `(relation, tail)`
/// over every split of a dataset.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
    heads: HashMap<(RelationId, EntityId), HashSet<EntityId>>,
}

impl FilterIndex {
    pub fn new<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut index = FilterIndex::default();
        for t in triples {
            index.insert(*t);
        }
        index
    }

    pub fn from_mkg(mkg: &MultimodalKG) -> Self {
        FilterIndex::new(mkg.train.iter().chain(&mkg.dev).chain(&mkg.test))
    }

    pub fn insert(&mut self, t: Triple) {
        self.tails.entry((t.head, t.relation)).or_default().insert(t.tail);
        self.heads.entry((t.relation, t.tail)).or_default().insert(t.head);
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tails
            .get(&(t.head, t.relation))
            .is_some_and(|s| s.contains(&t.tail))
    }

    pub fn known_tails(&self, h: EntityId, r: RelationId) -> Option<&HashSet<EntityId>> {
        self.tails.get(&(h, r))
    }

    pub fn known_heads(&self, r: RelationId, t: EntityId) -> Option<&HashSet<EntityId>> {
        self.heads.get(&(r, t))
    }
}

/// `1 + #{e ≠ target, e ∉ filter : score(e) ≥ score(target)}`.
///
/// Ties count against the target. The target itself is never filtered out.
pub fn rank_entities(scores: &[f64], target: EntityId, filter: Option<&HashSet<EntityId>>) -> usize {
    let s = scores[target.0];
    let mut rank = 1;
    for (e, &v) in scores.iter().enumerate() {
        if e == target.0 || v < s {
            continue;
        }
        if filter.is_some_and(|f| f.contains(&EntityId(e))) {
            continue;
        }
        rank += 1;
    }
    rank
}

pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Undefined("Hits@k of an empty rank list"));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Undefined("mean rank of an empty rank list"));
    }
    let total: f64 = ranks.iter().map(|&r| r as f64).sum();
    Ok(total / ranks.len() as f64)
}

/// Which side of a triple is being predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Tail,
    Head,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Tail => "tail",
            Direction::Head => "head",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankRecord {
    pub triple: Triple,
    pub direction: Direction,
    pub raw: usize,
    pub filtered: usize,
}

impl RankRecord {
    /// Ranks `triple` from a full score vector over candidate entities.
    pub fn from_scores(triple: Triple, direction: Direction, scores: &[f64], filter: &FilterIndex) -> Self {
        let (target, known) = match direction {
            Direction::Tail => (triple.tail, filter.known_tails(triple.head, triple.relation)),
            Direction::Head => (triple.head, filter.known_heads(triple.relation, triple.tail)),
        };
        RankRecord {
            triple,
            direction,
            raw: rank_entities(scores, target, None),
            filtered: rank_entities(scores, target, known),
        }
    }
}

/// MR and Hits@{1,3,10} for one ranking setting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mean_rank: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Metrics {
            mean_rank: mean_rank(ranks)?,
            hits1: hits_at_k(ranks, 1)?,
            hits3: hits_at_k(ranks, 3)?,
            hits10: hits_at_k(ranks, 10)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub raw: Metrics,
    pub filtered: Metrics,
    pub records: Vec<RankRecord>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_records(records: Vec<RankRecord>, config_hash: impl Into<String>, seed: u64) -> Result<Self> {
        let raw: Vec<usize> = records.iter().map(|r| r.raw).collect();
        let filtered: Vec<usize> = records.iter().map(|r| r.filtered).collect();
        Ok(EvalReport {
            raw: Metrics::from_ranks(&raw)?,
            filtered: Metrics::from_ranks(&filtered)?,
            records,
            config_hash: config_hash.into(),
            seed,
        })
    }

    /// Human-readable summary; the filtered setting comes first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "queries      {}", self.records.len()).unwrap();
        writeln!(out, "config_hash  {}", self.config_hash).unwrap();
        writeln!(out, "seed         {}", self.seed).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "setting    MR        Hits@1   Hits@3   Hits@10").unwrap();
        for (name, m) in [("filtered", &self.filtered), ("raw", &self.raw)] {
            writeln!(
                out,
                "{name:<10} {:<9.3} {:<8.4} {:<8.4} {:.4}",
                m.mean_rank, m.hits1, m.hits3, m.hits10
            )
            .unwrap();
        }
        out
    }

    /// `key = value` lines with full-precision floats.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "queries = {}", self.records.len()).unwrap();
        writeln!(out, "config_hash = {}", self.config_hash).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        for (name, m) in [("filtered", &self.filtered), ("raw", &self.raw)] {
            writeln!(out, "{name}.mr = {}", m.mean_rank).unwrap();
            writeln!(out, "{name}.hits1 = {}", m.hits1).unwrap();
            writeln!(out, "{name}.hits3 = {}", m.hits3).unwrap();
            writeln!(out, "{name}.hits10 = {}", m.hits10).unwrap();
        }
        out
    }

    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("head,relation,tail,direction,raw_rank,filtered_rank\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.triple.head.0,
                r.triple.relation.0,
                r.triple.tail.0,
                r.direction.name(),
                r.raw,
                r.filtered
            )
            .unwrap();
        }
        out
    }
}

/// Tail-prediction report from any scorer returning one score per entity.
pub fn evaluate_with(
    triples: &[Triple],
    filter: &FilterIndex,
    config_hash: &str,
    seed: u64,
    mut scorer: impl FnMut(&Triple) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(triples.len());
    for t in triples {
        let scores = scorer(t)?;
        if scores.len() <= t.tail.0 {
            return Err(Error::dim("evaluate", &[scores.len()], &[t.tail.0 + 1]));
        }
        records.push(RankRecord::from_scores(*t, Direction::Tail, &scores, filter));
    }
    EvalReport::from_records(records, config_hash, seed)
}

/// Masks the tail of every triple in a reasoning template and ranks all
/// entities by the model's logits.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &FusedModel,
    store: &ParamStore,
    mkg: &MultimodalKG,
    vocab: &Vocabulary,
    triples: &[Triple],
    filter: &FilterIndex,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(triples, filter, config_hash, seed, |t| {
        let query = build_reason_template(t.head, t.relation, None, mkg, vocab)?;
        Ok(model.logits(store, &query, mkg)?.into_data())
    })
}

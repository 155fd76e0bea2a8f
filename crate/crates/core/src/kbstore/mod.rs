//! The knowledge base as a replayable record log.
//!
//! Every state change is a [`Record`]; [`KnowledgeBase::apply`] checks the
//! record against the current state and folds it in. Loading a log is the
//! same fold, so a replayed KB equals the live one by construction.

mod rdf;
mod record;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allpairs::{ProfileStamp, Side};
use crate::ontology::{Cardinality, Ontology};

pub use rdf::{export_rdf, instance_iri, RdfError, RDFS_LABEL, RDF_TYPE};
pub use record::{format_time, Dequeue, IterationRecord, Record, TrustedPattern, LOG_VERSION};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("`{predicate}` takes {expected} argument(s), got {got}")]
    Arity {
        predicate: String,
        expected: usize,
        got: usize,
    },
    #[error("no promoted assertion or queued candidate for {0}")]
    UnknownTarget(FactKey),
    #[error("{0} is a seed; seeds cannot be judged")]
    SeedVerdict(FactKey),
    #[error("{key} has status {status} and cannot be judged again")]
    NotEligible { key: FactKey, status: Status },
    #[error("{0} is blacklisted")]
    Blacklisted(FactKey),
    #[error("{0} is already asserted")]
    Duplicate(FactKey),
    #[error("{key} violates a constraint: {violation}")]
    Constraint { key: FactKey, violation: Violation },
    #[error("{0} is not queued")]
    NotQueued(FactKey),
    #[error("pattern {pattern} is already trusted for `{predicate}`")]
    AlreadyTrusted { predicate: String, pattern: PatternKey },
    #[error("knowledge base is bound to profile {bound}, table was built with {found}")]
    ProfileMismatch { bound: ProfileStamp, found: ProfileStamp },
    #[error("record out of order: {0}")]
    Order(String),
    #[error("unsupported log version {found} (expected {LOG_VERSION})")]
    Version { found: u32 },
    #[error("record {index}: {message}")]
    Corrupt { index: usize, message: String },
    #[error("record {index}: {source}")]
    Replay {
        index: usize,
        #[source]
        source: Box<KbError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// One or two NE surfaces, by predicate arity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Args {
    One(String),
    Two(String, String),
}

impl Args {
    pub fn parts(&self) -> Vec<&str> {
        match self {
            Args::One(a) => vec![a],
            Args::Two(a, b) => vec![a, b],
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Args::One(_) => 1,
            Args::Two(..) => 2,
        }
    }

    pub fn from_parts(parts: Vec<String>) -> Result<Self, String> {
        let mut it = parts.into_iter();
        match (it.next(), it.next(), it.next()) {
            (Some(a), None, None) => Ok(Args::One(a)),
            (Some(a), Some(b), None) => Ok(Args::Two(a, b)),
            _ => Err("expected one or two arguments".into()),
        }
    }

    /// Substitutes `X` (and `Y`) in a human format template.
    pub fn render(&self, template: &str) -> String {
        let (x, y) = match self {
            Args::One(a) => (a.as_str(), None),
            Args::Two(a, b) => (a.as_str(), Some(b.as_str())),
        };
        let mut out = String::with_capacity(template.len() + 16);
        for c in template.chars() {
            match (c, y) {
                ('X', _) => out.push_str(x),
                ('Y', Some(y)) => out.push_str(y),
                _ => out.push(c),
            }
        }
        out
    }
}

impl fmt::Display for Args {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Args::One(a) => f.write_str(a),
            Args::Two(a, b) => write!(f, "{a},{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactKey {
    pub predicate: String,
    pub args: Args,
}

impl FactKey {
    pub fn new(predicate: impl Into<String>, args: Args) -> Self {
        FactKey {
            predicate: predicate.into(),
            args,
        }
    }

    pub fn category(predicate: &str, ne: &str) -> Self {
        FactKey::new(predicate, Args::One(ne.to_string()))
    }

    pub fn relation(predicate: &str, ne1: &str, ne2: &str) -> Self {
        FactKey::new(predicate, Args::Two(ne1.to_string(), ne2.to_string()))
    }

    /// Stable opaque identifier: 16 hex digits of a SHA-256 over the key.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.predicate.as_bytes());
        for part in self.args.parts() {
            h.update([0u8]);
            h.update(part.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl fmt::Display for FactKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.predicate, self.args)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Status {
    Seed,
    Promoted,
    Approved,
    Rejected,
}

impl Status {
    pub const ALL: [Status; 4] = [Status::Seed, Status::Promoted, Status::Approved, Status::Rejected];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Seed => "seed",
            Status::Promoted => "promoted",
            Status::Approved => "approved",
            Status::Rejected => "rejected",
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        Status::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown status {s:?}"))
    }

    pub fn is_true(self) -> bool {
        !matches!(self, Status::Rejected)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A textual pattern. Category patterns carry the side of the NE they
/// appear on; relation patterns have none.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatternKey {
    pub side: Option<Side>,
    pub tp: String,
}

impl PatternKey {
    pub fn category(side: Side, tp: &str) -> Self {
        PatternKey {
            side: Some(side),
            tp: tp.to_string(),
        }
    }

    pub fn relation(tp: &str) -> Self {
        PatternKey {
            side: None,
            tp: tp.to_string(),
        }
    }
}

impl fmt::Display for PatternKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Some(side) => write!(f, "{side}:{}", self.tp),
            None => f.write_str(&self.tp),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub predicate: String,
    pub args: Args,
    pub status: Status,
    pub score: f64,
    pub iteration: u32,
    pub evidence: Vec<(PatternKey, u64)>,
    pub timestamp: DateTime<Utc>,
}

impl Assertion {
    pub fn key(&self) -> FactKey {
        FactKey::new(self.predicate.clone(), self.args.clone())
    }
}

/// A candidate awaiting supervision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueEntry {
    pub key: FactKey,
    pub score: u32,
    /// Iteration in which the candidate first entered the queue.
    pub queued_at: u32,
    pub evidence: Vec<(PatternKey, u64)>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DequeueReason {
    /// Unreviewed for `queue_ttl_iterations`; the learner may propose it again.
    Expired,
    /// A later promotion or approval made it inadmissible.
    Conflict,
}

impl DequeueReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DequeueReason::Expired => "expired",
            DequeueReason::Conflict => "conflict",
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "expired" => Ok(DequeueReason::Expired),
            "conflict" => Ok(DequeueReason::Conflict),
            _ => Err(format!("unknown dequeue reason {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Approve,
    Reject,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Approve => "approve",
            Decision::Reject => "reject",
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "approve" => Ok(Decision::Approve),
            "reject" => Ok(Decision::Reject),
            _ => Err(format!("unknown decision {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub key: FactKey,
    pub decision: Decision,
    pub supervisor: String,
    pub request_id: Option<String>,
    pub timestamp: DateTime<Utc>,
}

/// Why a fact may not become true.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// The subject is already true in a mutually exclusive predicate.
    Mutex { other: String },
    /// `nr_values=1` and the left argument already has this right value.
    Values { existing: String },
    /// `nr_inverse_values=1` and the right argument already has this left value.
    InverseValues { existing: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Mutex { other } => write!(f, "already true in mutually exclusive `{other}`"),
            Violation::Values { existing } => {
                write!(f, "left argument already has value `{existing}`")
            }
            Violation::InverseValues { existing } => {
                write!(f, "right argument already belongs to `{existing}`")
            }
        }
    }
}

/// Lookup structure over the currently true facts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruthIndex {
    categories_of: BTreeMap<String, BTreeSet<String>>,
    relations_of: BTreeMap<(String, String), BTreeSet<String>>,
    right_of: BTreeMap<(String, String), BTreeSet<String>>,
    left_of: BTreeMap<(String, String), BTreeSet<String>>,
}

impl TruthIndex {
    pub fn insert(&mut self, key: &FactKey) {
        match &key.args {
            Args::One(ne) => {
                self.categories_of
                    .entry(ne.clone())
                    .or_default()
                    .insert(key.predicate.clone());
            }
            Args::Two(a, b) => {
                self.relations_of
                    .entry((a.clone(), b.clone()))
                    .or_default()
                    .insert(key.predicate.clone());
                self.right_of
                    .entry((key.predicate.clone(), a.clone()))
                    .or_default()
                    .insert(b.clone());
                self.left_of
                    .entry((key.predicate.clone(), b.clone()))
                    .or_default()
                    .insert(a.clone());
            }
        }
    }

    pub fn remove(&mut self, key: &FactKey) {
        fn drop_from<K: Ord>(map: &mut BTreeMap<K, BTreeSet<String>>, k: K, v: &str) {
            if let Some(set) = map.get_mut(&k) {
                set.remove(v);
                if set.is_empty() {
                    map.remove(&k);
                }
            }
        }
        match &key.args {
            Args::One(ne) => drop_from(&mut self.categories_of, ne.clone(), &key.predicate),
            Args::Two(a, b) => {
                drop_from(&mut self.relations_of, (a.clone(), b.clone()), &key.predicate);
                drop_from(&mut self.right_of, (key.predicate.clone(), a.clone()), b);
                drop_from(&mut self.left_of, (key.predicate.clone(), b.clone()), a);
            }
        }
    }

    pub fn is_true(&self, key: &FactKey) -> bool {
        match &key.args {
            Args::One(ne) => self
                .categories_of
                .get(ne)
                .is_some_and(|s| s.contains(&key.predicate)),
            Args::Two(a, b) => self
                .relations_of
                .get(&(a.clone(), b.clone()))
                .is_some_and(|s| s.contains(&key.predicate)),
        }
    }

    /// Categories in which `ne` is currently true.
    pub fn categories_of(&self, ne: &str) -> impl Iterator<Item = &str> {
        self.categories_of.get(ne).into_iter().flatten().map(String::as_str)
    }

    /// Right values currently true for `relation(left, _)`.
    pub fn right_values(&self, relation: &str, left: &str) -> impl Iterator<Item = &str> {
        self.right_of
            .get(&(relation.to_string(), left.to_string()))
            .into_iter()
            .flatten()
            .map(String::as_str)
    }

    /// Left values currently true for `relation(_, right)`.
    pub fn left_values(&self, relation: &str, right: &str) -> impl Iterator<Item = &str> {
        self.left_of
            .get(&(relation.to_string(), right.to_string()))
            .into_iter()
            .flatten()
            .map(String::as_str)
    }

    /// The first constraint `key` would break if made true, if any.
    pub fn violation(&self, ontology: &Ontology, key: &FactKey) -> Option<Violation> {
        match &key.args {
            Args::One(ne) => self
                .categories_of(ne)
                .find(|c| ontology.mutually_exclusive(c, &key.predicate))
                .map(|c| Violation::Mutex { other: c.to_string() }),
            Args::Two(a, b) => {
                let rel = ontology.relations.get(&key.predicate)?;
                if let Some(other) = self
                    .relations_of
                    .get(&(a.clone(), b.clone()))
                    .into_iter()
                    .flatten()
                    .find(|r| ontology.mutually_exclusive(r, &key.predicate))
                {
                    return Some(Violation::Mutex {
                        other: other.clone(),
                    });
                }
                if rel.nr_values == Cardinality::One {
                    if let Some(existing) = self.right_values(&key.predicate, a).find(|v| v != b) {
                        return Some(Violation::Values {
                            existing: existing.to_string(),
                        });
                    }
                }
                if rel.nr_inverse_values == Cardinality::One {
                    if let Some(existing) = self.left_values(&key.predicate, b).find(|v| v != a) {
                        return Some(Violation::InverseValues {
                            existing: existing.to_string(),
                        });
                    }
                }
                None
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    ontology: Ontology,
    assertions: BTreeMap<FactKey, Assertion>,
    queue: BTreeMap<FactKey, QueueEntry>,
    trusted: BTreeMap<String, BTreeSet<PatternKey>>,
    blacklist: BTreeSet<FactKey>,
    iteration: u32,
    profile: Option<ProfileStamp>,
    truth: TruthIndex,
    iterations: BTreeMap<u32, IterationRecord>,
    requests: BTreeMap<String, usize>,
    records: Vec<Record>,
}

impl KnowledgeBase {
    /// A KB holding `ontology` and one seed assertion per distinct seed.
    pub fn seeded(ontology: Ontology) -> Self {
        Self::seeded_at(ontology, Utc::now())
    }

    pub fn seeded_at(ontology: Ontology, timestamp: DateTime<Utc>) -> Self {
        let mut records = vec![Record::Header {
            version: LOG_VERSION,
        }];
        records.extend(ontology.categories.values().cloned().map(Record::Category));
        records.extend(ontology.relations.values().cloned().map(Record::Relation));
        let seed = |predicate: &str, args: Args| {
            Record::Assert(Assertion {
                predicate: predicate.to_string(),
                args,
                status: Status::Seed,
                score: 1.0,
                iteration: 0,
                evidence: Vec::new(),
                timestamp,
            })
        };
        let mut seen = BTreeSet::new();
        for c in ontology.categories.values() {
            for s in &c.seeds {
                if seen.insert(FactKey::category(&c.name, s)) {
                    records.push(seed(&c.name, Args::One(s.clone())));
                }
            }
        }
        for r in ontology.relations.values() {
            for (a, b) in &r.seeds {
                if seen.insert(FactKey::relation(&r.name, a, b)) {
                    records.push(seed(&r.name, Args::Two(a.clone(), b.clone())));
                }
            }
        }
        let mut kb = KnowledgeBase::default();
        for r in records {
            kb.apply(r).expect("seeding a validated ontology cannot fail");
        }
        kb
    }

    /// Replays `records` from an empty state.
    pub fn replay(records: impl IntoIterator<Item = Record>) -> Result<Self, KbError> {
        let mut kb = KnowledgeBase::default();
        for (i, r) in records.into_iter().enumerate() {
            kb.apply(r).map_err(|e| KbError::Replay {
                index: i + 1,
                source: Box::new(e),
            })?;
        }
        Ok(kb)
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    pub fn assertions(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.values()
    }

    pub fn assertion(&self, key: &FactKey) -> Option<&Assertion> {
        self.assertions.get(key)
    }

    pub fn queue(&self) -> impl Iterator<Item = &QueueEntry> {
        self.queue.values()
    }

    pub fn queued(&self, key: &FactKey) -> Option<&QueueEntry> {
        self.queue.get(key)
    }

    pub fn trusted(&self, predicate: &str) -> Option<&BTreeSet<PatternKey>> {
        self.trusted.get(predicate)
    }

    pub fn blacklist(&self) -> &BTreeSet<FactKey> {
        &self.blacklist
    }

    pub fn is_blacklisted(&self, key: &FactKey) -> bool {
        self.blacklist.contains(key)
    }

    pub fn is_true(&self, key: &FactKey) -> bool {
        self.truth.is_true(key)
    }

    pub fn truth(&self) -> &TruthIndex {
        &self.truth
    }

    pub fn violation(&self, key: &FactKey) -> Option<Violation> {
        self.truth.violation(&self.ontology, key)
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn profile(&self) -> Option<&ProfileStamp> {
        self.profile.as_ref()
    }

    pub fn iteration_record(&self, n: u32) -> Option<&IterationRecord> {
        self.iterations.get(&n)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// The verdict or iteration record committed under `request_id`.
    pub fn request(&self, request_id: &str) -> Option<&Record> {
        self.requests.get(request_id).map(|&i| &self.records[i])
    }

    pub fn status_counts(&self) -> BTreeMap<Status, usize> {
        let mut counts: BTreeMap<Status, usize> = Status::ALL.iter().map(|&s| (s, 0)).collect();
        for a in self.assertions.values() {
            *counts.entry(a.status).or_default() += 1;
        }
        counts
    }

    /// Assertions of `predicate`, optionally restricted to one status, in key order.
    pub fn instances(&self, predicate: &str, status: Option<Status>) -> Vec<&Assertion> {
        self.assertions
            .values()
            .filter(|a| a.predicate == predicate && status.is_none_or(|s| a.status == s))
            .collect()
    }

    pub fn apply_verdict(&mut self, verdict: Verdict) -> Result<(), KbError> {
        self.apply(Record::Verdict(verdict))
    }

    /// Validates `record` against the current state and folds it in. On
    /// error the state is unchanged.
    pub fn apply(&mut self, record: Record) -> Result<(), KbError> {
        match &record {
            Record::Header { version } => {
                if !self.records.is_empty() {
                    return Err(KbError::Order("log header after the first record".into()));
                }
                if *version != LOG_VERSION {
                    return Err(KbError::Version { found: *version });
                }
            }
            _ if self.records.is_empty() => {
                return Err(KbError::Order("log must start with a kblog header".into()));
            }
            Record::Category(spec) => {
                self.check_ontology_open()?;
                self.ontology.categories.insert(spec.name.clone(), spec.clone());
            }
            Record::Relation(spec) => {
                self.check_ontology_open()?;
                self.ontology.relations.insert(spec.name.clone(), spec.clone());
            }
            Record::Assert(a) => {
                let key = a.key();
                self.check_key(&key)?;
                if self.assertions.contains_key(&key) {
                    return Err(KbError::Duplicate(key));
                }
                match a.status {
                    Status::Seed => {
                        if self.iteration > 0 || a.iteration != 0 {
                            return Err(KbError::Order(format!("seed {key} after iteration 0")));
                        }
                    }
                    Status::Promoted => {
                        if a.iteration != self.iteration + 1 {
                            return Err(KbError::Order(format!(
                                "promotion of {key} tagged iteration {} during iteration {}",
                                a.iteration,
                                self.iteration + 1
                            )));
                        }
                        if self.blacklist.contains(&key) {
                            return Err(KbError::Blacklisted(key));
                        }
                        if let Some(violation) = self.violation(&key) {
                            return Err(KbError::Constraint { key, violation });
                        }
                    }
                    status => {
                        return Err(KbError::Order(format!(
                            "assert records cannot carry status {status}"
                        )));
                    }
                }
                self.queue.remove(&key);
                self.truth.insert(&key);
                self.assertions.insert(key, a.clone());
            }
            Record::Queue(q) => {
                self.check_key(&q.key)?;
                if self.blacklist.contains(&q.key) {
                    return Err(KbError::Blacklisted(q.key.clone()));
                }
                if self.assertions.contains_key(&q.key) {
                    return Err(KbError::Duplicate(q.key.clone()));
                }
                self.queue.insert(q.key.clone(), q.clone());
            }
            Record::Dequeue(d) => {
                if self.queue.remove(&d.key).is_none() {
                    return Err(KbError::NotQueued(d.key.clone()));
                }
            }
            Record::Verdict(v) => self.fold_verdict(v)?,
            Record::TrustedPattern(t) => {
                if self.ontology.kind_of(&t.predicate).is_none() {
                    return Err(KbError::UnknownPredicate(t.predicate.clone()));
                }
                let set = self.trusted.entry(t.predicate.clone()).or_default();
                if set.contains(&t.pattern) {
                    return Err(KbError::AlreadyTrusted {
                        predicate: t.predicate.clone(),
                        pattern: t.pattern.clone(),
                    });
                }
                set.insert(t.pattern.clone());
            }
            Record::Iteration(it) => {
                if it.n != self.iteration + 1 {
                    return Err(KbError::Order(format!(
                        "iteration {} follows iteration {}",
                        it.n, self.iteration
                    )));
                }
                if let Some(bound) = &self.profile {
                    if *bound != it.profile {
                        return Err(KbError::ProfileMismatch {
                            bound: bound.clone(),
                            found: it.profile.clone(),
                        });
                    }
                }
                self.profile = Some(it.profile.clone());
                self.iteration = it.n;
                self.iterations.insert(it.n, it.clone());
            }
        }
        let request_id = match &record {
            Record::Verdict(v) => v.request_id.clone(),
            Record::Iteration(i) => i.request_id.clone(),
            _ => None,
        };
        if let Some(id) = request_id {
            self.requests.insert(id, self.records.len());
        }
        self.records.push(record);
        Ok(())
    }

    fn check_ontology_open(&self) -> Result<(), KbError> {
        let frozen = self
            .records
            .iter()
            .any(|r| !matches!(r, Record::Header { .. } | Record::Category(_) | Record::Relation(_)));
        if frozen {
            Err(KbError::Order("ontology records must precede all facts".into()))
        } else {
            Ok(())
        }
    }

    fn check_key(&self, key: &FactKey) -> Result<(), KbError> {
        let kind = self
            .ontology
            .kind_of(&key.predicate)
            .ok_or_else(|| KbError::UnknownPredicate(key.predicate.clone()))?;
        if kind.arity() != key.args.arity() {
            return Err(KbError::Arity {
                predicate: key.predicate.clone(),
                expected: kind.arity(),
                got: key.args.arity(),
            });
        }
        Ok(())
    }

    fn fold_verdict(&mut self, v: &Verdict) -> Result<(), KbError> {
        let key = &v.key;
        if let Some(a) = self.assertions.get(key) {
            match a.status {
                Status::Seed => return Err(KbError::SeedVerdict(key.clone())),
                Status::Promoted => {}
                status => {
                    return Err(KbError::NotEligible {
                        key: key.clone(),
                        status,
                    })
                }
            }
            let a = self.assertions.get_mut(key).expect("checked above");
            match v.decision {
                Decision::Approve => a.status = Status::Approved,
                Decision::Reject => {
                    a.status = Status::Rejected;
                    self.truth.remove(key);
                    self.blacklist.insert(key.clone());
                }
            }
            return Ok(());
        }
        let Some(entry) = self.queue.get(key) else {
            return Err(KbError::UnknownTarget(key.clone()));
        };
        let status = match v.decision {
            Decision::Approve => {
                if let Some(violation) = self.violation(key) {
                    return Err(KbError::Constraint {
                        key: key.clone(),
                        violation,
                    });
                }
                self.truth.insert(key);
                Status::Approved
            }
            Decision::Reject => {
                self.blacklist.insert(key.clone());
                Status::Rejected
            }
        };
        let assertion = Assertion {
            predicate: key.predicate.clone(),
            args: key.args.clone(),
            status,
            score: f64::from(entry.score),
            iteration: self.iteration,
            evidence: entry.evidence.clone(),
            timestamp: v.timestamp,
        };
        self.queue.remove(key);
        self.assertions.insert(key.clone(), assertion);
        Ok(())
    }

    /// Checks the structural invariants; used by tests and after replay.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (key, a) in &self.assertions {
            if a.status == Status::Rejected && !self.blacklist.contains(key) {
                return Err(format!("rejected {key} missing from blacklist"));
            }
            if self.ontology.kind_of(&key.predicate).is_none() {
                return Err(format!("{key} names an unknown predicate"));
            }
            if a.status.is_true() != self.truth.is_true(key) {
                return Err(format!("truth index disagrees on {key}"));
            }
        }
        for key in &self.blacklist {
            if self.is_true(key) || self.queue.contains_key(key) {
                return Err(format!("blacklisted {key} is live"));
            }
        }
        for rel in self.ontology.relations.values() {
            let mut left: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
            let mut right: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
            for a in self.assertions.values() {
                if let (true, Args::Two(x, y)) = (a.predicate == rel.name && a.status.is_true(), &a.args) {
                    left.entry(x).or_default().insert(y);
                    right.entry(y).or_default().insert(x);
                }
            }
            if rel.nr_values == Cardinality::One {
                if let Some((x, ys)) = left.iter().find(|(_, ys)| ys.len() > 1) {
                    return Err(format!("{}({x}, _) has values {ys:?}", rel.name));
                }
            }
            if rel.nr_inverse_values == Cardinality::One {
                if let Some((y, xs)) = right.iter().find(|(_, xs)| xs.len() > 1) {
                    return Err(format!("{}(_, {y}) has values {xs:?}", rel.name));
                }
            }
        }
        Ok(())
    }
}

/// Records about `predicate(args)`, stably ordered by timestamp.
pub fn provenance(kb: &KnowledgeBase, predicate: &str, args: &Args) -> Vec<Record> {
    let key = FactKey::new(predicate, args.clone());
    let mut out: Vec<Record> = kb
        .records
        .iter()
        .filter(|r| r.fact().as_ref() == Some(&key))
        .cloned()
        .collect();
    out.sort_by_key(|r| r.timestamp());
    out
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> KbError + '_ {
    move |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_records<'a>(out: &mut impl Write, records: impl IntoIterator<Item = &'a Record>) -> io::Result<()> {
    for r in records {
        out.write_all(r.to_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes the full record log of `kb` to `path`, replacing it atomically.
pub fn persist_kb(kb: &KnowledgeBase, path: &Path) -> Result<(), KbError> {
    let tmp = path.with_extension("tmp");
    let mut file = io::BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
    write_records(&mut file, &kb.records).map_err(io_err(&tmp))?;
    let file = file.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Replays the log at `path`.
pub fn load_kb(path: &Path) -> Result<KnowledgeBase, KbError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut kb = KnowledgeBase::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let index = i + 1;
        let line = line.map_err(io_err(path))?;
        let record = Record::parse_line(&line).map_err(|message| KbError::Corrupt { index, message })?;
        kb.apply(record).map_err(|e| match e {
            KbError::Version { .. } => e,
            other => KbError::Replay {
                index,
                source: Box::new(other),
            },
        })?;
    }
    if kb.records.is_empty() {
        return Err(KbError::Corrupt {
            index: 1,
            message: "empty log".into(),
        });
    }
    Ok(kb)
}

/// Single writer over a KB log. Readers take [`KbStore::snapshot`]s, which
/// stay valid while later commits land.
#[derive(Debug)]
pub struct KbStore {
    path: PathBuf,
    kb: Arc<KnowledgeBase>,
}

impl KbStore {
    /// Writes `kb` to a fresh log at `path`.
    pub fn create(path: &Path, kb: KnowledgeBase) -> Result<Self, KbError> {
        persist_kb(&kb, path)?;
        Ok(KbStore {
            path: path.to_path_buf(),
            kb: Arc::new(kb),
        })
    }

    pub fn open(path: &Path) -> Result<Self, KbError> {
        Ok(KbStore {
            path: path.to_path_buf(),
            kb: Arc::new(load_kb(path)?),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn snapshot(&self) -> Arc<KnowledgeBase> {
        Arc::clone(&self.kb)
    }

    /// Applies `records` all-or-nothing, appends them to the log and syncs.
    pub fn commit(&mut self, records: Vec<Record>) -> Result<(), KbError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut next = (*self.kb).clone();
        for r in &records {
            next.apply(r.clone())?;
        }
        let mut file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(io_err(&self.path))?;
        let mut buf = Vec::new();
        write_records(&mut buf, &records).map_err(io_err(&self.path))?;
        file.write_all(&buf).map_err(io_err(&self.path))?;
        file.sync_data().map_err(io_err(&self.path))?;
        self.kb = Arc::new(next);
        Ok(())
    }
}

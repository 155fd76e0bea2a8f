//! Coupled pattern/instance bootstrapping over an all-pairs table.
//!
//! One iteration: score every textual pattern against the known instances
//! of each predicate, trust the precise ones, score unseen instances by the
//! number of trusted patterns they co-occur with, drop candidates that break
//! mutual exclusion or cardinality, then promote the strongest and queue the
//! rest for supervision. The result is a batch of records for the KB log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allpairs::AllPairsTable;
use crate::kbstore::{
    Args, Assertion, Dequeue, DequeueReason, FactKey, IterationRecord, KbError, KnowledgeBase,
    PatternKey, QueueEntry, Record, Status, TrustedPattern, TruthIndex, Violation,
};
use crate::ontology::PredicateKind;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("{path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("config: {0}")]
    ConfigInvalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub pattern_precision_min: f64,
    pub pattern_support_min: u32,
    pub instance_pattern_min: u32,
    pub auto_promote_min: u32,
    pub max_new_patterns_per_iter: usize,
    pub max_promotions_per_predicate: usize,
    /// Pending supervision items allowed per predicate.
    pub supervision_quota: usize,
    /// Iterations an item may wait unreviewed before it is dequeued.
    pub queue_ttl_iterations: u32,
    /// Require relation arguments to be true in the domain and range categories.
    pub require_typed_args: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            pattern_precision_min: 0.8,
            pattern_support_min: 2,
            instance_pattern_min: 2,
            auto_promote_min: 3,
            max_new_patterns_per_iter: 20,
            max_promotions_per_predicate: 50,
            supervision_quota: 25,
            queue_ttl_iterations: 5,
            require_typed_args: false,
        }
    }
}

impl LearnerConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, LearnerError> {
        let config: LearnerConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, LearnerError> {
        let text = fs::read_to_string(path).map_err(|source| LearnerError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(0.0..=1.0).contains(&self.pattern_precision_min) {
            return Err(LearnerError::ConfigInvalid(format!(
                "pattern_precision_min must lie in [0, 1], got {}",
                self.pattern_precision_min
            )));
        }
        if self.pattern_support_min == 0 || self.instance_pattern_min == 0 || self.auto_promote_min == 0 {
            return Err(LearnerError::ConfigInvalid(
                "pattern_support_min, instance_pattern_min and auto_promote_min must be positive".into(),
            ));
        }
        if self.queue_ttl_iterations == 0 {
            return Err(LearnerError::ConfigInvalid("queue_ttl_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternScore {
    pub predicate: String,
    pub pattern: PatternKey,
    /// Distinct known-true instances co-occurring with the pattern.
    pub support: u32,
    /// `support` plus distinct co-occurring instances known to be false for
    /// the predicate (blacklisted, or barred by a constraint).
    pub coverage: u32,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateInstance {
    pub key: FactKey,
    /// Distinct trusted patterns co-occurring with the instance.
    pub score: u32,
    pub evidence: Vec<(PatternKey, u64)>,
}

/// The all-pairs table regrouped for scoring.
#[derive(Debug, Clone, Default)]
pub struct TableIndex {
    by_pattern: BTreeMap<PatternKey, BTreeMap<Args, u64>>,
    by_instance: BTreeMap<Args, BTreeSet<PatternKey>>,
}

impl TableIndex {
    pub fn new(table: &AllPairsTable) -> Self {
        let mut index = TableIndex::default();
        for (k, &n) in &table.category_counts {
            index.add(PatternKey::category(k.side, &k.tp), Args::One(k.ne.clone()), n);
        }
        for (k, &n) in &table.relation_counts {
            index.add(PatternKey::relation(&k.tp), Args::Two(k.ne1.clone(), k.ne2.clone()), n);
        }
        index
    }

    fn add(&mut self, pattern: PatternKey, args: Args, n: u64) {
        self.by_instance.entry(args.clone()).or_default().insert(pattern.clone());
        *self.by_pattern.entry(pattern).or_default().entry(args).or_default() += n;
    }

    /// Instances co-occurring with `pattern`, with counts.
    pub fn instances(&self, pattern: &PatternKey) -> impl Iterator<Item = (&Args, u64)> {
        self.by_pattern.get(pattern).into_iter().flatten().map(|(a, &n)| (a, n))
    }

    pub fn patterns(&self, args: &Args) -> impl Iterator<Item = &PatternKey> {
        self.by_instance.get(args).into_iter().flatten()
    }
}

fn kind(kb: &KnowledgeBase, predicate: &str) -> Result<PredicateKind, LearnerError> {
    kb.ontology()
        .kind_of(predicate)
        .ok_or_else(|| LearnerError::UnknownPredicate(predicate.to_string()))
}

/// Known to be false for the predicate.
fn known_negative(kb: &KnowledgeBase, key: &FactKey) -> bool {
    kb.is_blacklisted(key) || kb.violation(key).is_some()
}

/// One score per pattern that co-occurs with at least one true instance,
/// in pattern order.
pub fn score_patterns(
    index: &TableIndex,
    kb: &KnowledgeBase,
    predicate: &str,
) -> Result<Vec<PatternScore>, LearnerError> {
    let arity = kind(kb, predicate)?.arity();
    let true_instances: Vec<&Args> = kb
        .instances(predicate, None)
        .into_iter()
        .filter(|a| a.status.is_true())
        .map(|a| &a.args)
        .collect();
    let patterns: BTreeSet<&PatternKey> = true_instances.iter().flat_map(|a| index.patterns(a)).collect();
    let mut out = Vec::new();
    for pattern in patterns {
        let (mut support, mut negative) = (0u32, 0u32);
        for (args, _) in index.instances(pattern) {
            if args.arity() != arity {
                continue;
            }
            let key = FactKey::new(predicate, args.clone());
            if kb.is_true(&key) {
                support += 1;
            } else if known_negative(kb, &key) {
                negative += 1;
            }
        }
        let coverage = support + negative;
        out.push(PatternScore {
            predicate: predicate.to_string(),
            pattern: pattern.clone(),
            support,
            coverage,
            precision: f64::from(support) / f64::from(coverage),
        });
    }
    Ok(out)
}

/// Patterns not yet trusted that clear both thresholds, best first, capped.
pub fn promote_patterns(
    scores: &[PatternScore],
    already_trusted: Option<&BTreeSet<PatternKey>>,
    config: &LearnerConfig,
) -> Vec<PatternScore> {
    let mut qualifying: Vec<&PatternScore> = scores
        .iter()
        .filter(|s| {
            s.precision >= config.pattern_precision_min
                && s.support >= config.pattern_support_min
                && already_trusted.is_none_or(|t| !t.contains(&s.pattern))
        })
        .collect();
    qualifying.sort_by(|a, b| {
        b.precision
            .total_cmp(&a.precision)
            .then(b.support.cmp(&a.support))
            .then_with(|| a.pattern.cmp(&b.pattern))
    });
    qualifying
        .into_iter()
        .take(config.max_new_patterns_per_iter)
        .cloned()
        .collect()
}

/// Instances co-occurring with at least `instance_pattern_min` trusted
/// patterns, excluding those already true or blacklisted. In key order.
pub fn score_instances(
    index: &TableIndex,
    trusted: &BTreeSet<PatternKey>,
    kb: &KnowledgeBase,
    predicate: &str,
    config: &LearnerConfig,
) -> Result<Vec<CandidateInstance>, LearnerError> {
    let arity = kind(kb, predicate)?.arity();
    let mut evidence: BTreeMap<&Args, Vec<(PatternKey, u64)>> = BTreeMap::new();
    for pattern in trusted {
        for (args, n) in index.instances(pattern) {
            if args.arity() == arity {
                evidence.entry(args).or_default().push((pattern.clone(), n));
            }
        }
    }
    let typed = |args: &Args| -> bool {
        let (Args::Two(a, b), Some(rel)) = (args, kb.ontology().relations.get(predicate)) else {
            return true;
        };
        kb.is_true(&FactKey::category(&rel.domain, a)) && kb.is_true(&FactKey::category(&rel.range, b))
    };
    let mut out = Vec::new();
    for (args, ev) in evidence {
        let score = ev.len() as u32;
        if score < config.instance_pattern_min {
            continue;
        }
        let key = FactKey::new(predicate, args.clone());
        if kb.assertion(&key).is_some() || kb.is_blacklisted(&key) {
            continue;
        }
        if config.require_typed_args && !typed(args) {
            continue;
        }
        out.push(CandidateInstance { key, score, evidence: ev });
    }
    Ok(out)
}

/// Splits candidates into admissible ones and those breaking a constraint.
///
/// Candidates are taken greedily by (score desc, args, predicate); each
/// admitted one counts as true for the rest of the batch.
pub fn filter_candidates(
    candidates: Vec<CandidateInstance>,
    kb: &KnowledgeBase,
) -> (Vec<CandidateInstance>, Vec<(CandidateInstance, Violation)>) {
    let mut ordered = candidates;
    ordered.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then_with(|| a.key.args.cmp(&b.key.args))
            .then_with(|| a.key.predicate.cmp(&b.key.predicate))
    });
    let mut overlay: TruthIndex = kb.truth().clone();
    let (mut admissible, mut rejected) = (Vec::new(), Vec::new());
    for c in ordered {
        match overlay.violation(kb.ontology(), &c.key) {
            Some(v) => rejected.push((c, v)),
            None => {
                overlay.insert(&c.key);
                admissible.push(c);
            }
        }
    }
    (admissible, rejected)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IterationStats {
    pub new_patterns: usize,
    pub candidates: usize,
    pub promoted: usize,
    pub queued: usize,
    pub deferred: usize,
    pub rejected: usize,
    pub expired: usize,
    pub conflicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationResult {
    pub iteration: u32,
    pub promoted: Vec<Assertion>,
    pub queued_for_supervision: Vec<CandidateInstance>,
    /// Admissible candidates left out because the supervision quota was full.
    pub deferred: Vec<CandidateInstance>,
    pub rejected: Vec<(CandidateInstance, Violation)>,
    pub new_trusted_patterns: BTreeMap<String, Vec<PatternScore>>,
    pub stats: IterationStats,
    /// Everything above as KB log records, ending with the iteration record.
    pub records: Vec<Record>,
}

impl IterationResult {
    /// Tags the closing iteration record with a request id.
    pub fn with_request_id(mut self, request_id: Option<String>) -> Self {
        if let Some(Record::Iteration(it)) = self.records.last_mut() {
            it.request_id = request_id;
        }
        self
    }
}

/// Runs one iteration against a KB snapshot. Pure: the KB is untouched and
/// the same inputs give the same result.
pub fn run_iteration(
    kb: &KnowledgeBase,
    table: &AllPairsTable,
    config: &LearnerConfig,
    now: DateTime<Utc>,
) -> Result<IterationResult, LearnerError> {
    if let Some(bound) = kb.profile() {
        if *bound != table.profile {
            return Err(KbError::ProfileMismatch {
                bound: bound.clone(),
                found: table.profile.clone(),
            }
            .into());
        }
    }
    let n = kb.iteration() + 1;
    let index = TableIndex::new(table);
    let predicates: Vec<&str> = kb.ontology().predicates().map(|(p, _)| p).collect();

    type Scored = (Vec<PatternScore>, Vec<CandidateInstance>);
    let scored: Vec<Scored> = predicates
        .par_iter()
        .map(|&p| -> Result<Scored, LearnerError> {
            let scores = score_patterns(&index, kb, p)?;
            let new = promote_patterns(&scores, kb.trusted(p), config);
            let mut trusted = kb.trusted(p).cloned().unwrap_or_default();
            trusted.extend(new.iter().map(|s| s.pattern.clone()));
            let candidates = if trusted.is_empty() {
                Vec::new()
            } else {
                score_instances(&index, &trusted, kb, p, config)?
            };
            Ok((new, candidates))
        })
        .collect::<Result<_, _>>()?;

    let mut new_trusted_patterns = BTreeMap::new();
    let mut candidates = Vec::new();
    for (p, (new, cands)) in predicates.iter().zip(scored) {
        if !new.is_empty() {
            new_trusted_patterns.insert(p.to_string(), new);
        }
        candidates.extend(cands);
    }
    let candidate_count = candidates.len();
    let (admissible, rejected) = filter_candidates(candidates, kb);

    let expired: BTreeSet<FactKey> = kb
        .queue()
        .filter(|q| n - q.queued_at >= config.queue_ttl_iterations)
        .map(|q| q.key.clone())
        .collect();

    // Per predicate, in the filter's order.
    let mut by_predicate: BTreeMap<String, Vec<CandidateInstance>> = BTreeMap::new();
    for c in admissible {
        by_predicate.entry(c.key.predicate.clone()).or_default().push(c);
    }

    let mut promoted = Vec::new();
    let mut to_queue = Vec::new();
    let mut deferred = Vec::new();
    let mut truth = kb.truth().clone();
    for (p, cands) in by_predicate {
        let mut promoted_here = 0;
        let mut rest = Vec::new();
        for c in cands {
            if c.score >= config.auto_promote_min && promoted_here < config.max_promotions_per_predicate {
                promoted_here += 1;
                truth.insert(&c.key);
                promoted.push(Assertion {
                    predicate: c.key.predicate.clone(),
                    args: c.key.args.clone(),
                    status: Status::Promoted,
                    score: f64::from(c.score),
                    iteration: n,
                    evidence: c.evidence.clone(),
                    timestamp: now,
                });
            } else {
                rest.push(c);
            }
        }
        let rest_keys: BTreeSet<&FactKey> = rest.iter().map(|c| &c.key).collect();
        let occupied = kb
            .queue()
            .filter(|q| q.key.predicate == p && !expired.contains(&q.key) && !rest_keys.contains(&q.key))
            .count();
        let mut slots = config.supervision_quota.saturating_sub(occupied);
        for c in rest {
            if expired.contains(&c.key) {
                // Unreviewed for too long: sits out this iteration.
                deferred.push(c);
            } else if kb.queued(&c.key).is_some() || slots > 0 {
                slots = slots.saturating_sub(1);
                to_queue.push(c);
            } else {
                deferred.push(c);
            }
        }
    }

    let promoted_keys: BTreeSet<FactKey> = promoted.iter().map(Assertion::key).collect();
    let mut dequeues = Vec::new();
    let mut conflicted = 0;
    for q in kb.queue() {
        if promoted_keys.contains(&q.key) {
            continue;
        }
        let reason = if expired.contains(&q.key) {
            DequeueReason::Expired
        } else if truth.violation(kb.ontology(), &q.key).is_some() {
            conflicted += 1;
            DequeueReason::Conflict
        } else {
            continue;
        };
        dequeues.push(Record::Dequeue(Dequeue {
            key: q.key.clone(),
            reason,
            iteration: n,
            timestamp: now,
        }));
    }

    let mut records = Vec::new();
    for (p, scores) in &new_trusted_patterns {
        for s in scores {
            records.push(Record::TrustedPattern(TrustedPattern {
                predicate: p.clone(),
                pattern: s.pattern.clone(),
                iteration: n,
                support: s.support,
                coverage: s.coverage,
            }));
        }
    }
    records.extend(dequeues);
    records.extend(promoted.iter().cloned().map(Record::Assert));
    for c in &to_queue {
        let existing = kb.queued(&c.key);
        if existing.is_some_and(|q| q.score == c.score && q.evidence == c.evidence) {
            continue;
        }
        records.push(Record::Queue(QueueEntry {
            key: c.key.clone(),
            score: c.score,
            queued_at: existing.map_or(n, |q| q.queued_at),
            evidence: c.evidence.clone(),
            timestamp: now,
        }));
    }
    let stats = IterationStats {
        new_patterns: new_trusted_patterns.values().map(Vec::len).sum(),
        candidates: candidate_count,
        promoted: promoted.len(),
        queued: to_queue.len(),
        deferred: deferred.len(),
        rejected: rejected.len(),
        expired: expired.len(),
        conflicted,
    };
    records.push(Record::Iteration(IterationRecord {
        n,
        profile: table.profile.clone(),
        corpus: table.corpus_fingerprint,
        promoted: stats.promoted as u32,
        queued: stats.queued as u32,
        deferred: stats.deferred as u32,
        request_id: None,
        timestamp: now,
    }));
    Ok(IterationResult {
        iteration: n,
        promoted,
        queued_for_supervision: to_queue,
        deferred,
        rejected,
        new_trusted_patterns,
        stats,
        records,
    })
}

/// Runs `iterations` iterations, applying each result to `kb`.
pub fn run_iterations(
    kb: &mut KnowledgeBase,
    table: &AllPairsTable,
    config: &LearnerConfig,
    iterations: u32,
    now: DateTime<Utc>,
) -> Result<Vec<IterationResult>, LearnerError> {
    let mut out = Vec::new();
    for _ in 0..iterations {
        let result = run_iteration(kb, table, config, now)?;
        for r in result.records.clone() {
            kb.apply(r)?;
        }
        out.push(result);
    }
    Ok(out)
}

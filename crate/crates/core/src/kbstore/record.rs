//! Line codec for the knowledge-base log.
//!
//! One record per line: `<type><TAB>key=value<TAB>key=value...`. String
//! values are percent-encoded for control characters and the list
//! delimiters `%`, `|`, `,` and `:`, so a value never contains a tab.

use std::collections::BTreeMap;

use chrono::{DateTime, SecondsFormat, Utc};
use percent_encoding::percent_decode_str;

use super::{Args, Assertion, Decision, DequeueReason, FactKey, PatternKey, QueueEntry, Status, Verdict};
use crate::allpairs::{Fingerprint, ProfileStamp, Side};
use crate::ontology::{Cardinality, CategorySpec, RelationSpec};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustedPattern {
    pub predicate: String,
    pub pattern: PatternKey,
    pub iteration: u32,
    pub support: u32,
    pub coverage: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationRecord {
    pub n: u32,
    pub profile: ProfileStamp,
    pub corpus: Fingerprint,
    pub promoted: u32,
    pub queued: u32,
    pub deferred: u32,
    pub request_id: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dequeue {
    pub key: FactKey,
    pub reason: DequeueReason,
    pub iteration: u32,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Header { version: u32 },
    Category(CategorySpec),
    Relation(RelationSpec),
    Assert(Assertion),
    Queue(QueueEntry),
    Dequeue(Dequeue),
    Verdict(Verdict),
    TrustedPattern(TrustedPattern),
    Iteration(IterationRecord),
}

impl Record {
    pub fn type_name(&self) -> &'static str {
        match self {
            Record::Header { .. } => "kblog",
            Record::Category(_) => "category",
            Record::Relation(_) => "relation",
            Record::Assert(_) => "assert",
            Record::Queue(_) => "queue",
            Record::Dequeue(_) => "dequeue",
            Record::Verdict(_) => "verdict",
            Record::TrustedPattern(_) => "trusted_pattern",
            Record::Iteration(_) => "iteration",
        }
    }

    /// The fact this record is about, if any.
    pub fn fact(&self) -> Option<FactKey> {
        match self {
            Record::Assert(a) => Some(a.key()),
            Record::Queue(q) => Some(q.key.clone()),
            Record::Dequeue(d) => Some(d.key.clone()),
            Record::Verdict(v) => Some(v.key.clone()),
            _ => None,
        }
    }

    pub fn timestamp(&self) -> Option<DateTime<Utc>> {
        match self {
            Record::Assert(a) => Some(a.timestamp),
            Record::Queue(q) => Some(q.timestamp),
            Record::Dequeue(d) => Some(d.timestamp),
            Record::Verdict(v) => Some(v.timestamp),
            Record::Iteration(i) => Some(i.timestamp),
            _ => None,
        }
    }

    pub fn to_line(&self) -> String {
        let mut w = LineWriter::new(self.type_name());
        match self {
            Record::Header { version } => {
                w.raw("version", version);
            }
            Record::Category(c) => {
                w.text("name", &c.name);
                w.list("seeds", c.seeds.iter());
                w.text("human_format", &c.human_format);
                w.list("mutex_exceptions", c.mutex_exceptions.iter());
                w.text("description", &c.description);
                w.map("annotations", &c.annotations);
            }
            Record::Relation(r) => {
                w.text("name", &r.name);
                w.text("domain", &r.domain);
                w.text("range", &r.range);
                let seeds: Vec<String> = r
                    .seeds
                    .iter()
                    .map(|(a, b)| format!("{},{}", enc(a), enc(b)))
                    .collect();
                w.raw("seeds", seeds.join("|"));
                w.text("human_format", &r.human_format);
                w.list("mutex_exceptions", r.mutex_exceptions.iter());
                w.raw("nr_values", r.nr_values);
                w.raw("nr_inverse_values", r.nr_inverse_values);
                w.map("annotations", &r.annotations);
            }
            Record::Assert(a) => {
                w.key(&a.key());
                w.raw("status", a.status.as_str());
                w.raw("score", a.score);
                w.raw("iteration", a.iteration);
                w.evidence(&a.evidence);
                w.time(a.timestamp);
            }
            Record::Queue(q) => {
                w.key(&q.key);
                w.raw("score", q.score);
                w.raw("iteration", q.queued_at);
                w.evidence(&q.evidence);
                w.time(q.timestamp);
            }
            Record::Dequeue(d) => {
                w.key(&d.key);
                w.raw("reason", d.reason.as_str());
                w.raw("iteration", d.iteration);
                w.time(d.timestamp);
            }
            Record::Verdict(v) => {
                w.key(&v.key);
                w.raw("decision", v.decision.as_str());
                w.text("supervisor", &v.supervisor);
                w.text("request_id", v.request_id.as_deref().unwrap_or(""));
                w.time(v.timestamp);
            }
            Record::TrustedPattern(t) => {
                w.text("predicate", &t.predicate);
                w.raw("side", side_code(t.pattern.side));
                w.text("tp", &t.pattern.tp);
                w.raw("iteration", t.iteration);
                w.raw("support", t.support);
                w.raw("coverage", t.coverage);
            }
            Record::Iteration(i) => {
                w.raw("n", i.n);
                w.text("profile", &i.profile.name);
                w.text("profile_hash", &i.profile.hash);
                w.raw("corpus", i.corpus);
                w.raw("promoted", i.promoted);
                w.raw("queued", i.queued);
                w.raw("deferred", i.deferred);
                w.text("request_id", i.request_id.as_deref().unwrap_or(""));
                w.time(i.timestamp);
            }
        }
        w.finish()
    }

    pub fn parse_line(line: &str) -> Result<Record, String> {
        let mut parts = line.split('\t');
        let kind = parts.next().unwrap_or_default();
        let mut fields = Fields::default();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| format!("field {p:?} is not key=value"))?;
            if fields.0.insert(k.to_string(), v.to_string()).is_some() {
                return Err(format!("duplicate field `{k}`"));
            }
        }
        let record = match kind {
            "kblog" => Record::Header {
                version: fields.num("version")?,
            },
            "category" => Record::Category(CategorySpec {
                name: fields.text("name")?,
                seeds: fields.list("seeds")?,
                human_format: fields.text("human_format")?,
                mutex_exceptions: fields.list("mutex_exceptions")?.into_iter().collect(),
                description: fields.text("description")?,
                annotations: fields.map("annotations")?,
            }),
            "relation" => Record::Relation(RelationSpec {
                name: fields.text("name")?,
                domain: fields.text("domain")?,
                range: fields.text("range")?,
                seeds: fields
                    .take("seeds")?
                    .split('|')
                    .filter(|s| !s.is_empty())
                    .map(|pair| {
                        let (a, b) = pair
                            .split_once(',')
                            .ok_or_else(|| format!("seed {pair:?} is not a pair"))?;
                        Ok((dec(a)?, dec(b)?))
                    })
                    .collect::<Result<_, String>>()?,
                human_format: fields.text("human_format")?,
                mutex_exceptions: fields.list("mutex_exceptions")?.into_iter().collect(),
                nr_values: Cardinality::parse(&fields.take("nr_values")?)?,
                nr_inverse_values: Cardinality::parse(&fields.take("nr_inverse_values")?)?,
                annotations: fields.map("annotations")?,
            }),
            "assert" => {
                let key = fields.key()?;
                Record::Assert(Assertion {
                    predicate: key.predicate,
                    args: key.args,
                    status: Status::parse(&fields.take("status")?)?,
                    score: fields.num("score")?,
                    iteration: fields.num("iteration")?,
                    evidence: fields.evidence()?,
                    timestamp: fields.time()?,
                })
            }
            "queue" => Record::Queue(QueueEntry {
                key: fields.key()?,
                score: fields.num("score")?,
                queued_at: fields.num("iteration")?,
                evidence: fields.evidence()?,
                timestamp: fields.time()?,
            }),
            "dequeue" => Record::Dequeue(Dequeue {
                key: fields.key()?,
                reason: DequeueReason::parse(&fields.take("reason")?)?,
                iteration: fields.num("iteration")?,
                timestamp: fields.time()?,
            }),
            "verdict" => Record::Verdict(Verdict {
                key: fields.key()?,
                decision: Decision::parse(&fields.take("decision")?)?,
                supervisor: fields.text("supervisor")?,
                request_id: fields.optional_text("request_id")?,
                timestamp: fields.time()?,
            }),
            "trusted_pattern" => Record::TrustedPattern(TrustedPattern {
                predicate: fields.text("predicate")?,
                pattern: PatternKey {
                    side: parse_side(&fields.take("side")?)?,
                    tp: fields.text("tp")?,
                },
                iteration: fields.num("iteration")?,
                support: fields.num("support")?,
                coverage: fields.num("coverage")?,
            }),
            "iteration" => Record::Iteration(IterationRecord {
                n: fields.num("n")?,
                profile: ProfileStamp {
                    name: fields.text("profile")?,
                    hash: fields.text("profile_hash")?,
                },
                corpus: fields.take("corpus")?.parse()?,
                promoted: fields.num("promoted")?,
                queued: fields.num("queued")?,
                deferred: fields.num("deferred")?,
                request_id: fields.optional_text("request_id")?,
                timestamp: fields.time()?,
            }),
            other => return Err(format!("unknown record type {other:?}")),
        };
        if let Some(k) = fields.0.keys().next() {
            return Err(format!("unexpected field `{k}` in {kind} record"));
        }
        Ok(record)
    }
}

/// Escapes control characters and the delimiters `%|,:`; other UTF-8 text
/// is kept verbatim so logs stay readable.
fn enc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_control() || matches!(c, '%' | '|' | ',' | ':') {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                out.push_str(&format!("%{b:02X}"));
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn dec(s: &str) -> Result<String, String> {
    percent_decode_str(s)
        .decode_utf8()
        .map(|c| c.into_owned())
        .map_err(|e| format!("bad escape in {s:?}: {e}"))
}

fn side_code(side: Option<Side>) -> &'static str {
    side.map_or("-", Side::code)
}

fn parse_side(s: &str) -> Result<Option<Side>, String> {
    if s == "-" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

pub fn format_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

struct LineWriter {
    out: String,
}

impl LineWriter {
    fn new(kind: &str) -> Self {
        LineWriter {
            out: kind.to_string(),
        }
    }

    fn raw(&mut self, key: &str, value: impl std::fmt::Display) {
        self.out.push('\t');
        self.out.push_str(key);
        self.out.push('=');
        self.out.push_str(&value.to_string());
    }

    fn text(&mut self, key: &str, value: &str) {
        self.raw(key, enc(value));
    }

    fn list<'a>(&mut self, key: &str, items: impl Iterator<Item = &'a String>) {
        let joined: Vec<String> = items.map(|s| enc(s)).collect();
        self.raw(key, joined.join("|"));
    }

    fn map(&mut self, key: &str, map: &BTreeMap<String, String>) {
        let joined: Vec<String> = map
            .iter()
            .map(|(k, v)| format!("{}:{}", enc(k), enc(v)))
            .collect();
        self.raw(key, joined.join("|"));
    }

    fn key(&mut self, key: &FactKey) {
        self.text("predicate", &key.predicate);
        let args: Vec<String> = key.args.parts().iter().map(|a| enc(a)).collect();
        self.raw("args", args.join(","));
    }

    fn evidence(&mut self, evidence: &[(PatternKey, u64)]) {
        let items: Vec<String> = evidence
            .iter()
            .map(|(p, n)| format!("{}:{}:{}", side_code(p.side), enc(&p.tp), n))
            .collect();
        self.raw("evidence", items.join("|"));
    }

    fn time(&mut self, t: DateTime<Utc>) {
        self.raw("timestamp", format_time(t));
    }

    fn finish(self) -> String {
        self.out
    }
}

#[derive(Default)]
struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take(&mut self, key: &str) -> Result<String, String> {
        self.0
            .remove(key)
            .ok_or_else(|| format!("missing field `{key}`"))
    }

    fn text(&mut self, key: &str) -> Result<String, String> {
        dec(&self.take(key)?)
    }

    fn optional_text(&mut self, key: &str) -> Result<Option<String>, String> {
        let v = self.text(key)?;
        Ok(if v.is_empty() { None } else { Some(v) })
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.take(key)?;
        v.parse().map_err(|e| format!("field `{key}`={v:?}: {e}"))
    }

    fn list(&mut self, key: &str) -> Result<Vec<String>, String> {
        self.take(key)?
            .split('|')
            .filter(|s| !s.is_empty())
            .map(dec)
            .collect()
    }

    fn map(&mut self, key: &str) -> Result<BTreeMap<String, String>, String> {
        self.take(key)?
            .split('|')
            .filter(|s| !s.is_empty())
            .map(|item| {
                let (k, v) = item
                    .split_once(':')
                    .ok_or_else(|| format!("annotation {item:?} lacks ':'"))?;
                Ok((dec(k)?, dec(v)?))
            })
            .collect()
    }

    fn key(&mut self) -> Result<FactKey, String> {
        let predicate = self.text("predicate")?;
        let parts = self
            .take("args")?
            .split(',')
            .map(dec)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FactKey {
            predicate,
            args: Args::from_parts(parts)?,
        })
    }

    fn evidence(&mut self) -> Result<Vec<(PatternKey, u64)>, String> {
        self.take("evidence")?
            .split('|')
            .filter(|s| !s.is_empty())
            .map(|item| {
                let mut it = item.splitn(3, ':');
                let (Some(side), Some(tp), Some(n)) = (it.next(), it.next(), it.next()) else {
                    return Err(format!("evidence {item:?} is not side:tp:count"));
                };
                Ok((
                    PatternKey {
                        side: parse_side(side)?,
                        tp: dec(tp)?,
                    },
                    n.parse().map_err(|e| format!("evidence count {n:?}: {e}"))?,
                ))
            })
            .collect()
    }

    fn time(&mut self) -> Result<DateTime<Utc>, String> {
        let v = self.take("timestamp")?;
        DateTime::parse_from_rfc3339(&v)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| format!("timestamp {v:?}: {e}"))
    }
}

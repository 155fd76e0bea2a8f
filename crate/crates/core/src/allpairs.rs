//! Co-occurrence tables between entity surfaces and textual patterns.
//!
//! A category row counts how often a pattern of `min_gram..=max_gram` tokens
//! sits immediately left or right of an entity. A relation row counts how
//! often a pattern separates two entities of the same sentence. Counts are
//! exact; all filtering happens in the learner.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    identify_entities, is_punctuation_token, sentence_spans, tokenize, Document, EntityMention,
    Gazetteer, LanguageProfile, TokenizedSentence,
};

pub const CATEGORY_FILE: &str = "category.tsv";
pub const RELATION_FILE: &str = "relation.tsv";

#[derive(Debug, Error)]
pub enum AllPairsError {
    #[error("cannot merge tables built with different profiles ({left} vs {right})")]
    ProfileMismatch { left: String, right: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn code(self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "L" => Ok(Side::Left),
            "R" => Ok(Side::Right),
            other => Err(format!("side must be L or R, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CategoryPairKey {
    pub ne: String,
    pub side: Side,
    pub tp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationPairKey {
    pub ne1: String,
    pub ne2: String,
    pub tp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PairKey {
    Category(CategoryPairKey),
    Relation(RelationPairKey),
}

/// Identifies the profile a table was built with.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProfileStamp {
    pub name: String,
    /// Hex digest of the profile's canonical serialization.
    pub hash: String,
}

impl ProfileStamp {
    pub fn of(profile: &LanguageProfile) -> Self {
        let digest = Sha256::digest(profile.to_toml_string().as_bytes());
        ProfileStamp {
            name: profile.name.clone(),
            hash: hex::encode(&digest[..8]),
        }
    }
}

impl fmt::Display for ProfileStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.hash)
    }
}

/// Order-independent content hash of a set of documents.
///
/// Per-document digests are summed modulo 2^128, so sharded builds merge to
/// the same fingerprint as a single pass, and the empty corpus hashes to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fingerprint(pub u128);

impl Fingerprint {
    pub fn of_document(doc_id: &str, text: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(doc_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 16];
        bytes.copy_from_slice(&digest[..16]);
        Fingerprint(u128::from_be_bytes(bytes))
    }

    pub fn combine(self, other: Fingerprint) -> Fingerprint {
        Fingerprint(self.0.wrapping_add(other.0))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for Fingerprint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 {
            return Err(format!("fingerprint must be 32 hex digits, got {s:?}"));
        }
        u128::from_str_radix(s, 16)
            .map(Fingerprint)
            .map_err(|e| format!("bad fingerprint {s:?}: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllPairsTable {
    pub profile: ProfileStamp,
    pub category_counts: BTreeMap<CategoryPairKey, u64>,
    pub relation_counts: BTreeMap<RelationPairKey, u64>,
    pub corpus_fingerprint: Fingerprint,
}

impl AllPairsTable {
    pub fn empty(profile: ProfileStamp) -> Self {
        AllPairsTable {
            profile,
            category_counts: BTreeMap::new(),
            relation_counts: BTreeMap::new(),
            corpus_fingerprint: Fingerprint::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.category_counts.is_empty() && self.relation_counts.is_empty()
    }

    pub fn add(&mut self, key: PairKey) {
        match key {
            PairKey::Category(k) => *self.category_counts.entry(k).or_insert(0) += 1,
            PairKey::Relation(k) => *self.relation_counts.entry(k).or_insert(0) += 1,
        }
    }

    pub fn category_total(&self) -> u64 {
        self.category_counts.values().sum()
    }

    pub fn relation_total(&self) -> u64 {
        self.relation_counts.values().sum()
    }

    /// Pointwise sum of counts. Commutative and associative; the empty table
    /// with the same profile is the identity.
    pub fn merge(mut self, other: AllPairsTable) -> Result<AllPairsTable, AllPairsError> {
        if self.profile != other.profile {
            return Err(AllPairsError::ProfileMismatch {
                left: self.profile.to_string(),
                right: other.profile.to_string(),
            });
        }
        for (k, v) in other.category_counts {
            *self.category_counts.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.relation_counts {
            *self.relation_counts.entry(k).or_insert(0) += v;
        }
        self.corpus_fingerprint = self.corpus_fingerprint.combine(other.corpus_fingerprint);
        Ok(self)
    }
}

/// Counts each key by its multiplicity in the stream.
pub fn aggregate<I>(profile: ProfileStamp, pairs: I) -> AllPairsTable
where
    I: IntoIterator<Item = PairKey>,
{
    let mut table = AllPairsTable::empty(profile);
    for key in pairs {
        table.add(key);
    }
    table
}

fn clean_edges(sentence: &TokenizedSentence, start: usize, end: usize) -> bool {
    !is_punctuation_token(sentence.token(start)) && !is_punctuation_token(sentence.token(end - 1))
}

/// Left and right n-gram windows around each mention, for every n in
/// `min_gram..=max_gram`. Windows whose first or last token is pure
/// punctuation are not emitted.
pub fn extract_category_pairs(
    sentence: &TokenizedSentence,
    mentions: &[EntityMention],
    profile: &LanguageProfile,
) -> Vec<CategoryPairKey> {
    let len = sentence.len();
    let mut out = Vec::new();
    for m in mentions {
        for n in profile.min_gram..=profile.max_gram {
            if m.start >= n && clean_edges(sentence, m.start - n, m.start) {
                out.push(CategoryPairKey {
                    ne: m.surface.clone(),
                    side: Side::Left,
                    tp: sentence.join(m.start - n, m.start),
                });
            }
            if m.end + n <= len && clean_edges(sentence, m.end, m.end + n) {
                out.push(CategoryPairKey {
                    ne: m.surface.clone(),
                    side: Side::Right,
                    tp: sentence.join(m.end, m.end + n),
                });
            }
        }
    }
    out
}

/// The tokens strictly between every ordered, non-overlapping mention pair
/// whose gap is `1..=max_relation_gap` tokens. Pairs with identical surfaces
/// are skipped, as are gaps with punctuation at either edge.
pub fn extract_relation_pairs(
    sentence: &TokenizedSentence,
    mentions: &[EntityMention],
    profile: &LanguageProfile,
) -> Vec<RelationPairKey> {
    let mut out = Vec::new();
    for a in mentions {
        for b in mentions {
            if a.end > b.start || a.surface == b.surface {
                continue;
            }
            let gap = b.start - a.end;
            if gap == 0 || gap > profile.max_relation_gap || !clean_edges(sentence, a.end, b.start) {
                continue;
            }
            out.push(RelationPairKey {
                ne1: a.surface.clone(),
                ne2: b.surface.clone(),
                tp: sentence.join(a.end, b.start),
            });
        }
    }
    out
}

/// Tokenized sentences of one document.
pub fn sentences_of(document: &Document, profile: &LanguageProfile) -> Vec<TokenizedSentence> {
    sentence_spans(&document.text, profile)
        .into_iter()
        .enumerate()
        .map(|(i, r)| tokenize(&document.text[r], &document.doc_id, i))
        .collect()
}

/// Table for a single document, fingerprint included.
pub fn index_document(
    document: &Document,
    profile: &LanguageProfile,
    gazetteer: &Gazetteer,
) -> AllPairsTable {
    let mut table = AllPairsTable::empty(ProfileStamp::of(profile));
    table.corpus_fingerprint = Fingerprint::of_document(&document.doc_id, &document.text);
    for sentence in sentences_of(document, profile) {
        let mentions = identify_entities(&sentence, profile, gazetteer);
        for k in extract_category_pairs(&sentence, &mentions, profile) {
            table.add(PairKey::Category(k));
        }
        for k in extract_relation_pairs(&sentence, &mentions, profile) {
            table.add(PairKey::Relation(k));
        }
    }
    table
}

/// Indexes documents in parallel and merges the shard tables.
pub fn build_table(
    documents: &[Document],
    profile: &LanguageProfile,
    gazetteer: &Gazetteer,
) -> AllPairsTable {
    let stamp = ProfileStamp::of(profile);
    documents
        .par_iter()
        .map(|d| index_document(d, profile, gazetteer))
        .reduce(
            || AllPairsTable::empty(stamp.clone()),
            |a, b| a.merge(b).expect("shards share one profile"),
        )
}

fn header(table: &AllPairsTable, kind: &str) -> String {
    format!(
        "#allpairs v1 profile={} kind={} profile_hash={} corpus={}",
        table.profile.name, kind, table.profile.hash, table.corpus_fingerprint
    )
}

/// Writes `category.tsv` and `relation.tsv` into `dir`, creating it if needed.
pub fn write_table(table: &AllPairsTable, dir: &Path) -> Result<(), AllPairsError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AllPairsError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join(CATEGORY_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    (|| -> io::Result<()> {
        writeln!(w, "{}", header(table, "category"))?;
        for (k, count) in &table.category_counts {
            writeln!(w, "{}\t{}\t{}\t{}", k.ne, k.side, k.tp, count)?;
        }
        w.flush()
    })()
    .map_err(io_err(&path))?;

    let path = dir.join(RELATION_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    (|| -> io::Result<()> {
        writeln!(w, "{}", header(table, "relation"))?;
        for (k, count) in &table.relation_counts {
            writeln!(w, "{}\t{}\t{}\t{}", k.ne1, k.ne2, k.tp, count)?;
        }
        w.flush()
    })()
    .map_err(io_err(&path))?;
    Ok(())
}

struct Header {
    profile: ProfileStamp,
    fingerprint: Fingerprint,
}

fn parse_header(line: &str, kind: &str) -> Result<Header, String> {
    let mut fields = line.split(' ');
    if fields.next() != Some("#allpairs") || fields.next() != Some("v1") {
        return Err("expected header `#allpairs v1 ...`".into());
    }
    let mut kv = BTreeMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| format!("bad header field {f:?}"))?;
        kv.insert(k, v);
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| format!("header lacks {k}="))
    };
    if get("kind")? != kind {
        return Err(format!("expected kind={kind}, got kind={}", get("kind")?));
    }
    Ok(Header {
        profile: ProfileStamp {
            name: get("profile")?.to_string(),
            hash: get("profile_hash")?.to_string(),
        },
        fingerprint: get("corpus")?.parse()?,
    })
}

fn parse_count(field: &str) -> Result<u64, String> {
    let n: i128 = field
        .parse()
        .map_err(|_| format!("count {field:?} is not an integer"))?;
    if n <= 0 {
        return Err(format!("count must be positive, got {n}"));
    }
    u64::try_from(n).map_err(|_| format!("count {n} out of range"))
}

fn read_rows<K: Ord>(
    path: &Path,
    kind: &str,
    mut row: impl FnMut(&[&str]) -> Result<K, String>,
) -> Result<(Header, BTreeMap<K, u64>), AllPairsError> {
    let malformed = |line: usize, message: String| AllPairsError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = File::open(path).map_err(|source| AllPairsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| malformed(1, "empty file, header missing".into()))?
        .map_err(|source| AllPairsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let header = parse_header(&first, kind).map_err(|m| malformed(1, m))?;
    let mut counts = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|source| AllPairsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[..3].iter().any(|f| f.is_empty()) {
            return Err(malformed(lineno, "empty field".into()));
        }
        let key = row(&fields).map_err(|m| malformed(lineno, m))?;
        let count = parse_count(fields[3]).map_err(|m| malformed(lineno, m))?;
        if counts.insert(key, count).is_some() {
            return Err(malformed(lineno, "duplicate row".into()));
        }
    }
    Ok((header, counts))
}

pub fn read_table(dir: &Path) -> Result<AllPairsTable, AllPairsError> {
    let cat_path = dir.join(CATEGORY_FILE);
    let (cat_header, category_counts) = read_rows(&cat_path, "category", |f| {
        Ok(CategoryPairKey {
            ne: f[0].to_string(),
            side: f[1].parse()?,
            tp: f[2].to_string(),
        })
    })?;
    let rel_path = dir.join(RELATION_FILE);
    let (rel_header, relation_counts) = read_rows(&rel_path, "relation", |f| {
        Ok(RelationPairKey {
            ne1: f[0].to_string(),
            ne2: f[1].to_string(),
            tp: f[2].to_string(),
        })
    })?;
    if cat_header.profile != rel_header.profile || cat_header.fingerprint != rel_header.fingerprint {
        return Err(AllPairsError::Malformed {
            path: rel_path,
            line: 1,
            message: "header does not match the category table's profile/corpus".into(),
        });
    }
    Ok(AllPairsTable {
        profile: cat_header.profile,
        category_counts,
        relation_counts,
        corpus_fingerprint: cat_header.fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn profile(min: usize, max: usize) -> LanguageProfile {
        let mut p = LanguageProfile::builtin("fr").unwrap();
        p.min_gram = min;
        p.max_gram = max;
        p
    }

    fn mention(s: &TokenizedSentence, start: usize, end: usize) -> EntityMention {
        EntityMention {
            start,
            end,
            surface: s.join(start, end),
        }
    }

    #[test]
    fn english_worked_example() {
        let s = tokenize("Located in USA, New York is a very famous city", "d", 0);
        let keys = extract_category_pairs(&s, &[mention(&s, 4, 6)], &profile(5, 5));
        assert_eq!(
            keys,
            vec![CategoryPairKey {
                ne: "New York".into(),
                side: Side::Right,
                tp: "is a very famous city".into()
            }]
        );
    }

    #[test]
    fn gram_combinations() {
        let s = tokenize("São Paulo is a city located near", "d", 0);
        let tps: Vec<_> = extract_category_pairs(&s, &[mention(&s, 0, 2)], &profile(3, 5))
            .into_iter()
            .map(|k| (k.side, k.tp))
            .collect();
        assert_eq!(
            tps,
            vec![
                (Side::Right, "is a city".to_string()),
                (Side::Right, "is a city located".to_string()),
                (Side::Right, "is a city located near".to_string()),
            ]
        );
    }

    #[test]
    fn no_window_fits() {
        let s = tokenize("Lyon est belle", "d", 0);
        assert!(extract_category_pairs(&s, &[mention(&s, 0, 1)], &profile(3, 5)).is_empty());
    }

    #[test]
    fn punctuation_edges_are_skipped() {
        let s = tokenize("Located in USA, New York is great", "d", 0);
        let keys = extract_category_pairs(&s, &[mention(&s, 4, 6)], &profile(1, 4));
        assert!(keys.iter().all(|k| k.side == Side::Right));
        assert_eq!(keys.len(), 2);
    }

    #[test]
    fn relation_between_pair() {
        let s = tokenize("Saint Étienne is located in France", "d", 0);
        let keys = extract_relation_pairs(&s, &[mention(&s, 0, 2), mention(&s, 5, 6)], &profile(3, 5));
        assert_eq!(
            keys,
            vec![RelationPairKey {
                ne1: "Saint Étienne".into(),
                ne2: "France".into(),
                tp: "is located in".into()
            }]
        );
    }

    #[test]
    fn relation_skips_single_overlap_zero_gap_and_self_pairs() {
        let s = tokenize("Paris met Paris near Lyon Lyon", "d", 0);
        assert!(extract_relation_pairs(&s, &[mention(&s, 0, 1)], &profile(3, 5)).is_empty());
        let ms = [
            mention(&s, 0, 1),
            mention(&s, 2, 3),
            mention(&s, 4, 5),
            mention(&s, 5, 6),
        ];
        let got: Vec<_> = extract_relation_pairs(&s, &ms, &profile(3, 5))
            .into_iter()
            .map(|k| (k.ne1, k.ne2, k.tp))
            .collect();
        // Paris/Paris and Lyon/Lyon are self pairs.
        assert_eq!(
            got,
            vec![
                ("Paris".into(), "Lyon".into(), "met Paris near".into()),
                ("Paris".into(), "Lyon".into(), "met Paris near Lyon".into()),
                ("Paris".into(), "Lyon".into(), "near".into()),
                ("Paris".into(), "Lyon".into(), "near Lyon".into()),
            ]
        );
        let overlapping = [mention(&s, 0, 2), mention(&s, 1, 3)];
        assert!(extract_relation_pairs(&s, &overlapping, &profile(3, 5)).is_empty());
    }

    #[test]
    fn relation_gap_bound() {
        let s = tokenize("Paris a b c Lyon", "d", 0);
        let ms = [mention(&s, 0, 1), mention(&s, 4, 5)];
        let mut p = profile(3, 5);
        p.max_relation_gap = 2;
        assert!(extract_relation_pairs(&s, &ms, &p).is_empty());
        p.max_relation_gap = 3;
        assert_eq!(extract_relation_pairs(&s, &ms, &p).len(), 1);
    }

    fn stamp() -> ProfileStamp {
        ProfileStamp::of(&profile(3, 5))
    }

    fn cat(ne: &str, tp: &str) -> PairKey {
        PairKey::Category(CategoryPairKey {
            ne: ne.into(),
            side: Side::Right,
            tp: tp.into(),
        })
    }

    #[test]
    fn aggregate_counts_multiplicity() {
        let t = aggregate(stamp(), std::iter::repeat_n(cat("Saint Étienne", "is a city"), 20));
        assert_eq!(t.category_counts.values().copied().collect::<Vec<_>>(), vec![20]);
        assert!(aggregate(stamp(), std::iter::empty()).is_empty());
    }

    #[test]
    fn merge_rejects_profile_mismatch() {
        let a = AllPairsTable::empty(stamp());
        let b = AllPairsTable::empty(ProfileStamp::of(&LanguageProfile::builtin("en").unwrap()));
        assert!(matches!(a.merge(b), Err(AllPairsError::ProfileMismatch { .. })));
    }

    #[test]
    fn table_one_serializes_sorted() {
        let rows = [
            ("Saint Étienne", "is a city", 20),
            ("São Paulo", "is a city", 30),
            ("New York", "is a city", 50),
            ("Saint Étienne", "is a beautiful city", 30),
            ("Saint Étienne", "city such as", 30),
            ("São Paulo", "city such as", 60),
            ("New York", "city such as", 100),
        ];
        let keys = rows
            .iter()
            .flat_map(|(ne, tp, n)| std::iter::repeat_n(cat(ne, tp), *n));
        let table = aggregate(stamp(), keys);
        let dir = tempfile::tempdir().unwrap();
        write_table(&table, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(CATEGORY_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("#allpairs v1 profile=fr kind=category"));
        let body = &lines[1..];
        assert_eq!(body.len(), 7);
        let mut sorted = body.to_vec();
        sorted.sort();
        assert_eq!(body, &sorted[..]);
        assert_eq!(body[0], "New York\tR\tcity such as\t100");
        assert!(body.iter().all(|l| l.split('\t').count() == 4));
        assert_eq!(read_table(dir.path()).unwrap(), table);
    }

    #[test]
    fn read_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let table = aggregate(stamp(), [cat("Lyon", "est une ville")]);
        write_table(&table, dir.path()).unwrap();
        let path = dir.path().join(CATEGORY_FILE);
        let good = fs::read_to_string(&path).unwrap();

        for (bad_row, needle) in [
            ("Lyon\tR\tx\t0", "positive"),
            ("Lyon\tR\tx\t-3", "positive"),
            ("Lyon\tR\tx", "4 tab-separated"),
            ("Lyon\tQ\tx\t2", "side"),
            ("Lyon\tR\tx\tmany", "integer"),
        ] {
            fs::write(&path, format!("{good}{bad_row}\n")).unwrap();
            match read_table(dir.path()) {
                Err(AllPairsError::Malformed { line, message, .. }) => {
                    assert_eq!(line, 3, "{bad_row}");
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("expected malformed for {bad_row:?}, got {other:?}"),
            }
        }
        fs::write(&path, "Lyon\tR\tx\t2\n").unwrap();
        assert!(matches!(
            read_table(dir.path()),
            Err(AllPairsError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn fingerprint_text_round_trip() {
        let f = Fingerprint::of_document("a.txt", "hello");
        assert_eq!(f.to_string().parse::<Fingerprint>().unwrap(), f);
        assert_eq!(Fingerprint::default().combine(f), f);
    }
}

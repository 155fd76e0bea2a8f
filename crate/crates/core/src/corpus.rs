//! Corpus ingestion: documents, sentences, tokens and entity mentions.
//!
//! Everything downstream keys on verbatim strings, so nothing in this module
//! ever normalizes, lowercases or stems the text it hands out. Case folding is
//! only used internally for gazetteer lookups when a profile asks for it.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("cannot walk corpus directory: {0}")]
    Walk(#[from] walkdir::Error),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{path} is not valid UTF-8 (first bad byte at offset {offset}); skipped")]
    NotUtf8 { path: PathBuf, offset: usize },
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("cannot read profile {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("malformed profile: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("unknown built-in profile {0:?} (known: en, fr, pt)")]
    Unknown(String),
}

/// Per-language extraction settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageProfile {
    pub name: String,
    /// Shortest category pattern, in tokens.
    pub min_gram: usize,
    /// Longest category pattern, in tokens.
    pub max_gram: usize,
    /// Longest token gap allowed between the two entities of a relation.
    pub max_relation_gap: usize,
    /// Lowercase words allowed strictly inside a capitalized entity run.
    pub connector_words: BTreeSet<String>,
    pub sentence_terminators: BTreeSet<char>,
    pub case_sensitive_matching: bool,
}

impl LanguageProfile {
    pub fn builtin(name: &str) -> Result<Self, ProfileError> {
        let (min_gram, max_gram, connectors): (usize, usize, &[&str]) = match name {
            "en" => (5, 5, &["of", "de", "van", "von", "der"]),
            "fr" => (3, 5, &["de", "du", "des", "la", "le", "sur"]),
            "pt" => (3, 5, &["de", "da", "do", "das", "dos"]),
            other => return Err(ProfileError::Unknown(other.to_string())),
        };
        Ok(LanguageProfile {
            name: name.to_string(),
            min_gram,
            max_gram,
            max_relation_gap: 10,
            connector_words: connectors.iter().map(|w| w.to_string()).collect(),
            sentence_terminators: ['.', '!', '?', '…'].into_iter().collect(),
            case_sensitive_matching: true,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ProfileError> {
        let profile: LanguageProfile = toml::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = fs::read_to_string(path).map_err(|source| ProfileError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Resolves either a built-in profile name or a path to a profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        let path = Path::new(name_or_path);
        if path.is_file() {
            Self::load(path)
        } else {
            Self::builtin(name_or_path)
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.name.trim().is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(ProfileError::Invalid(format!(
                "name {:?} must be a non-empty identifier",
                self.name
            )));
        }
        if self.min_gram == 0 || self.min_gram > self.max_gram {
            return Err(ProfileError::Invalid(format!(
                "need 1 <= min_gram <= max_gram, got min_gram={} max_gram={}",
                self.min_gram, self.max_gram
            )));
        }
        if self.max_relation_gap == 0 {
            return Err(ProfileError::Invalid("max_relation_gap must be >= 1".into()));
        }
        if let Some(w) = self
            .connector_words
            .iter()
            .find(|w| w.is_empty() || w.chars().any(|c| c.is_whitespace() || c.is_uppercase()))
        {
            return Err(ProfileError::Invalid(format!(
                "connector word {w:?} must be a single lowercase token"
            )));
        }
        if let Some(c) = self.sentence_terminators.iter().find(|c| c.is_whitespace()) {
            return Err(ProfileError::Invalid(format!(
                "sentence terminator {c:?} cannot be whitespace"
            )));
        }
        Ok(())
    }
}

/// One input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    /// Path relative to the corpus root, `/`-separated.
    pub doc_id: String,
    pub text: String,
}

/// Yields every `.txt` file under `root`, ordered by relative path.
///
/// Failures are reported per file; the iterator keeps going after them.
pub fn load_corpus(root: &Path) -> Result<CorpusReader, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::MissingRoot(root.to_path_buf()));
    }
    let mut pending = Vec::new();
    let mut errors = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(true) {
        match entry {
            Ok(entry) => {
                let path = entry.path();
                if !entry.file_type().is_file()
                    || path.extension().and_then(|e| e.to_str()) != Some("txt")
                {
                    continue;
                }
                let rel = path.strip_prefix(root).unwrap_or(path);
                let doc_id = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                pending.push((doc_id, path.to_path_buf()));
            }
            Err(e) => errors.push(CorpusError::Walk(e)),
        }
    }
    pending.sort();
    pending.reverse();
    Ok(CorpusReader { pending, errors })
}

pub struct CorpusReader {
    // reversed so that `pop` yields in ascending order
    pending: Vec<(String, PathBuf)>,
    errors: Vec<CorpusError>,
}

impl Iterator for CorpusReader {
    type Item = Result<Document, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(err) = self.errors.pop() {
            return Some(Err(err));
        }
        let (doc_id, path) = self.pending.pop()?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(source) => return Some(Err(CorpusError::Read { path, source })),
        };
        Some(match String::from_utf8(bytes) {
            Ok(text) => Ok(Document { doc_id, text }),
            Err(e) => Err(CorpusError::NotUtf8 {
                path,
                offset: e.utf8_error().valid_up_to(),
            }),
        })
    }
}

/// Byte ranges of the sentences of `document`, whitespace-trimmed.
pub fn sentence_spans(document: &str, profile: &LanguageProfile) -> Vec<std::ops::Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut chars = document.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !profile.sentence_terminators.contains(&c) {
            continue;
        }
        let end = i + c.len_utf8();
        let at_boundary = match chars.peek() {
            Some(&(_, next)) => next.is_whitespace(),
            None => true,
        };
        if at_boundary {
            push_trimmed(document, start..end, &mut spans);
            start = end;
        }
    }
    push_trimmed(document, start..document.len(), &mut spans);
    spans
}

fn push_trimmed(text: &str, range: std::ops::Range<usize>, out: &mut Vec<std::ops::Range<usize>>) {
    let piece = &text[range.clone()];
    let lead = piece.len() - piece.trim_start().len();
    let trimmed = piece.trim();
    if !trimmed.is_empty() {
        let s = range.start + lead;
        out.push(s..s + trimmed.len());
    }
}

/// Splits after any terminator that is followed by whitespace (or ends the text).
///
/// Abbreviations such as "St." oversplit; nothing tries to detect them.
pub fn split_sentences<'a>(document: &'a str, profile: &LanguageProfile) -> Vec<&'a str> {
    sentence_spans(document, profile)
        .into_iter()
        .map(|r| &document[r])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    /// Byte offset of the token inside the sentence's raw text.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub doc_id: String,
    pub sentence_index: usize,
    pub raw_text: String,
    pub tokens: Vec<Token>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i].text
    }

    /// Space-joined text of tokens `start..end`.
    pub fn join(&self, start: usize, end: usize) -> String {
        let mut out = String::new();
        for (k, tok) in self.tokens[start..end].iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            out.push_str(&tok.text);
        }
        out
    }
}

/// Characters split off the edges of a whitespace run.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '«' | '»' | '¡' | '¿' | '·' | '§' | '¶')
        || ('\u{2010}'..='\u{2027}').contains(&c)
        || ('\u{2030}'..='\u{205E}').contains(&c)
        || ('\u{3000}'..='\u{303F}').contains(&c)
}

/// True for tokens made only of punctuation characters.
pub fn is_punctuation_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punctuation)
}

/// Whitespace tokenization with leading and trailing punctuation split off,
/// one token per punctuation character. Inner punctuation ("Saint-Etienne",
/// "l'homme", "U.S") stays attached.
pub fn tokenize(sentence: &str, doc_id: &str, sentence_index: usize) -> TokenizedSentence {
    let mut tokens = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, c) in sentence.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = run_start.take() {
                split_run(sentence, s, i, &mut tokens);
            }
        } else if run_start.is_none() {
            run_start = Some(i);
        }
    }
    if let Some(s) = run_start {
        split_run(sentence, s, sentence.len(), &mut tokens);
    }
    TokenizedSentence {
        doc_id: doc_id.to_string(),
        sentence_index,
        raw_text: sentence.to_string(),
        tokens,
    }
}

fn split_run(text: &str, start: usize, end: usize, out: &mut Vec<Token>) {
    let run = &text[start..end];
    let mut lead = Vec::new();
    let mut core_start = 0;
    for (i, c) in run.char_indices() {
        if is_punctuation(c) {
            lead.push((i, c.len_utf8()));
            core_start = i + c.len_utf8();
        } else {
            break;
        }
    }
    let mut trail = Vec::new();
    let mut core_end = run.len();
    if core_start < run.len() {
        for (i, c) in run[core_start..].char_indices().rev() {
            if is_punctuation(c) {
                trail.push((core_start + i, c.len_utf8()));
                core_end = core_start + i;
            } else {
                break;
            }
        }
    }
    let push = |out: &mut Vec<Token>, s: usize, e: usize| {
        out.push(Token {
            text: run[s..e].to_string(),
            offset: start + s,
        })
    };
    for (i, len) in lead {
        push(out, i, i + len);
    }
    if core_start < core_end {
        push(out, core_start, core_end);
    }
    for (i, len) in trail.into_iter().rev() {
        push(out, i, i + len);
    }
}

/// An entity candidate inside a tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityMention {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub surface: String,
}

impl EntityMention {
    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Known entity surfaces, indexed by first token.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    surfaces: BTreeSet<String>,
    exact: HashMap<String, Vec<Vec<String>>>,
    folded: HashMap<String, Vec<Vec<String>>>,
}

impl Gazetteer {
    pub fn new<I, S>(surfaces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut gazetteer = Gazetteer::default();
        for s in surfaces {
            gazetteer.insert(s.as_ref());
        }
        gazetteer
    }

    pub fn insert(&mut self, surface: &str) {
        let parts: Vec<String> = surface.split_whitespace().map(str::to_string).collect();
        if parts.is_empty() || !self.surfaces.insert(parts.join(" ")) {
            return;
        }
        let folded: Vec<String> = parts.iter().map(|p| p.to_lowercase()).collect();
        self.exact.entry(parts[0].clone()).or_default().push(parts);
        self.folded.entry(folded[0].clone()).or_default().push(folded);
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.surfaces.iter().map(String::as_str)
    }

    fn matches_at(&self, sentence: &TokenizedSentence, at: usize, case_sensitive: bool) -> Vec<usize> {
        let first = &sentence.tokens[at].text;
        let (index, key) = if case_sensitive {
            (&self.exact, first.clone())
        } else {
            (&self.folded, first.to_lowercase())
        };
        let Some(candidates) = index.get(&key) else {
            return Vec::new();
        };
        candidates
            .iter()
            .filter(|parts| {
                at + parts.len() <= sentence.len()
                    && parts.iter().enumerate().all(|(k, p)| {
                        let tok = &sentence.tokens[at + k].text;
                        if case_sensitive {
                            tok == p
                        } else {
                            tok.to_lowercase() == *p
                        }
                    })
            })
            .map(|parts| at + parts.len())
            .collect()
    }
}

fn is_capitalized(token: &str) -> bool {
    token.chars().next().is_some_and(char::is_uppercase)
}

/// Capitalized runs (with connector words allowed strictly inside) plus every
/// gazetteer hit. Results are sorted by span and deduplicated; spans may overlap.
pub fn identify_entities(
    sentence: &TokenizedSentence,
    profile: &LanguageProfile,
    gazetteer: &Gazetteer,
) -> Vec<EntityMention> {
    let mut spans: BTreeSet<(usize, usize)> = BTreeSet::new();
    let n = sentence.len();

    let mut i = 0;
    while i < n {
        if !is_capitalized(sentence.token(i)) {
            i += 1;
            continue;
        }
        let start = i;
        let mut end = i + 1;
        let mut j = end;
        loop {
            while j < n && profile.connector_words.contains(sentence.token(j)) {
                j += 1;
            }
            if j < n && is_capitalized(sentence.token(j)) {
                j += 1;
                end = j;
            } else {
                break;
            }
        }
        spans.insert((start, end));
        i = end;
    }

    if !gazetteer.is_empty() {
        for at in 0..n {
            for end in gazetteer.matches_at(sentence, at, profile.case_sensitive_matching) {
                spans.insert((at, end));
            }
        }
    }

    spans
        .into_iter()
        .map(|(start, end)| EntityMention {
            start,
            end,
            surface: sentence.join(start, end),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fr() -> LanguageProfile {
        LanguageProfile::builtin("fr").unwrap()
    }

    fn texts(s: &TokenizedSentence) -> Vec<&str> {
        s.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn builtin_profiles_have_expected_grams() {
        let en = LanguageProfile::builtin("en").unwrap();
        assert_eq!((en.min_gram, en.max_gram), (5, 5));
        for name in ["fr", "pt"] {
            let p = LanguageProfile::builtin(name).unwrap();
            assert_eq!((p.min_gram, p.max_gram), (3, 5));
            p.validate().unwrap();
        }
        assert!(matches!(
            LanguageProfile::builtin("xx"),
            Err(ProfileError::Unknown(_))
        ));
    }

    #[test]
    fn profile_toml_round_trip_and_validation() {
        let p = fr();
        let text = p.to_toml_string();
        assert_eq!(LanguageProfile::from_toml_str(&text).unwrap(), p);

        let bad = text.replace("min_gram = 3", "min_gram = 7");
        assert!(matches!(
            LanguageProfile::from_toml_str(&bad),
            Err(ProfileError::Invalid(_))
        ));
        let zero_gap = text.replace("max_relation_gap = 10", "max_relation_gap = 0");
        assert!(LanguageProfile::from_toml_str(&zero_gap).is_err());
        let unknown = format!("{text}\nbogus = 1\n");
        assert!(matches!(
            LanguageProfile::from_toml_str(&unknown),
            Err(ProfileError::Parse(_))
        ));
    }

    #[test]
    fn split_simple() {
        assert!(split_sentences("", &fr()).is_empty());
        assert!(split_sentences("   \n ", &fr()).is_empty());
        assert_eq!(split_sentences("A b. C d.", &fr()), vec!["A b.", "C d."]);
        assert_eq!(split_sentences("A b.C d", &fr()), vec!["A b.C d"]);
        assert_eq!(
            split_sentences("Quoi ? Oui !\n\nFin", &fr()),
            vec!["Quoi ?", "Oui !", "Fin"]
        );
    }

    #[test]
    fn split_oversplits_abbreviations() {
        assert_eq!(
            split_sentences("I went to St. Étienne today.", &fr()),
            vec!["I went to St.", "Étienne today."]
        );
    }

    #[test]
    fn tokenize_paper_sentence() {
        let s = tokenize("Located in USA, New York is a very famous city", "d", 0);
        assert_eq!(
            texts(&s),
            vec!["Located", "in", "USA", ",", "New", "York", "is", "a", "very", "famous", "city"]
        );
        for tok in &s.tokens {
            assert_eq!(&s.raw_text[tok.offset..tok.offset + tok.text.len()], tok.text);
        }
    }

    #[test]
    fn tokenize_edges() {
        assert_eq!(texts(&tokenize("a", "d", 0)), vec!["a"]);
        assert_eq!(
            texts(&tokenize("(Saint-Étienne), «l'été»...", "d", 0)),
            vec!["(", "Saint-Étienne", ")", ",", "«", "l'été", "»", ".", ".", "."]
        );
        assert_eq!(texts(&tokenize(" -- ", "d", 0)), vec!["-", "-"]);
        assert_eq!(texts(&tokenize("U.S.A. grew", "d", 0)), vec!["U.S.A", ".", "grew"]);
    }

    #[test]
    fn entities_capitalization_runs() {
        let s = tokenize("Located in USA, New York is a very famous city", "d", 0);
        let m = identify_entities(&s, &LanguageProfile::builtin("en").unwrap(), &Gazetteer::default());
        let surfaces: Vec<_> = m.iter().map(|m| m.surface.as_str()).collect();
        assert_eq!(surfaces, vec!["Located", "USA", "New York"]);
        assert_eq!((m[2].start, m[2].end), (4, 6));
    }

    #[test]
    fn entities_connectors_only_inside() {
        let pt = LanguageProfile::builtin("pt").unwrap();
        let s = tokenize("o Banco do Brasil de hoje", "d", 0);
        let m = identify_entities(&s, &pt, &Gazetteer::default());
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].surface, "Banco do Brasil");

        let s = tokenize("Pedro de la Torre e Maria", "d", 0);
        let got: Vec<_> = identify_entities(&s, &fr(), &Gazetteer::default())
            .into_iter()
            .map(|m| m.surface)
            .collect();
        assert_eq!(got, vec!["Pedro de la Torre", "Maria"]);
    }

    #[test]
    fn entities_lowercase_sentence() {
        let s = tokenize("tout est calme ici", "d", 0);
        assert!(identify_entities(&s, &fr(), &Gazetteer::default()).is_empty());
    }

    #[test]
    fn gazetteer_case_insensitive() {
        let mut p = LanguageProfile::builtin("pt").unwrap();
        p.case_sensitive_matching = false;
        let g = Gazetteer::new(["são paulo"]);
        let s = tokenize("eu moro em são paulo hoje", "d", 0);
        let m = identify_entities(&s, &p, &g);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].surface, "são paulo");

        let s = tokenize("eu moro em São Paulo hoje", "d", 0);
        let m = identify_entities(&s, &p, &Gazetteer::new(["são paulo"]));
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].surface, "São Paulo");

        p.case_sensitive_matching = true;
        let s = tokenize("eu moro em são paulo hoje", "d", 0);
        assert!(identify_entities(&s, &p, &Gazetteer::new(["São Paulo"])).is_empty());
    }

    #[test]
    fn gazetteer_overlaps_are_kept() {
        let en = LanguageProfile::builtin("en").unwrap();
        let g = Gazetteer::new(["New York", "York"]);
        let s = tokenize("he left New York City", "d", 0);
        let spans: Vec<_> = identify_entities(&s, &en, &g)
            .into_iter()
            .map(|m| (m.start, m.end, m.surface))
            .collect();
        assert_eq!(
            spans,
            vec![
                (2, 4, "New York".to_string()),
                (2, 5, "New York City".to_string()),
                (3, 4, "York".to_string()),
            ]
        );
    }

    #[test]
    fn gazetteer_dedups_surfaces() {
        let g = Gazetteer::new(["Paris", "  Paris ", "Lyon"]);
        assert_eq!(g.len(), 2);
    }
}

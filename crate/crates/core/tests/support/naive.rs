//! A deliberately slow reference implementation of the corpus indexing
//! rules, written from the rules themselves and sharing no logic with the
//! library beyond the punctuation character class.
//!
//! Sentences: cut after a terminator followed by whitespace or end of text,
//! trimmed, empties dropped. Tokens: whitespace runs, with each leading and
//! trailing punctuation character peeled off as its own token. Mentions: the
//! maximal spans that start and end on a capitalized token with only
//! capitalized tokens or connector words inside, plus every gazetteer hit.
//! Patterns: every n-gram window beside a mention and every token gap
//! between two ordered, non-overlapping, differently named mentions, skipping
//! windows with a punctuation-only token at either edge.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nell_core::corpus::{is_punctuation, LanguageProfile};

pub type CategoryCounts = BTreeMap<(String, char, String), u64>;
pub type RelationCounts = BTreeMap<(String, String, String), u64>;

pub fn sentences(text: &str, terminators: &BTreeSet<char>) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        current.push(c);
        let next_is_space_or_end = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if terminators.contains(&c) && next_is_space_or_end {
            out.push(std::mem::take(&mut current));
        }
    }
    out.push(current);
    out.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn tokens(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in sentence.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut lo = 0;
        while lo < chars.len() && is_punctuation(chars[lo]) {
            lo += 1;
        }
        let mut hi = chars.len();
        while hi > lo && is_punctuation(chars[hi - 1]) {
            hi -= 1;
        }
        for c in &chars[..lo] {
            out.push(c.to_string());
        }
        if lo < hi {
            out.push(chars[lo..hi].iter().collect());
        }
        for c in &chars[hi..] {
            out.push(c.to_string());
        }
    }
    out
}

fn capitalized(t: &str) -> bool {
    t.chars().next().is_some_and(|c| c.is_uppercase())
}

/// (start, end) spans, end exclusive.
pub fn mentions(toks: &[String], profile: &LanguageProfile, gazetteer: &[String]) -> BTreeSet<(usize, usize)> {
    let n = toks.len();
    let valid = |i: usize, j: usize| {
        capitalized(&toks[i])
            && capitalized(&toks[j - 1])
            && (i + 1..j.saturating_sub(1)).all(|k| capitalized(&toks[k]) || profile.connector_words.contains(&toks[k]))
    };
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..=n {
            if !valid(i, j) {
                continue;
            }
            let dominated = (0..=i).any(|a| (j..=n).any(|b| (a, b) != (i, j) && b > a && valid(a, b)));
            if !dominated {
                out.insert((i, j));
            }
        }
    }
    let fold = |s: &str| {
        if profile.case_sensitive_matching {
            s.to_string()
        } else {
            s.to_lowercase()
        }
    };
    for surface in gazetteer {
        let parts: Vec<String> = surface.split_whitespace().map(fold).collect();
        if parts.is_empty() {
            continue;
        }
        for i in 0..n {
            if i + parts.len() <= n && (0..parts.len()).all(|k| fold(&toks[i + k]) == parts[k]) {
                out.insert((i, i + parts.len()));
            }
        }
    }
    out
}

fn punct(t: &str) -> bool {
    t.chars().all(is_punctuation)
}

pub fn count(
    texts: &[&str],
    profile: &LanguageProfile,
    gazetteer: &[String],
) -> (CategoryCounts, RelationCounts) {
    let mut cats = CategoryCounts::new();
    let mut rels = RelationCounts::new();
    for text in texts {
        for s in sentences(text, &profile.sentence_terminators) {
            let toks = tokens(&s);
            let ms: Vec<(usize, usize)> = mentions(&toks, profile, gazetteer).into_iter().collect();
            let surface = |(a, b): (usize, usize)| toks[a..b].join(" ");
            for &(a, b) in &ms {
                for n in profile.min_gram..=profile.max_gram {
                    if a >= n {
                        let w = &toks[a - n..a];
                        if !punct(&w[0]) && !punct(&w[n - 1]) {
                            *cats.entry((surface((a, b)), 'L', w.join(" "))).or_default() += 1;
                        }
                    }
                    if b + n <= toks.len() {
                        let w = &toks[b..b + n];
                        if !punct(&w[0]) && !punct(&w[n - 1]) {
                            *cats.entry((surface((a, b)), 'R', w.join(" "))).or_default() += 1;
                        }
                    }
                }
            }
            for &x in &ms {
                for &y in &ms {
                    if x.1 > y.0 || surface(x) == surface(y) {
                        continue;
                    }
                    let gap = y.0 - x.1;
                    if gap == 0 || gap > profile.max_relation_gap {
                        continue;
                    }
                    let w = &toks[x.1..y.0];
                    if punct(&w[0]) || punct(&w[gap - 1]) {
                        continue;
                    }
                    *rels.entry((surface(x), surface(y), w.join(" "))).or_default() += 1;
                }
            }
        }
    }
    (cats, rels)
}

/// Random corpus: up to `max_sentences` sentences of up to `max_tokens`
/// words drawn from a small vocabulary with capitals, connectors and
/// punctuation, spread over a few documents.
pub fn random_corpus<R: rand::Rng>(rng: &mut R, max_sentences: usize, max_tokens: usize) -> Vec<String> {
    const LOWER: [&str; 10] = ["is", "a", "city", "near", "the", "big", "river", "of", "and", "est"];
    const UPPER: [&str; 10] = ["Paris", "Lyon", "São", "Paulo", "Saint", "Étienne", "France", "Brasil", "Nova", "Rio"];
    const CONNECT: [&str; 3] = ["de", "la", "do"];
    const PUNCT: [&str; 5] = [",", "(", ")", "\"", ";"];
    const TERM: [&str; 4] = [".", "!", "?", "…"];
    let sentences = rng.gen_range(0..=max_sentences);
    let docs = rng.gen_range(1..=4);
    let mut out = vec![String::new(); docs];
    for _ in 0..sentences {
        let len = rng.gen_range(1..=max_tokens);
        let mut words = Vec::new();
        for _ in 0..len {
            let mut w = match rng.gen_range(0..10) {
                0..=3 => LOWER[rng.gen_range(0..LOWER.len())].to_string(),
                4..=7 => UPPER[rng.gen_range(0..UPPER.len())].to_string(),
                8 => CONNECT[rng.gen_range(0..CONNECT.len())].to_string(),
                _ => PUNCT[rng.gen_range(0..PUNCT.len())].to_string(),
            };
            if rng.gen_bool(0.1) {
                w.push_str(PUNCT[rng.gen_range(0..PUNCT.len())]);
            }
            words.push(w);
        }
        let mut s = words.join(" ");
        s.push_str(TERM[rng.gen_range(0..TERM.len())]);
        let d = rng.gen_range(0..docs);
        if !out[d].is_empty() {
            out[d].push(if rng.gen_bool(0.8) { ' ' } else { '\n' });
        }
        out[d].push_str(&s);
    }
    out
}

//! N-Triples export.

use std::fmt::Write as _;

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use thiserror::Error;

use super::{Args, KnowledgeBase};

pub const RDF_TYPE: &str = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type";
pub const RDFS_LABEL: &str = "http://www.w3.org/2000/01/rdf-schema#label";

/// Everything but RFC 3986 unreserved characters.
const SEGMENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'.').remove(b'_').remove(b'~');

#[derive(Debug, Error)]
pub enum RdfError {
    #[error("invalid base IRI {base:?}: {reason}")]
    InvalidBase { base: String, reason: String },
}

fn check_base(base: &str) -> Result<&str, RdfError> {
    let bad = |reason: String| RdfError::InvalidBase {
        base: base.to_string(),
        reason,
    };
    if let Some(c) = base
        .chars()
        .find(|&c| c <= ' ' || matches!(c, '<' | '>' | '"' | '{' | '}' | '|' | '^' | '`' | '\\'))
    {
        return Err(bad(format!("character {c:?} is not allowed in an IRI")));
    }
    url::Url::parse(base).map_err(|e| bad(e.to_string()))?;
    Ok(base.trim_end_matches('/'))
}

fn enc(s: &str) -> String {
    utf8_percent_encode(s, SEGMENT).to_string()
}

pub fn instance_iri(base: &str, ne: &str) -> String {
    format!("{}/instance/{}", base.trim_end_matches('/'), enc(ne))
}

fn literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 || c == '\u{7f}' => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Sorted, deduplicated N-Triples for every non-rejected assertion.
pub fn export_rdf(kb: &KnowledgeBase, base_iri: &str) -> Result<String, RdfError> {
    let base = check_base(base_iri)?;
    let mut lines = Vec::new();
    for a in kb.assertions().filter(|a| a.status.is_true()) {
        match &a.args {
            Args::One(ne) => {
                let subject = instance_iri(base, ne);
                lines.push(format!(
                    "<{subject}> <{RDF_TYPE}> <{base}/category/{}> .",
                    enc(&a.predicate)
                ));
                lines.push(format!("<{subject}> <{RDFS_LABEL}> {} .", literal(ne)));
            }
            Args::Two(x, y) => lines.push(format!(
                "<{}> <{base}/relation/{}> <{}> .",
                instance_iri(base, x),
                enc(&a.predicate),
                instance_iri(base, y)
            )),
        }
    }
    lines.sort();
    lines.dedup();
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_space_and_accent() {
        assert_eq!(
            instance_iri("http://example.org/nell/", "Saint Étienne"),
            "http://example.org/nell/instance/Saint%20%C3%89tienne"
        );
    }

    #[test]
    fn literal_escapes() {
        assert_eq!(literal("a\"b\\c\nd\u{1}"), "\"a\\\"b\\\\c\\nd\\u0001\"");
        assert_eq!(literal("São Paulo"), "\"São Paulo\"");
    }

    #[test]
    fn rejects_bad_bases() {
        for base in ["not an iri", "relative/path", "http://x.org/<a>", ""] {
            assert!(check_base(base).is_err(), "{base}");
        }
        assert_eq!(check_base("http://x.org/kb/").unwrap(), "http://x.org/kb");
        assert!(check_base("urn:nell:pt").is_ok());
    }
}

//! Category and relation spreadsheets.
//!
//! Sheets are tab-separated with a header row. List cells use `|` between
//! items; relation seed pairs use `,` between the two arguments. Columns
//! outside the known schema are kept verbatim as annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::Gazetteer;
use crate::kbstore::{Args, KnowledgeBase};

pub const CATEGORY_SHEET: &str = "categories.tsv";
pub const RELATION_SHEET: &str = "relations.tsv";
pub const MAPPING_SHEET: &str = "mapping.tsv";

/// Seed counts outside this range draw a warning.
pub const RECOMMENDED_SEEDS: std::ops::RangeInclusive<usize> = 10..=15;

const CATEGORY_COLUMNS: [&str; 5] = ["name", "seeds", "human_format", "mutex_exceptions", "description"];
const CATEGORY_REQUIRED: [&str; 4] = ["name", "seeds", "human_format", "mutex_exceptions"];
const RELATION_COLUMNS: [&str; 8] = [
    "name",
    "domain",
    "range",
    "seeds",
    "human_format",
    "mutex_exceptions",
    "nr_values",
    "nr_inverse_values",
];

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{sheet}: missing required column `{column}`")]
    MissingColumn { sheet: String, column: String },
    #[error("{sheet}: duplicate predicate `{name}` on rows {first} and {second}")]
    DuplicateName {
        sheet: String,
        name: String,
        first: usize,
        second: usize,
    },
    #[error("{sheet}:{line}: {message}")]
    BadRow {
        sheet: String,
        line: usize,
        message: String,
    },
    #[error("ontology has {} validation error(s); first: {}", .0.errors().count(), .0.errors().next().map(|i| i.to_string()).unwrap_or_default())]
    Invalid(ValidationReport),
}

/// Relation cardinality: how many values one argument may have.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cardinality {
    One,
    Many,
}

impl Cardinality {
    pub fn parse(cell: &str) -> Result<Self, String> {
        match cell.trim() {
            "1" => Ok(Cardinality::One),
            "N" | "n" => Ok(Cardinality::Many),
            other => Err(format!("cardinality must be 1 or N, got {other:?}")),
        }
    }
}

impl fmt::Display for Cardinality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cardinality::One => "1",
            Cardinality::Many => "N",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CategorySpec {
    pub name: String,
    pub seeds: Vec<String>,
    /// Display template, `X` stands for the instance.
    pub human_format: String,
    /// Categories this one is *not* mutually exclusive with.
    pub mutex_exceptions: BTreeSet<String>,
    pub description: String,
    pub annotations: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSpec {
    pub name: String,
    pub domain: String,
    pub range: String,
    pub seeds: Vec<(String, String)>,
    /// Display template with `X` (left argument) and `Y` (right argument).
    pub human_format: String,
    pub mutex_exceptions: BTreeSet<String>,
    /// Values the right argument may take for one left argument.
    pub nr_values: Cardinality,
    /// Values the left argument may take for one right argument.
    pub nr_inverse_values: Cardinality,
    pub annotations: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PredicateKind {
    Category,
    Relation,
}

impl PredicateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PredicateKind::Category => "category",
            PredicateKind::Relation => "relation",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            PredicateKind::Category => 1,
            PredicateKind::Relation => 2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ontology {
    pub categories: BTreeMap<String, CategorySpec>,
    pub relations: BTreeMap<String, RelationSpec>,
    /// Sheet line numbers, when loaded from files.
    lines: BTreeMap<(PredicateKind, String), usize>,
}

impl PartialEq for Ontology {
    fn eq(&self, other: &Self) -> bool {
        self.categories == other.categories && self.relations == other.relations
    }
}

impl Eq for Ontology {}

impl Ontology {
    /// Later duplicates overwrite earlier ones; use the sheet parsers to get
    /// duplicate detection.
    pub fn new(categories: Vec<CategorySpec>, relations: Vec<RelationSpec>) -> Self {
        Ontology {
            categories: categories.into_iter().map(|c| (c.name.clone(), c)).collect(),
            relations: relations.into_iter().map(|r| (r.name.clone(), r)).collect(),
            lines: BTreeMap::new(),
        }
    }

    fn from_rows(categories: Vec<Row<CategorySpec>>, relations: Vec<Row<RelationSpec>>) -> Self {
        let mut lines = BTreeMap::new();
        for r in &categories {
            lines.insert((PredicateKind::Category, r.spec.name.clone()), r.line);
        }
        for r in &relations {
            lines.insert((PredicateKind::Relation, r.spec.name.clone()), r.line);
        }
        let mut ontology = Ontology::new(
            categories.into_iter().map(|r| r.spec).collect(),
            relations.into_iter().map(|r| r.spec).collect(),
        );
        ontology.lines = lines;
        ontology
    }

    pub fn kind_of(&self, predicate: &str) -> Option<PredicateKind> {
        if self.categories.contains_key(predicate) {
            Some(PredicateKind::Category)
        } else if self.relations.contains_key(predicate) {
            Some(PredicateKind::Relation)
        } else {
            None
        }
    }

    pub fn human_format(&self, predicate: &str) -> Option<&str> {
        self.categories
            .get(predicate)
            .map(|c| c.human_format.as_str())
            .or_else(|| self.relations.get(predicate).map(|r| r.human_format.as_str()))
    }

    /// Every predicate name, categories first, each group sorted.
    pub fn predicates(&self) -> impl Iterator<Item = (&str, PredicateKind)> {
        self.categories
            .keys()
            .map(|n| (n.as_str(), PredicateKind::Category))
            .chain(self.relations.keys().map(|n| (n.as_str(), PredicateKind::Relation)))
    }

    fn exceptions(&self, kind: PredicateKind, name: &str) -> Option<&BTreeSet<String>> {
        match kind {
            PredicateKind::Category => self.categories.get(name).map(|c| &c.mutex_exceptions),
            PredicateKind::Relation => self.relations.get(name).map(|r| &r.mutex_exceptions),
        }
    }

    /// Two distinct predicates of the same kind exclude each other unless
    /// either lists the other as an exception.
    pub fn mutually_exclusive(&self, a: &str, b: &str) -> bool {
        if a == b {
            return false;
        }
        let (Some(ka), Some(kb)) = (self.kind_of(a), self.kind_of(b)) else {
            return false;
        };
        if ka != kb {
            return false;
        }
        let excepted = |x: &str, y: &str| self.exceptions(ka, x).is_some_and(|e| e.contains(y));
        !(excepted(a, b) || excepted(b, a))
    }

    /// Makes mutex exceptions symmetric. Returns the (from, to) pairs added.
    pub fn close_mutex_symmetry(&mut self) -> Vec<(String, String)> {
        let mut added = Vec::new();
        let cat_pairs: Vec<(String, String)> = self
            .categories
            .values()
            .flat_map(|c| c.mutex_exceptions.iter().map(|e| (c.name.clone(), e.clone())))
            .collect();
        for (a, b) in cat_pairs {
            if let Some(target) = self.categories.get_mut(&b) {
                if a != b && target.mutex_exceptions.insert(a.clone()) {
                    added.push((b, a));
                }
            }
        }
        let rel_pairs: Vec<(String, String)> = self
            .relations
            .values()
            .flat_map(|r| r.mutex_exceptions.iter().map(|e| (r.name.clone(), e.clone())))
            .collect();
        for (a, b) in rel_pairs {
            if let Some(target) = self.relations.get_mut(&b) {
                if a != b && target.mutex_exceptions.insert(a.clone()) {
                    added.push((b, a));
                }
            }
        }
        added
    }

    /// Every distinct seed surface, category seeds and relation arguments alike.
    pub fn seed_surfaces(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in self.categories.values() {
            out.extend(c.seeds.iter().cloned());
        }
        for r in self.relations.values() {
            for (a, b) in &r.seeds {
                out.insert(a.clone());
                out.insert(b.clone());
            }
        }
        out
    }

    pub fn gazetteer(&self) -> Gazetteer {
        Gazetteer::new(self.seed_surfaces())
    }

    pub fn validate(&self) -> ValidationReport {
        validate_ontology(self)
    }

    fn line(&self, kind: PredicateKind, name: &str) -> Option<usize> {
        self.lines.get(&(kind, name.to_string())).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Error,
    Warning,
    Notice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub severity: Severity,
    pub predicate: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
            Severity::Notice => "notice",
        };
        write!(f, "{tag}")?;
        if let Some(line) = self.line {
            write!(f, " (row {line})")?;
        }
        if let Some(p) = &self.predicate {
            write!(f, " [{p}]")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn push(&mut self, severity: Severity, predicate: Option<&str>, line: Option<usize>, message: String) {
        self.issues.push(Issue {
            severity,
            predicate: predicate.map(str::to_string),
            line,
            message,
        });
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn notices(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Notice)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.issues.extend(other.issues);
    }
}

fn count_placeholder(format: &str, placeholder: char) -> usize {
    format.chars().filter(|&c| c == placeholder).count()
}

pub fn validate_ontology(ontology: &Ontology) -> ValidationReport {
    use PredicateKind::{Category, Relation};
    let mut report = ValidationReport::default();

    for (name, c) in &ontology.categories {
        let line = ontology.line(Category, name);
        if ontology.relations.contains_key(name) {
            report.push(
                Severity::Error,
                Some(name),
                line,
                "name is used by both a category and a relation".into(),
            );
        }
        if count_placeholder(&c.human_format, 'X') != 1 {
            report.push(
                Severity::Error,
                Some(name),
                line,
                format!("human format {:?} must contain exactly one X", c.human_format),
            );
        }
        check_seed_count(&mut report, name, line, c.seeds.len());
        check_duplicates(&mut report, name, line, c.seeds.iter());
        check_exceptions(&mut report, ontology, Category, name, line, &c.mutex_exceptions);
    }

    for (name, r) in &ontology.relations {
        let line = ontology.line(Relation, name);
        if count_placeholder(&r.human_format, 'X') != 1 || count_placeholder(&r.human_format, 'Y') != 1 {
            report.push(
                Severity::Error,
                Some(name),
                line,
                format!("human format {:?} must contain exactly one X and one Y", r.human_format),
            );
        }
        for (column, category) in [("domain", &r.domain), ("range", &r.range)] {
            if !ontology.categories.contains_key(category) {
                report.push(
                    Severity::Error,
                    Some(name),
                    line,
                    format!("{column} refers to undefined category `{category}`"),
                );
            }
        }
        check_seed_count(&mut report, name, line, r.seeds.len());
        check_duplicates(&mut report, name, line, r.seeds.iter());
        check_exceptions(&mut report, ontology, Relation, name, line, &r.mutex_exceptions);
        check_seed_cardinality(&mut report, r, line);
    }

    check_seed_conflicts(&mut report, ontology);
    report
}

fn check_seed_count(report: &mut ValidationReport, name: &str, line: Option<usize>, n: usize) {
    if !RECOMMENDED_SEEDS.contains(&n) {
        report.push(
            Severity::Warning,
            Some(name),
            line,
            format!(
                "{n} seed(s); {}-{} examples per predicate are recommended",
                RECOMMENDED_SEEDS.start(),
                RECOMMENDED_SEEDS.end()
            ),
        );
    }
}

fn check_duplicates<'a, T: Ord + fmt::Debug + 'a>(
    report: &mut ValidationReport,
    name: &str,
    line: Option<usize>,
    seeds: impl Iterator<Item = &'a T>,
) {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for s in seeds {
        if !seen.insert(s) {
            dups.insert(s);
        }
    }
    for d in dups {
        report.push(Severity::Warning, Some(name), line, format!("duplicate seed {d:?}"));
    }
}

fn check_exceptions(
    report: &mut ValidationReport,
    ontology: &Ontology,
    kind: PredicateKind,
    name: &str,
    line: Option<usize>,
    exceptions: &BTreeSet<String>,
) {
    let noun = match kind {
        PredicateKind::Category => "category",
        PredicateKind::Relation => "relation",
    };
    for e in exceptions {
        if e == name {
            report.push(
                Severity::Warning,
                Some(name),
                line,
                "lists itself as a mutex exception".into(),
            );
            continue;
        }
        match ontology.exceptions(kind, e) {
            None => report.push(
                Severity::Error,
                Some(name),
                line,
                format!("mutex exception names undefined {noun} `{e}`"),
            ),
            Some(back) if !back.contains(name) => report.push(
                Severity::Notice,
                Some(name),
                line,
                format!("mutex exception with `{e}` is one-sided; adding `{name}` to `{e}`"),
            ),
            Some(_) => {}
        }
    }
}

fn check_seed_cardinality(report: &mut ValidationReport, r: &RelationSpec, line: Option<usize>) {
    let mut check = |card: Cardinality, pick: fn(&(String, String)) -> (&str, &str), what: &str| {
        if card != Cardinality::One {
            return;
        }
        let mut values: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for pair in &r.seeds {
            let (key, value) = pick(pair);
            values.entry(key).or_default().insert(value);
        }
        for (key, vals) in values.into_iter().filter(|(_, v)| v.len() > 1) {
            report.push(
                Severity::Warning,
                Some(&r.name),
                line,
                format!("seeds give {what} `{key}` {} values but cardinality is 1", vals.len()),
            );
        }
    };
    check(r.nr_values, |(a, b)| (a.as_str(), b.as_str()), "left argument");
    check(r.nr_inverse_values, |(a, b)| (b.as_str(), a.as_str()), "right argument");
}

fn check_seed_conflicts(report: &mut ValidationReport, ontology: &Ontology) {
    let mut owners: BTreeMap<Args, BTreeSet<&str>> = BTreeMap::new();
    for c in ontology.categories.values() {
        for s in &c.seeds {
            owners.entry(Args::One(s.clone())).or_default().insert(&c.name);
        }
    }
    for r in ontology.relations.values() {
        for (a, b) in &r.seeds {
            owners
                .entry(Args::Two(a.clone(), b.clone()))
                .or_default()
                .insert(&r.name);
        }
    }
    for (args, preds) in owners {
        let preds: Vec<&str> = preds.into_iter().collect();
        for (i, a) in preds.iter().enumerate() {
            for b in &preds[i + 1..] {
                if ontology.mutually_exclusive(a, b) {
                    report.push(
                        Severity::Warning,
                        Some(a),
                        None,
                        format!("seed {args} also seeds `{b}`, which is mutually exclusive with `{a}`"),
                    );
                }
            }
        }
    }
}

struct Row<T> {
    line: usize,
    spec: T,
}

struct Sheet<'a> {
    name: &'a str,
    columns: BTreeMap<String, usize>,
    header: Vec<String>,
}

impl Sheet<'_> {
    fn cell<'r>(&self, row: &[&'r str], column: &str) -> &'r str {
        self.columns
            .get(column)
            .and_then(|&i| row.get(i))
            .map(|c| c.trim())
            .unwrap_or("")
    }

    fn annotations(&self, row: &[&str], known: &[&str]) -> BTreeMap<String, String> {
        self.header
            .iter()
            .enumerate()
            .filter(|(_, h)| !known.contains(&h.as_str()))
            .map(|(i, h)| (h.clone(), row.get(i).copied().unwrap_or("").to_string()))
            .collect()
    }
}

fn split_list(cell: &str) -> Vec<String> {
    cell.split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_rows<T>(
    sheet_name: &str,
    text: &str,
    required: &[&str],
    mut build: impl FnMut(&Sheet, &[&str]) -> Result<T, String>,
    name_of: impl Fn(&T) -> &str,
) -> Result<Vec<Row<T>>, OntologyError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header_line)) = lines.next() else {
        return Err(OntologyError::MissingColumn {
            sheet: sheet_name.into(),
            column: required[0].into(),
        });
    };
    let header: Vec<String> = header_line.split('\t').map(|h| h.trim().to_string()).collect();
    let columns: BTreeMap<String, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.clone(), i))
        .collect();
    for col in required {
        if !columns.contains_key(*col) {
            return Err(OntologyError::MissingColumn {
                sheet: sheet_name.into(),
                column: (*col).into(),
            });
        }
    }
    let sheet = Sheet {
        name: sheet_name,
        columns,
        header,
    };
    let mut rows = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let bad = |message: String| OntologyError::BadRow {
            sheet: sheet.name.into(),
            line: lineno,
            message,
        };
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() > sheet.header.len() {
            return Err(bad(format!(
                "{} cells but the header has {} columns",
                cells.len(),
                sheet.header.len()
            )));
        }
        if sheet.cell(&cells, "name").is_empty() {
            return Err(bad("empty predicate name".into()));
        }
        let spec = build(&sheet, &cells).map_err(bad)?;
        let name = name_of(&spec).to_string();
        if let Some(&first) = seen.get(&name) {
            return Err(OntologyError::DuplicateName {
                sheet: sheet.name.into(),
                name,
                first,
                second: lineno,
            });
        }
        seen.insert(name, lineno);
        rows.push(Row { line: lineno, spec });
    }
    Ok(rows)
}

fn category_rows(sheet_name: &str, text: &str) -> Result<Vec<Row<CategorySpec>>, OntologyError> {
    parse_rows(
        sheet_name,
        text,
        &CATEGORY_REQUIRED,
        |sheet, cells| {
            Ok(CategorySpec {
                name: sheet.cell(cells, "name").to_string(),
                seeds: split_list(sheet.cell(cells, "seeds")),
                human_format: sheet.cell(cells, "human_format").to_string(),
                mutex_exceptions: split_list(sheet.cell(cells, "mutex_exceptions"))
                    .into_iter()
                    .collect(),
                description: sheet.cell(cells, "description").to_string(),
                annotations: sheet.annotations(cells, &CATEGORY_COLUMNS),
            })
        },
        |c| &c.name,
    )
}

fn relation_rows(sheet_name: &str, text: &str) -> Result<Vec<Row<RelationSpec>>, OntologyError> {
    parse_rows(
        sheet_name,
        text,
        &RELATION_COLUMNS,
        |sheet, cells| {
            let seeds = split_list(sheet.cell(cells, "seeds"))
                .into_iter()
                .map(|item| match item.split(',').collect::<Vec<_>>()[..] {
                    [a, b] if !a.trim().is_empty() && !b.trim().is_empty() => {
                        Ok((a.trim().to_string(), b.trim().to_string()))
                    }
                    _ => Err(format!("seed {item:?} is not a `left,right` pair")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(RelationSpec {
                name: sheet.cell(cells, "name").to_string(),
                domain: sheet.cell(cells, "domain").to_string(),
                range: sheet.cell(cells, "range").to_string(),
                seeds,
                human_format: sheet.cell(cells, "human_format").to_string(),
                mutex_exceptions: split_list(sheet.cell(cells, "mutex_exceptions"))
                    .into_iter()
                    .collect(),
                nr_values: Cardinality::parse(sheet.cell(cells, "nr_values"))
                    .map_err(|e| format!("nr_values: {e}"))?,
                nr_inverse_values: Cardinality::parse(sheet.cell(cells, "nr_inverse_values"))
                    .map_err(|e| format!("nr_inverse_values: {e}"))?,
                annotations: sheet.annotations(cells, &RELATION_COLUMNS),
            })
        },
        |r| &r.name,
    )
}

pub fn parse_category_sheet(text: &str) -> Result<Vec<CategorySpec>, OntologyError> {
    Ok(category_rows(CATEGORY_SHEET, text)?
        .into_iter()
        .map(|r| r.spec)
        .collect())
}

pub fn parse_relation_sheet(text: &str) -> Result<Vec<RelationSpec>, OntologyError> {
    Ok(relation_rows(RELATION_SHEET, text)?
        .into_iter()
        .map(|r| r.spec)
        .collect())
}

fn annotation_columns<'a>(maps: impl Iterator<Item = &'a BTreeMap<String, String>>) -> Vec<String> {
    let mut cols = BTreeSet::new();
    for m in maps {
        cols.extend(m.keys().cloned());
    }
    cols.into_iter().collect()
}

fn join_set(set: &BTreeSet<String>) -> String {
    set.iter().cloned().collect::<Vec<_>>().join("|")
}

pub fn write_category_sheet(specs: &[CategorySpec], mut out: impl Write) -> io::Result<()> {
    let extra = annotation_columns(specs.iter().map(|c| &c.annotations));
    let header: Vec<&str> = CATEGORY_COLUMNS
        .iter()
        .copied()
        .chain(extra.iter().map(String::as_str))
        .collect();
    writeln!(out, "{}", header.join("\t"))?;
    for c in specs {
        let mut cells = vec![
            c.name.clone(),
            c.seeds.join("|"),
            c.human_format.clone(),
            join_set(&c.mutex_exceptions),
            c.description.clone(),
        ];
        cells.extend(extra.iter().map(|k| c.annotations.get(k).cloned().unwrap_or_default()));
        writeln!(out, "{}", cells.join("\t"))?;
    }
    Ok(())
}

pub fn write_relation_sheet(specs: &[RelationSpec], mut out: impl Write) -> io::Result<()> {
    let extra = annotation_columns(specs.iter().map(|r| &r.annotations));
    let header: Vec<&str> = RELATION_COLUMNS
        .iter()
        .copied()
        .chain(extra.iter().map(String::as_str))
        .collect();
    writeln!(out, "{}", header.join("\t"))?;
    for r in specs {
        let seeds: Vec<String> = r.seeds.iter().map(|(a, b)| format!("{a},{b}")).collect();
        let mut cells = vec![
            r.name.clone(),
            r.domain.clone(),
            r.range.clone(),
            seeds.join("|"),
            r.human_format.clone(),
            join_set(&r.mutex_exceptions),
            r.nr_values.to_string(),
            r.nr_inverse_values.to_string(),
        ];
        cells.extend(extra.iter().map(|k| r.annotations.get(k).cloned().unwrap_or_default()));
        writeln!(out, "{}", cells.join("\t"))?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, OntologyError> {
    fs::read_to_string(path).map_err(|source| OntologyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads `categories.tsv` (and `relations.tsv` when present) from `dir`,
/// validates, and closes mutex exceptions under symmetry.
///
/// Parse failures are errors; semantic problems land in the report.
pub fn load_ontology_dir(dir: &Path) -> Result<(Ontology, ValidationReport), OntologyError> {
    let cat_path = dir.join(CATEGORY_SHEET);
    let categories = category_rows(&cat_path.display().to_string(), &read(&cat_path)?)?;
    let rel_path = dir.join(RELATION_SHEET);
    let relations = if rel_path.exists() {
        relation_rows(&rel_path.display().to_string(), &read(&rel_path)?)?
    } else {
        Vec::new()
    };
    let mut ontology = Ontology::from_rows(categories, relations);
    let report = ontology.validate();
    ontology.close_mutex_symmetry();
    Ok((ontology, report))
}

/// Seeds the knowledge base: one `seed` assertion per distinct seed.
pub fn build_initial_kb(ontology: Ontology) -> Result<KnowledgeBase, OntologyError> {
    let mut ontology = ontology;
    ontology.close_mutex_symmetry();
    let report = ontology.validate();
    if report.has_errors() {
        return Err(OntologyError::Invalid(report));
    }
    Ok(KnowledgeBase::seeded(ontology))
}

pub fn parse_mapping(text: &str) -> Result<Vec<(String, String)>, OntologyError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split('\t').map(str::trim).collect::<Vec<_>>()[..] {
            ["source_name", "target_name"] => {}
            [s, t] if !s.is_empty() && !t.is_empty() => out.push((s.to_string(), t.to_string())),
            _ => {
                return Err(OntologyError::BadRow {
                    sheet: MAPPING_SHEET.into(),
                    line: idx + 1,
                    message: "expected `source_name<TAB>target_name`".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Checks that a mapped ontology covers every source predicate with a
/// target predicate of the same kind.
pub fn validate_mapping(
    source: &Ontology,
    target: &Ontology,
    mapping: &[(String, String)],
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut mapped: BTreeMap<&str, &str> = BTreeMap::new();
    for (s, t) in mapping {
        if let Some(prev) = mapped.insert(s, t) {
            report.push(
                Severity::Error,
                Some(s),
                None,
                format!("mapped twice (`{prev}` and `{t}`)"),
            );
        }
        match (source.kind_of(s), target.kind_of(t)) {
            (None, _) => report.push(
                Severity::Error,
                Some(s),
                None,
                "source predicate is not in the source ontology".into(),
            ),
            (_, None) => report.push(
                Severity::Error,
                Some(s),
                None,
                format!("target `{t}` is not in the target ontology"),
            ),
            (Some(a), Some(b)) if a != b => report.push(
                Severity::Error,
                Some(s),
                None,
                format!("maps to `{t}`, a predicate of a different kind"),
            ),
            _ => {}
        }
    }
    for (name, _) in source.predicates() {
        if !mapped.contains_key(name) {
            report.push(Severity::Error, Some(name), None, "not mapped".into());
        }
    }
    let targets: BTreeSet<&str> = mapped.values().copied().collect();
    for (name, _) in target.predicates() {
        if !targets.contains(name) {
            report.push(
                Severity::Warning,
                Some(name),
                None,
                "target predicate has no source".into(),
            );
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAT_HEADER: &str = "name\tseeds\thuman_format\tmutex_exceptions\tdescription\n";
    const REL_HEADER: &str =
        "name\tdomain\trange\tseeds\thuman_format\tmutex_exceptions\tnr_values\tnr_inverse_values\n";

    #[test]
    fn city_row() {
        let text = format!("{CAT_HEADER}city\tParis|Saint-Etienne|Lyon\tX is a city\t\tFrench cities\n");
        let specs = parse_category_sheet(&text).unwrap();
        assert_eq!(specs.len(), 1);
        let c = &specs[0];
        assert_eq!(c.name, "city");
        assert_eq!(c.seeds, vec!["Paris", "Saint-Etienne", "Lyon"]);
        assert_eq!(c.human_format, "X is a city");
        assert!(c.mutex_exceptions.is_empty());
        assert_eq!(c.description, "French cities");
    }

    #[test]
    fn header_only() {
        assert!(parse_category_sheet(CAT_HEADER).unwrap().is_empty());
        assert!(parse_relation_sheet(REL_HEADER).unwrap().is_empty());
    }

    #[test]
    fn politician_exceptions() {
        let text = format!(
            "{CAT_HEADER}politician\tBarack Obama\tX is a politician\tprofessor | astronaut|celebrity\t\n"
        );
        let c = &parse_category_sheet(&text).unwrap()[0];
        let expected: BTreeSet<String> = ["professor", "astronaut", "celebrity"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(c.mutex_exceptions, expected);
    }

    #[test]
    fn missing_column_and_duplicates() {
        let err = parse_category_sheet("name\tseeds\thuman_format\n").unwrap_err();
        assert!(
            matches!(&err, OntologyError::MissingColumn { column, .. } if column == "mutex_exceptions"),
            "{err}"
        );
        let text = format!("{CAT_HEADER}city\t\tX\t\t\n\nperson\t\tX\t\t\ncity\t\tX\t\t\n");
        match parse_category_sheet(&text).unwrap_err() {
            OntologyError::DuplicateName {
                name,
                first,
                second,
                ..
            } => {
                assert_eq!(name, "city");
                assert_eq!((first, second), (2, 5));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn ceo_of_row() {
        let text = format!(
            "{REL_HEADER}ceoOf\tperson\tcompany\tSundar Pichai,Google|Tim Cook,Apple\tX is the ceo of Y\t\t1\t1\n"
        );
        let r = &parse_relation_sheet(&text).unwrap()[0];
        assert_eq!(
            r.seeds,
            vec![
                ("Sundar Pichai".to_string(), "Google".to_string()),
                ("Tim Cook".to_string(), "Apple".to_string())
            ]
        );
        assert_eq!(r.nr_values, Cardinality::One);
        assert_eq!(r.nr_inverse_values, Cardinality::One);
    }

    #[test]
    fn cardinality_must_be_one_or_n() {
        let text = format!("{REL_HEADER}ceoOf\tperson\tcompany\t\tX of Y\t\t2\t1\n");
        let err = parse_relation_sheet(&text).unwrap_err();
        assert!(matches!(err, OntologyError::BadRow { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("nr_values"));
    }

    #[test]
    fn bad_seed_pair() {
        let text = format!("{REL_HEADER}ceoOf\tperson\tcompany\tTim Cook\tX of Y\t\t1\t1\n");
        assert!(parse_relation_sheet(&text).is_err());
    }

    #[test]
    fn relation_exception_parsed() {
        let text = format!(
            "{REL_HEADER}buildingLocatedInCity\tbuilding\tcity\t\tX is in Y\taquariumInCity\tN\t1\n"
        );
        let r = &parse_relation_sheet(&text).unwrap()[0];
        assert_eq!(r.mutex_exceptions.iter().collect::<Vec<_>>(), vec!["aquariumInCity"]);
        assert_eq!(r.nr_values, Cardinality::Many);
    }

    #[test]
    fn extra_columns_survive_round_trip() {
        let text = "name\tseeds\thuman_format\tmutex_exceptions\tdescription\tgeneralizations\n\
                    city\tParis|Lyon\tX is a city\tlocation\tcities\tlocation\n\
                    location\t\tX is a place\tcity\t\t\n";
        let specs = parse_category_sheet(text).unwrap();
        assert_eq!(specs[0].annotations["generalizations"], "location");
        let mut buf = Vec::new();
        write_category_sheet(&specs, &mut buf).unwrap();
        assert_eq!(parse_category_sheet(std::str::from_utf8(&buf).unwrap()).unwrap(), specs);
    }

    fn cat(name: &str, seeds: &[&str], exceptions: &[&str]) -> CategorySpec {
        CategorySpec {
            name: name.into(),
            seeds: seeds.iter().map(|s| s.to_string()).collect(),
            human_format: format!("X is a {name}"),
            mutex_exceptions: exceptions.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    fn rel(name: &str, domain: &str, range: &str) -> RelationSpec {
        RelationSpec {
            name: name.into(),
            domain: domain.into(),
            range: range.into(),
            seeds: vec![],
            human_format: "X rel Y".into(),
            mutex_exceptions: BTreeSet::new(),
            nr_values: Cardinality::Many,
            nr_inverse_values: Cardinality::Many,
            annotations: BTreeMap::new(),
        }
    }

    fn ten(prefix: &str) -> Vec<String> {
        (0..10).map(|i| format!("{prefix}{i}")).collect()
    }

    fn with_seeds(mut c: CategorySpec, seeds: Vec<String>) -> CategorySpec {
        c.seeds = seeds;
        c
    }

    #[test]
    fn dangling_domain_is_one_error() {
        let o = Ontology::new(
            vec![with_seeds(cat("company", &[], &[]), ten("C"))],
            vec![{
                let mut r = rel("ceoOf", "person", "company");
                r.seeds = (0..10).map(|i| (format!("P{i}"), format!("C{i}"))).collect();
                r
            }],
        );
        let report = o.validate();
        let errors: Vec<_> = report.errors().collect();
        assert_eq!(errors.len(), 1, "{errors:?}");
        assert!(errors[0].message.contains("person"));
    }

    #[test]
    fn few_seeds_warn() {
        let o = Ontology::new(vec![cat("city", &["Paris", "Lyon", "Nice"], &[])], vec![]);
        let report = o.validate();
        assert!(!report.has_errors());
        let w: Vec<_> = report.warnings().collect();
        assert_eq!(w.len(), 1);
        assert!(w[0].message.contains("10-15"), "{}", w[0].message);
    }

    #[test]
    fn exclusive_seed_conflict_warns() {
        let mut city = ten("City");
        city.push("Paris".into());
        let mut person = ten("Person");
        person.push("Paris".into());
        let o = Ontology::new(
            vec![with_seeds(cat("city", &[], &[]), city), with_seeds(cat("person", &[], &[]), person)],
            vec![],
        );
        let w: Vec<_> = o.validate().warnings().cloned().collect();
        assert_eq!(w.len(), 1, "{w:?}");
        assert!(w[0].message.contains("Paris"));

        let mut city = ten("City");
        city.push("Paris".into());
        let mut person = ten("Person");
        person.push("Paris".into());
        let o = Ontology::new(
            vec![
                with_seeds(cat("city", &[], &["person"]), city),
                with_seeds(cat("person", &[], &["city"]), person),
            ],
            vec![],
        );
        assert_eq!(o.validate().warnings().count(), 0);
    }

    #[test]
    fn duplicate_seed_warns() {
        let mut seeds = ten("C");
        seeds.push("C3".into());
        let o = Ontology::new(vec![with_seeds(cat("city", &[], &[]), seeds)], vec![]);
        let w: Vec<_> = o.validate().warnings().cloned().collect();
        assert_eq!(w.len(), 1);
        assert!(w[0].message.contains("duplicate"));
    }

    #[test]
    fn dangling_and_asymmetric_exceptions() {
        let mut o = Ontology::new(
            vec![
                with_seeds(cat("politician", &[], &["celebrity", "astronaut"]), ten("P")),
                with_seeds(cat("celebrity", &[], &[]), ten("C")),
            ],
            vec![],
        );
        let report = o.validate();
        assert_eq!(report.errors().count(), 1);
        assert_eq!(report.notices().count(), 1);
        assert!(!o.mutually_exclusive("celebrity", "astronaut"));
        let added = o.close_mutex_symmetry();
        assert_eq!(added, vec![("celebrity".to_string(), "politician".to_string())]);
        assert!(o.categories["celebrity"].mutex_exceptions.contains("politician"));
        assert!(!o.mutually_exclusive("politician", "celebrity"));
        assert_eq!(o.validate().notices().count(), 0);
    }

    #[test]
    fn format_placeholders() {
        let mut c = with_seeds(cat("city", &[], &[]), ten("C"));
        c.human_format = "a city".into();
        let mut r = rel("near", "city", "city");
        r.seeds = (0..10).map(|i| (format!("C{i}"), format!("D{i}"))).collect();
        r.human_format = "X is near X".into();
        let report = Ontology::new(vec![c], vec![r]).validate();
        assert_eq!(report.errors().count(), 2);
    }

    #[test]
    fn seed_cardinality_warning() {
        let mut r = rel("ceoOf", "person", "company");
        r.nr_inverse_values = Cardinality::One;
        r.seeds = (0..10).map(|i| (format!("P{i}"), format!("C{i}"))).collect();
        r.seeds.push(("Other".into(), "C0".into()));
        let o = Ontology::new(
            vec![
                with_seeds(cat("person", &[], &[]), ten("P")),
                with_seeds(cat("company", &[], &[]), ten("C")),
            ],
            vec![r],
        );
        let w: Vec<_> = o.validate().warnings().cloned().collect();
        assert_eq!(w.len(), 1, "{w:?}");
        assert!(w[0].message.contains("right argument `C0`"));
    }

    #[test]
    fn mapping_validation() {
        let src = Ontology::new(vec![cat("city", &[], &[]), cat("state", &[], &[])], vec![]);
        let dst = Ontology::new(vec![cat("ville", &[], &[]), cat("etat", &[], &[])], vec![]);
        let mapping = parse_mapping("source_name\ttarget_name\ncity\tville\nstate\tetat\n").unwrap();
        assert!(!validate_mapping(&src, &dst, &mapping).has_errors());

        let partial = parse_mapping("city\tville\nstate\tprovince\n").unwrap();
        let report = validate_mapping(&src, &dst, &partial);
        assert_eq!(report.errors().count(), 1);
        assert_eq!(report.warnings().count(), 1);
        assert!(parse_mapping("city\n").is_err());
    }
}

//! IOB tags, label vocabularies, repair, and entity span extraction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// The nine entity types of the English-Spanish code-switching NER data.
pub const DEFAULT_ENTITY_TYPES: [&str; 9] = ["per", "loc", "org", "group", "title", "prod", "event", "time", "other"];

pub const OUTSIDE: &str = "O";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Iob<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Iob<'a> {
    pub fn parse(tag: &'a str) -> Option<Self> {
        if tag == OUTSIDE {
            return Some(Iob::Outside);
        }
        let (prefix, kind) = tag.split_once('-')?;
        if kind.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(Iob::Begin(kind)),
            "I" => Some(Iob::Inside(kind)),
            _ => None,
        }
    }

    pub fn kind(self) -> Option<&'a str> {
        match self {
            Iob::Outside => None,
            Iob::Begin(k) | Iob::Inside(k) => Some(k),
        }
    }
}

/// Whether `next` may follow `prev` (`None` = sentence start).
pub fn is_legal_transition(prev: Option<&str>, next: &str) -> bool {
    match Iob::parse(next) {
        Some(Iob::Inside(kind)) => {
            matches!(prev.and_then(Iob::parse).and_then(Iob::kind), Some(k) if k == kind)
        }
        _ => true,
    }
}

/// Rewrites every `I-x` that does not continue an `x` entity as `B-x`.
/// Returns the number of tags changed.
pub fn repair(tags: &mut [String]) -> usize {
    let mut repaired = 0;
    for i in 0..tags.len() {
        let prev = if i == 0 { None } else { Some(tags[i - 1].as_str()) };
        if !is_legal_transition(prev, &tags[i]) {
            let kind = Iob::parse(&tags[i]).and_then(Iob::kind).unwrap_or_default().to_string();
            tags[i] = format!("B-{kind}");
            repaired += 1;
        }
    }
    repaired
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub kind: String,
}

/// Maximal typed spans. An `I-x` that does not continue an `x` span opens
/// a new one, so extraction is defined for unrepaired sequences too.
pub fn entities<S: AsRef<str>>(tags: &[S]) -> Vec<Entity> {
    let mut out: Vec<Entity> = Vec::new();
    let mut open: Option<Entity> = None;
    for (i, tag) in tags.iter().enumerate() {
        match Iob::parse(tag.as_ref()) {
            Some(Iob::Inside(kind)) if open.as_ref().is_some_and(|e| e.kind == kind) => {
                open.as_mut().unwrap().end = i + 1;
            }
            Some(Iob::Begin(kind)) | Some(Iob::Inside(kind)) => {
                out.extend(open.take());
                open = Some(Entity {
                    start: i,
                    end: i + 1,
                    kind: kind.to_string(),
                });
            }
            _ => out.extend(open.take()),
        }
    }
    out.extend(open);
    out
}

/// Ordered tag vocabulary; index order is the CRF label order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelSet {
    fn from(tags: Vec<String>) -> Self {
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        LabelSet { tags, index }
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.tags
    }
}

impl LabelSet {
    /// `O` followed by `B-t`, `I-t` for each type in order.
    pub fn from_entity_types<S: AsRef<str>>(types: &[S]) -> Self {
        let mut tags = vec![OUTSIDE.to_string()];
        for t in types {
            tags.push(format!("B-{}", t.as_ref()));
            tags.push(format!("I-{}", t.as_ref()));
        }
        tags.into()
    }

    pub fn default_types() -> Self {
        Self::from_entity_types(&DEFAULT_ENTITY_TYPES)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, index: usize) -> &str {
        &self.tags[index]
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.index.contains_key(tag)
    }
}

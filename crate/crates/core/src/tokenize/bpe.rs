//! Byte-pair-encoding segmentation from a ranked merge list.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::preprocess::is_special;
use crate::error::{HmeError, Result};

pub const END_OF_WORD: &str = "</w>";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subword {
    pub text: String,
    /// Set on the last piece of a word.
    pub end_of_word: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BpeModel {
    language: String,
    merges: Vec<(String, String)>,
    ranks: HashMap<String, HashMap<String, usize>>,
}

impl BpeModel {
    /// Rank of a merge is its position in `merges`; pairs must be unique.
    pub fn new(language: &str, merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks: HashMap<String, HashMap<String, usize>> = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            if ranks.entry(l.clone()).or_default().insert(r.clone(), rank).is_some() {
                return Err(HmeError::Invalid(format!("duplicate merge ({l}, {r})")));
            }
        }
        Ok(BpeModel {
            language: language.to_string(),
            merges,
            ranks,
        })
    }

    /// One `left right` pair per line; an optional leading `#version` line
    /// and blank lines are skipped.
    pub fn read_merges<R: BufRead>(reader: R, source_name: &str, language: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| HmeError::io(source_name, e))?;
            let line = line.trim_end_matches('\r');
            if (i == 0 && line.starts_with("#version")) || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                [l, r] if !l.is_empty() && !r.is_empty() => merges.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(HmeError::format(
                        source_name,
                        i + 1,
                        format!("expected \"left right\", got {line:?}"),
                    ))
                }
            }
        }
        Self::new(language, merges).map_err(|e| HmeError::format(source_name, 0, e.to_string()))
    }

    pub fn load_merges(path: &Path, language: &str) -> Result<Self> {
        let file = File::open(path).map_err(|e| HmeError::io(path, e))?;
        Self::read_merges(BufReader::new(file), &path.display().to_string(), language)
    }

    pub fn write_merges<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "#version: 0.2")?;
        for (l, r) in &self.merges {
            writeln!(out, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(left).and_then(|m| m.get(right)).copied()
    }

    /// Segments `word`: start from its characters with `</w>` attached to the
    /// last, then repeatedly merge the adjacent pair of lowest rank (leftmost
    /// on ties) until none applies. The marker is stripped from the output.
    pub fn apply(&self, word: &str) -> Vec<Subword> {
        if word.is_empty() {
            return Vec::new();
        }
        if is_special(word) {
            return vec![Subword {
                text: word.to_string(),
                end_of_word: true,
            }];
        }
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        symbols.last_mut().unwrap().push_str(END_OF_WORD);
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let Some(rank) = self.rank(&symbols[i], &symbols[i + 1]) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        let last = symbols.len() - 1;
        symbols
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| {
                if i == last {
                    s.truncate(s.len() - END_OF_WORD.len());
                }
                Subword {
                    text: s,
                    end_of_word: i == last,
                }
            })
            .collect()
    }
}

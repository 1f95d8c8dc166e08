//! Token-per-line CoNLL files: `token<TAB>tag`, blank line between sentences.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::preprocess::Preprocessor;
use super::Sentence;
use crate::error::{HmeError, Result};
use crate::iob::{self, LabelSet};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConllData {
    pub sentences: Vec<Sentence>,
    /// Number of `I-x` tags rewritten to `B-x`.
    pub repairs: usize,
}

/// Parses a CoNLL stream. Lines with a single field are unlabeled tokens;
/// a sentence must be all labeled or all unlabeled. When `labels` is given
/// every tag must belong to it.
pub fn parse_conll<R: BufRead>(
    reader: R,
    source_name: &str,
    labels: Option<&LabelSet>,
    preprocessor: &Preprocessor,
) -> Result<ConllData> {
    let mut data = ConllData::default();
    let mut raw = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut labeled = None;
    let flush = |raw: &mut Vec<String>, tags: &mut Vec<String>, labeled: &mut Option<bool>, data: &mut ConllData| {
        if raw.is_empty() {
            return;
        }
        let words = raw.iter().map(|t| preprocessor.preprocess_token(t)).collect();
        let labels = if labeled.take() == Some(true) {
            let mut t = std::mem::take(tags);
            data.repairs += iob::repair(&mut t);
            Some(t)
        } else {
            None
        };
        data.sentences.push(Sentence {
            raw_tokens: std::mem::take(raw),
            words,
            labels,
        });
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| HmeError::io(source_name, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut raw, &mut tags, &mut labeled, &mut data);
            continue;
        }
        let line_no = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let (token, tag) = match fields.as_slice() {
            [t] => (*t, None),
            [t, g] => (*t, Some(*g)),
            _ => {
                return Err(HmeError::format(
                    source_name,
                    line_no,
                    format!("expected \"token<TAB>tag\", got {} fields", fields.len()),
                ))
            }
        };
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(HmeError::format(source_name, line_no, format!("bad token {token:?}")));
        }
        if *labeled.get_or_insert(tag.is_some()) != tag.is_some() {
            return Err(HmeError::format(
                source_name,
                line_no,
                "sentence mixes labeled and unlabeled tokens",
            ));
        }
        if let Some(tag) = tag {
            let known = match labels {
                Some(l) => l.contains(tag),
                None => iob::Iob::parse(tag).is_some(),
            };
            if !known {
                return Err(HmeError::format(source_name, line_no, format!("unknown tag {tag:?}")));
            }
            tags.push(tag.to_string());
        }
        raw.push(token.to_string());
    }
    flush(&mut raw, &mut tags, &mut labeled, &mut data);
    Ok(data)
}

pub fn read_conll(path: &Path, labels: Option<&LabelSet>, preprocessor: &Preprocessor) -> Result<ConllData> {
    let file = File::open(path).map_err(|e| HmeError::io(path, e))?;
    parse_conll(BufReader::new(file), &path.display().to_string(), labels, preprocessor)
}

/// Writes raw tokens with one tag column per entry of `columns`.
pub fn write_tagged<W: Write>(mut out: W, sentences: &[Sentence], columns: &[&[Vec<String>]]) -> std::io::Result<()> {
    for (s, sentence) in sentences.iter().enumerate() {
        for (i, tok) in sentence.raw_tokens.iter().enumerate() {
            write!(out, "{tok}")?;
            for col in columns {
                write!(out, "\t{}", col[s][i])?;
            }
            writeln!(out)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Writes sentences with their gold labels (if any).
pub fn write_conll<W: Write>(mut out: W, sentences: &[Sentence]) -> std::io::Result<()> {
    for sentence in sentences {
        for (i, tok) in sentence.raw_tokens.iter().enumerate() {
            match &sentence.labels {
                Some(l) => writeln!(out, "{tok}\t{}", l[i])?,
                None => writeln!(out, "{tok}")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

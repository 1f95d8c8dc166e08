//! Attention TSV files.
//!
//! Each sentence is a block of rows `token_index, token, level, language_id,
//! weight` (one row per token, level and language), followed by a blank
//! line. The file starts with a header row.

use std::io::{BufRead, Write};

use crate::embedding::Level;
use crate::error::{HmeError, Result};
use crate::eval::AttentionSummary;
use crate::model::SentenceAttention;

pub const ATTENTION_HEADER: &str = "token_index\ttoken\tlevel\tlanguage_id\tweight";

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub token_index: usize,
    pub token: String,
    pub level: Level,
    pub language: String,
    pub weight: f64,
}

fn level_name(level: Level) -> &'static str {
    match level {
        Level::Word => "word",
        Level::Subword => "subword",
        Level::Char => "char",
    }
}

/// Writes one block per sentence. `tokens[s]` are the tokens shown in the
/// `token` column.
pub fn write_attention<W: Write>(
    mut out: W,
    tokens: &[Vec<String>],
    attention: &[SentenceAttention],
    word_languages: &[String],
    subword_languages: &[String],
) -> std::io::Result<()> {
    writeln!(out, "{ATTENTION_HEADER}")?;
    for (toks, att) in tokens.iter().zip(attention) {
        for (i, tok) in toks.iter().enumerate() {
            for (level, rows, langs) in [
                (Level::Word, &att.word, word_languages),
                (Level::Subword, &att.subword, subword_languages),
            ] {
                if let Some(rows) = rows {
                    for (lang, w) in langs.iter().zip(&rows[i]) {
                        writeln!(out, "{i}\t{tok}\t{}\t{lang}\t{w}", level_name(level))?;
                    }
                }
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parses an attention file into per-sentence row lists.
pub fn read_attention<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<Vec<AttentionRow>>> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| HmeError::io(source_name, e))?;
        if i == 0 && line == ATTENTION_HEADER {
            continue;
        }
        if line.is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
            continue;
        }
        let bad = |m: &str| HmeError::format(source_name, i + 1, m);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated columns"));
        }
        let level = match f[2] {
            "word" => Level::Word,
            "subword" => Level::Subword,
            _ => return Err(bad("level must be word or subword")),
        };
        current.push(AttentionRow {
            token_index: f[0].parse().map_err(|_| bad("bad token_index"))?,
            token: f[1].to_string(),
            level,
            language: f[3].to_string(),
            weight: f[4].parse().map_err(|_| bad("bad weight"))?,
        });
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

/// Per-token weight rows of one level, in language order of first
/// appearance.
pub fn level_rows(rows: &[AttentionRow], level: Level) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut languages: Vec<String> = Vec::new();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for r in rows.iter().filter(|r| r.level == level) {
        let j = match languages.iter().position(|l| *l == r.language) {
            Some(j) => j,
            None => {
                languages.push(r.language.clone());
                languages.len() - 1
            }
        };
        if out.len() <= r.token_index {
            out.resize(r.token_index + 1, Vec::new());
        }
        let row = &mut out[r.token_index];
        if row.len() <= j {
            row.resize(j + 1, 0.0);
        }
        row[j] = r.weight;
    }
    (languages, out)
}

/// `tag, count, <language>...` table of mean weights.
pub fn write_summary<W: Write>(mut out: W, summary: &AttentionSummary) -> std::io::Result<()> {
    write!(out, "tag\tcount")?;
    for l in &summary.languages {
        write!(out, "\t{l}")?;
    }
    writeln!(out)?;
    for (tag, count, means) in &summary.rows {
        write!(out, "{tag}\t{count}")?;
        for m in means {
            write!(out, "\t{m}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

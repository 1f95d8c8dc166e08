//! Model checkpoints.
//!
//! Layout: the line `HME-CHECKPOINT v1`, one line of JSON describing the
//! run and every parameter (name and shape, in order), then the parameter
//! values as little-endian `f64`, concatenated in header order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HmeError, Result};
use crate::iob::LabelSet;
use crate::model::Tagger;

pub const MAGIC: &str = "HME-CHECKPOINT v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub labels: LabelSet,
    pub char_alphabet: Vec<String>,
    pub random_vocab: Vec<String>,
    pub seed: u64,
    pub best_epoch: usize,
    pub params: Vec<ParamEntry>,
}

pub fn write<W: Write>(mut out: W, config: &RunConfig, tagger: &Tagger, best_epoch: usize) -> std::io::Result<()> {
    let header = Header {
        config: config.clone(),
        labels: tagger.labels.clone(),
        char_alphabet: tagger.char_alphabet(),
        random_vocab: tagger.random_vocab(),
        seed: config.seed,
        best_epoch,
        params: tagger
            .params
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    writeln!(out, "{MAGIC}")?;
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).map_err(std::io::Error::other)?
    )?;
    for (_, _, t) in tagger.params.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn save(path: &Path, config: &RunConfig, tagger: &Tagger, best_epoch: usize) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, config, tagger, best_epoch).map_err(|e| HmeError::io(path, e))?;
    fs::write(path, buf).map_err(|e| HmeError::io(path, e))
}

/// A parameter's name, shape and values.
pub type NamedParam = (String, Vec<usize>, Vec<f64>);

/// Header plus named parameter values.
pub fn read<R: Read>(reader: R, source_name: &str) -> Result<(Header, Vec<NamedParam>)> {
    let mut reader = BufReader::new(reader);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| HmeError::io(source_name, e))?;
    if line.trim_end() != MAGIC {
        return Err(HmeError::format(source_name, 1, "not a checkpoint (bad magic line)"));
    }
    line.clear();
    reader.read_line(&mut line).map_err(|e| HmeError::io(source_name, e))?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| HmeError::format(source_name, 2, e.to_string()))?;
    let mut rest = Vec::new();
    reader
        .read_to_end(&mut rest)
        .map_err(|e| HmeError::io(source_name, e))?;
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if rest.len() != total * 8 {
        return Err(HmeError::format(
            source_name,
            3,
            format!("expected {} bytes of parameters, found {}", total * 8, rest.len()),
        ));
    }
    let mut values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let params = header
        .params
        .iter()
        .map(|p| {
            let n = p.shape.iter().product();
            (p.name.clone(), p.shape.clone(), values.by_ref().take(n).collect())
        })
        .collect();
    Ok((header, params))
}

/// Rebuilds the tagger described by a checkpoint, reloading its embedding
/// tables from the paths in the stored config.
pub fn load(path: &Path) -> Result<(Header, Tagger)> {
    let file = fs::File::open(path).map_err(|e| HmeError::io(path, e))?;
    let (header, params) = read(file, &path.display().to_string())?;
    header.config.check_paths(false)?;
    let embeddings = header.config.load_embeddings()?;
    let chars: BTreeSet<String> = header.char_alphabet.iter().cloned().collect();
    let vocab: BTreeSet<String> = header.random_vocab.iter().cloned().collect();
    let mut tagger = Tagger::new(
        header.config.model.clone(),
        header.labels.clone(),
        embeddings,
        &chars,
        &vocab,
        header.seed,
    )?;
    tagger.load_params(params)?;
    Ok((header, tagger))
}

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hme_core::checkpoint::{self, Header};
use hme_core::config::RunConfig;
use hme_core::eval::{attention_summary, majority_vote, rank_by_score};
use hme_core::export::{write_attention, write_summary};
use hme_core::model::{Tagger, Variant};
use hme_core::run::{evaluate, read_labeled, train_run, write_text, CHECKPOINT_FILE};
use hme_core::synth::{toy_run_config, ToyConfig, ToyCorpus};
use hme_core::tokenize::{read_conll, write_tagged, Preprocessor, Sentence};
use hme_core::{HmeError, Result};

use crate::ModelSource;

const EVAL_REPORT_JSON: &str = "eval_report.json";
const ATTENTION_FILE: &str = "attention.tsv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HmeError::io(path, e))
}

/// Runs `write` against `path`, or stdout when `path` is `None`.
fn with_output<F>(path: Option<&Path>, write: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    match path {
        Some(p) => {
            let mut out = create(p)?;
            write(&mut out)
                .and_then(|_| out.flush())
                .map_err(|e| HmeError::io(p, e))
        }
        None => {
            let mut out = io::stdout().lock();
            write(&mut out)
                .and_then(|_| out.flush())
                .map_err(|e| HmeError::io("<stdout>", e))
        }
    }
}

pub fn train(config_path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(dir) = output_dir {
        config.output_dir = dir;
    }
    let run = train_run(&config)?;
    println!(
        "best epoch {} of {}: dev F1 {:.4}",
        run.outcome.best_epoch,
        run.outcome.records.len(),
        run.outcome.best_dev_f1
    );
    print!("{}", run.dev_report.to_text());
    println!("outputs in {}", run.output_dir.display());
    Ok(())
}

fn checkpoint_path(source: &ModelSource) -> Result<PathBuf> {
    match (&source.checkpoint, &source.config) {
        (Some(path), _) => Ok(path.clone()),
        (None, Some(config)) => Ok(RunConfig::load(config)?.output_dir.join(CHECKPOINT_FILE)),
        (None, None) => Err(HmeError::Config("either --checkpoint or --config is required".into())),
    }
}

fn load_model(source: &ModelSource) -> Result<(PathBuf, Header, Tagger)> {
    let path = checkpoint_path(source)?;
    let (header, tagger) = checkpoint::load(&path)?;
    Ok((path, header, tagger))
}

fn data_path(data: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    data.or_else(|| config.data.test.clone())
        .or_else(|| config.data.dev.clone())
        .ok_or_else(|| HmeError::Config("no data file given and the config has no test or dev set".into()))
}

pub fn eval(source: &ModelSource, data: Option<PathBuf>, json: Option<PathBuf>) -> Result<()> {
    let (ckpt, header, tagger) = load_model(source)?;
    let path = data_path(data, &header.config)?;
    let labeled = read_labeled(&header.config, &path).map_err(|e| match e {
        HmeError::Format { msg, .. } if msg.starts_with("unknown tag") => {
            HmeError::LabelMismatch(format!("{}: {msg} for this checkpoint", path.display()))
        }
        other => other,
    })?;
    let set = tagger.tokenize_all(&labeled.sentences);
    let (mut report, _) = evaluate(&tagger, &set, header.config.train.batch_size)?;
    report.repairs = labeled.repairs;
    print!("{}", report.to_text());
    let json = json.unwrap_or_else(|| ckpt.with_file_name(EVAL_REPORT_JSON));
    write_text(&json, &report.to_json())
}

/// One sentence per nonblank line.
fn read_raw(path: &Path, preprocessor: &Preprocessor) -> Result<Vec<Sentence>> {
    let file = File::open(path).map_err(|e| HmeError::io(path, e))?;
    let mut sentences = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| HmeError::io(path, e))?;
        let raw_tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if raw_tokens.is_empty() {
            continue;
        }
        sentences.push(Sentence {
            words: raw_tokens.iter().map(|t| preprocessor.preprocess_token(t)).collect(),
            raw_tokens,
            labels: None,
        });
    }
    Ok(sentences)
}

fn read_input(path: &Path, raw: bool, config: &RunConfig) -> Result<Vec<Sentence>> {
    let preprocessor = config.preprocessor();
    if raw {
        read_raw(path, &preprocessor)
    } else {
        Ok(read_conll(path, None, &preprocessor)?.sentences)
    }
}

pub fn predict(source: &ModelSource, input: &Path, raw: bool, output: Option<PathBuf>) -> Result<()> {
    let (_, header, tagger) = load_model(source)?;
    let sentences = read_input(input, raw, &header.config)?;
    let set = tagger.tokenize_all(&sentences);
    let tags = tagger.predict(&set, header.config.train.batch_size)?;
    with_output(output.as_deref(), |out| write_tagged(out, &sentences, &[&tags]))
}

pub fn ensemble(files: &[PathBuf], scores: Option<Vec<f64>>, output: Option<PathBuf>) -> Result<()> {
    let ranking = match scores {
        Some(s) if s.len() != files.len() => {
            return Err(HmeError::Config(format!(
                "{} scores for {} files",
                s.len(),
                files.len()
            )));
        }
        Some(s) => rank_by_score(&s),
        None => (0..files.len()).collect(),
    };
    let preprocessor = Preprocessor::default();
    let mut runs = Vec::with_capacity(files.len());
    for path in files {
        let data = read_conll(path, None, &preprocessor)?;
        if let Some(i) = data.sentences.iter().position(|s| s.labels.is_none()) {
            return Err(HmeError::Invalid(format!(
                "{}: sentence {} has no tags",
                path.display(),
                i + 1
            )));
        }
        runs.push(data.sentences);
    }
    let base = &runs[0];
    for (path, run) in files.iter().zip(&runs).skip(1) {
        let same = run.len() == base.len() && run.iter().zip(base).all(|(a, b)| a.raw_tokens == b.raw_tokens);
        if !same {
            return Err(HmeError::Invalid(format!(
                "{} does not tag the same tokens as {}",
                path.display(),
                files[0].display()
            )));
        }
    }
    let voted: Vec<Vec<String>> = (0..base.len())
        .map(|s| {
            let tags: Vec<&[String]> = runs.iter().map(|r| r[s].labels.as_deref().expect("checked")).collect();
            majority_vote(&tags, &ranking)
        })
        .collect::<Result<_>>()?;
    with_output(output.as_deref(), |out| write_tagged(out, base, &[&voted]))
}

pub fn export_attention(source: &ModelSource, data: Option<PathBuf>, output_dir: &Path) -> Result<()> {
    let (_, header, tagger) = load_model(source)?;
    let path = data_path(data, &header.config)?;
    let sentences = read_conll(&path, None, &header.config.preprocessor())?.sentences;
    let set = tagger.tokenize_all(&sentences);
    let batch = header.config.train.batch_size;
    let attention = tagger.attention(&set, batch)?;
    let levels = [
        (
            "word",
            tagger.embeddings.word_languages(),
            attention.iter().map(|a| a.word.as_ref()).collect::<Vec<_>>(),
        ),
        (
            "subword",
            tagger.embeddings.subword_languages(),
            attention.iter().map(|a| a.subword.as_ref()).collect(),
        ),
    ];
    if levels.iter().all(|(_, _, rows)| rows.iter().all(Option::is_none)) {
        return Err(HmeError::Invalid(format!(
            "a {:?} model has no language attention to export",
            tagger.config.variant
        )));
    }
    fs::create_dir_all(output_dir).map_err(|e| HmeError::io(output_dir, e))?;
    let tokens: Vec<Vec<String>> = sentences.iter().map(|s| s.raw_tokens.clone()).collect();
    let tsv = output_dir.join(ATTENTION_FILE);
    let mut out = create(&tsv)?;
    write_attention(
        &mut out,
        &tokens,
        &attention,
        &tagger.embeddings.word_languages(),
        &tagger.embeddings.subword_languages(),
    )
    .and_then(|_| out.flush())
    .map_err(|e| HmeError::io(&tsv, e))?;

    let predicted: Vec<String> = tagger.predict(&set, batch)?.into_iter().flatten().collect();
    for (level, languages, rows) in levels {
        if rows.iter().any(Option::is_none) {
            continue;
        }
        let alphas: Vec<Vec<f64>> = rows.into_iter().flatten().flatten().cloned().collect();
        let summary = attention_summary(&languages, &alphas, &predicted)?;
        let path = output_dir.join(format!("summary_{level}.tsv"));
        let mut out = create(&path)?;
        write_summary(&mut out, &summary)
            .and_then(|_| out.flush())
            .map_err(|e| HmeError::io(&path, e))?;
    }
    println!(
        "wrote attention for {} sentences to {}",
        sentences.len(),
        output_dir.display()
    );
    Ok(())
}

pub fn toy_data(dir: &Path, seed: u64, sentences: usize, languages: Vec<String>) -> Result<()> {
    let toy = ToyConfig {
        sentences,
        languages,
        seed,
        ..ToyConfig::default()
    };
    let corpus = ToyCorpus::generate(&toy)?;
    corpus.write(dir)?;
    for (variant, name) in [
        (Variant::Hme, "hme"),
        (Variant::MmeWord, "mme_word"),
        (Variant::Concat, "concat"),
        (Variant::Linear, "linear"),
        (Variant::Random, "random"),
    ] {
        write_text(
            &dir.join(format!("{name}.toml")),
            &toy_run_config(&corpus, variant, seed),
        )?;
    }
    println!(
        "wrote {} train and {} dev sentences with configs to {}",
        corpus.train.len(),
        corpus.dev.len(),
        dir.display()
    );
    Ok(())
}

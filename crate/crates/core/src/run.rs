//! End-to-end operations over a [`RunConfig`]: training with its output
//! files, evaluation and prediction.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{HmeError, Result};
use crate::eval::{entity_f1, EvalReport};
use crate::model::{char_alphabet, word_vocab, Tagger};
use crate::tokenize::{read_conll, write_tagged, ConllData, Sentence, TokenizedSentence};
use crate::train::{train, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DEV_REPORT_JSON: &str = "dev_report.json";
pub const DEV_REPORT_TEXT: &str = "dev_report.txt";
pub const DEV_PREDICTIONS: &str = "dev_predictions.conll";

/// Reads a labeled CoNLL file, validating tags against the config's labels.
pub fn read_labeled(config: &RunConfig, path: &Path) -> Result<ConllData> {
    let data = read_conll(path, Some(&config.labels()), &config.preprocessor())?;
    if let Some(i) = data.sentences.iter().position(|s| s.labels.is_none()) {
        return Err(HmeError::Invalid(format!(
            "{}: sentence {} has no tags",
            path.display(),
            i + 1
        )));
    }
    Ok(data)
}

/// A freshly initialized tagger whose character table and random-baseline
/// vocabulary come from `train`.
pub fn build_tagger(config: &RunConfig, train: &[Sentence]) -> Result<Tagger> {
    let embeddings = config.load_embeddings()?;
    Tagger::new(
        config.model.clone(),
        config.labels(),
        embeddings,
        &char_alphabet(train),
        &word_vocab(train),
        config.seed,
    )
}

/// Scores `tagger` on labeled sentences.
pub fn evaluate(
    tagger: &Tagger,
    data: &[TokenizedSentence],
    batch_size: usize,
) -> Result<(EvalReport, Vec<Vec<String>>)> {
    let pred = tagger.predict(data, batch_size)?;
    let gold: Vec<Vec<String>> = data.iter().map(|s| s.labels.clone().unwrap_or_default()).collect();
    let mut report = entity_f1(&gold, &pred)?;
    report.oov_tokens = tagger.oov_count(data);
    Ok((report, pred))
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub dev_report: EvalReport,
    pub output_dir: PathBuf,
    pub tagger: Tagger,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HmeError::io(path, e))
}

/// Trains from `config` and writes the checkpoint, the metrics log, the dev
/// report (text and JSON) and dev predictions into `config.output_dir`.
pub fn train_run(config: &RunConfig) -> Result<TrainRun> {
    config.check_paths(true)?;
    let train_path = config.data.train.as_deref().expect("checked");
    let dev_path = config.data.dev.as_deref().expect("checked");
    let train_data = read_labeled(config, train_path)?;
    let dev_data = read_labeled(config, dev_path)?;
    let mut tagger = build_tagger(config, &train_data.sentences)?;
    let train_set = tagger.tokenize_all(&train_data.sentences);
    let dev_set = tagger.tokenize_all(&dev_data.sentences);

    let out_dir = config.output_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| HmeError::io(&out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = create(&metrics_path)?;
    let outcome = train(
        &mut tagger,
        &train_set,
        &dev_set,
        &config.train,
        config.seed,
        |record| {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(metrics, "{line}")
                .and_then(|_| metrics.flush())
                .map_err(|e| HmeError::io(&metrics_path, e))
        },
    )?;
    drop(metrics);

    checkpoint::save(&out_dir.join(CHECKPOINT_FILE), config, &tagger, outcome.best_epoch)?;
    let (mut report, pred) = evaluate(&tagger, &dev_set, config.train.batch_size)?;
    report.repairs = dev_data.repairs;
    write_text(&out_dir.join(DEV_REPORT_TEXT), &report.to_text())?;
    write_text(&out_dir.join(DEV_REPORT_JSON), &report.to_json())?;
    let pred_path = out_dir.join(DEV_PREDICTIONS);
    let mut out = create(&pred_path)?;
    write_tagged(&mut out, &dev_data.sentences, &[&pred])
        .and_then(|_| out.flush())
        .map_err(|e| HmeError::io(&pred_path, e))?;
    Ok(TrainRun {
        outcome,
        dev_report: report,
        output_dir: out_dir,
        tagger,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HmeError::io(path, e))
}

//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p hme-core --test acceptance`.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    attention_case, baseline_case, bpe_and_preprocess_fixtures, bpe_reconstruction, crf_instance, f1_fixture_check,
    hash_f64s, sha256_hex, sweep, toy_config, vote_fixture_check, COMPOSITES, GRAD_SEEDS, GRAD_TOL, OPS,
};
use hme_core::config::RunConfig;
use hme_core::eval::{entity_f1, majority_vote, rank_by_score};
use hme_core::model::Variant;
use hme_core::run::{build_tagger, read_labeled, train_run, TrainRun, DEV_PREDICTIONS};
use hme_core::synth::ToyConfig;
use proptest::test_runner::{Config, TestRunner};

const GRAD_BUDGET: Duration = Duration::from_secs(60);
const CRF_BUDGET: Duration = Duration::from_secs(30);
const CRF_INSTANCES: u64 = 200;
const ATTENTION_CASES: u32 = 1000;
const BPE_STRINGS: usize = 10_000;
const TOY_F1: f64 = 0.90;
const TOY_EPOCHS: usize = 30;
const TOY_BUDGET: Duration = Duration::from_secs(300);
const BASELINE_GAP: f64 = 0.10;
const TOY_SEED: u64 = 7;

type Verdict = Result<String, String>;

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst: (f64, &str, u64) = (0.0, "", 0);
    for (name, case) in OPS.iter().chain(&COMPOSITES) {
        let (err, seed) = sweep(*case, GRAD_SEEDS);
        if err > worst.0 {
            worst = (err, name, seed);
        }
        if err > GRAD_TOL {
            return Err(format!(
                "{name}: rel err {err:e} at seed {seed} (tolerance {GRAD_TOL:e})"
            ));
        }
    }
    let elapsed = start.elapsed();
    let cases = OPS.len() + COMPOSITES.len();
    if elapsed > GRAD_BUDGET {
        return Err(format!("took {elapsed:.1?}, budget {GRAD_BUDGET:?}"));
    }
    Ok(format!(
        "{cases} ops/composites × {GRAD_SEEDS} seeds, worst rel err {:.2e} ({}), {elapsed:.1?}",
        worst.0, worst.1
    ))
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut count = 0;
    for n in 1..=6 {
        for t in 1..=5 {
            for seed in 0..CRF_INSTANCES {
                crf_instance(seed, n, t)?;
                count += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > CRF_BUDGET {
        return Err(format!("took {elapsed:.1?}, budget {CRF_BUDGET:?}"));
    }
    Ok(format!(
        "{CRF_INSTANCES} instances for every n ≤ 6, T ≤ 5 ({count} total), logZ and Viterbi exact, {elapsed:.1?}"
    ))
}

fn property(cases: u32, check: fn(u64) -> Result<(), String>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&proptest::num::u64::ANY, |seed| {
            check(seed).map_err(proptest::test_runner::TestCaseError::fail)
        })
        .map_err(|e| e.to_string())
}

fn criterion_3() -> Verdict {
    property(ATTENTION_CASES, attention_case)?;
    Ok(format!(
        "simplex, shift invariance, convex hull, single-language reduction over {ATTENTION_CASES} configurations"
    ))
}

fn criterion_4() -> Verdict {
    property(ATTENTION_CASES, baseline_case)?;
    Ok(format!(
        "linear = L × uniform MME and concat slices exact over {ATTENTION_CASES} configurations"
    ))
}

fn criterion_5() -> Verdict {
    bpe_reconstruction(BPE_STRINGS)?;
    bpe_and_preprocess_fixtures()?;
    Ok(format!(
        "{BPE_STRINGS} random strings reconstructed; lowest → low + est; mention/link/emoji fixtures"
    ))
}

struct Toy {
    hme: TrainRun,
    hme_secs: f64,
    random: TrainRun,
    configs: Vec<RunConfig>,
}

fn toy_experiment(dir: &Path) -> Result<Toy, String> {
    let toy = ToyConfig::default();
    let mut configs = Vec::new();
    for variant in [Variant::Hme, Variant::Random] {
        let mut config = toy_config(dir, &toy, variant, TOY_SEED);
        config.train.max_epochs = TOY_EPOCHS;
        configs.push(config);
    }
    let start = Instant::now();
    let hme = train_run(&configs[0]).map_err(|e| e.to_string())?;
    let hme_secs = start.elapsed().as_secs_f64();
    let random = train_run(&configs[1]).map_err(|e| e.to_string())?;
    Ok(Toy {
        hme,
        hme_secs,
        random,
        configs,
    })
}

fn criterion_6(toy: &Result<Toy, String>) -> Verdict {
    let toy = toy.as_ref().map_err(Clone::clone)?;
    let hme_f1 = toy.hme.outcome.best_dev_f1;
    let random_f1 = toy.random.outcome.best_dev_f1;
    let config = &toy.configs[0].model;
    let detail = format!(
        "HME (d_model {}, {} layers) dev F1 {hme_f1:.4} after {} epochs in {:.1}s; random baseline {random_f1:.4}",
        config.d_model,
        config.layers,
        toy.hme.outcome.records.len(),
        toy.hme_secs
    );
    if hme_f1 < TOY_F1 {
        return Err(format!("{detail}: below {TOY_F1}"));
    }
    if toy.hme_secs > TOY_BUDGET.as_secs_f64() {
        return Err(format!("{detail}: over {TOY_BUDGET:?}"));
    }
    if hme_f1 - random_f1 < BASELINE_GAP {
        return Err(format!("{detail}: gap below {BASELINE_GAP}"));
    }
    Ok(detail)
}

fn criterion_7(dir: &Path, toy: &Result<Toy, String>) -> Verdict {
    vote_fixture_check()?;
    let toy = toy.as_ref().map_err(Clone::clone)?;
    let mut preds = vec![toy
        .hme
        .tagger
        .predict(&dev_set(toy, 0)?, 32)
        .map_err(|e| e.to_string())?];
    preds.push(
        toy.random
            .tagger
            .predict(&dev_set(toy, 1)?, 32)
            .map_err(|e| e.to_string())?,
    );
    for variant in [Variant::MmeWord, Variant::Concat, Variant::Linear] {
        let mut config = toy_config(dir, &ToyConfig::default(), variant, TOY_SEED);
        config.train.max_epochs = TOY_EPOCHS;
        let run = train_run(&config).map_err(|e| e.to_string())?;
        let dev = read_labeled(&config, config.data.dev.as_deref().unwrap()).map_err(|e| e.to_string())?;
        preds.push(
            run.tagger
                .predict(&run.tagger.tokenize_all(&dev.sentences), 32)
                .map_err(|e| e.to_string())?,
        );
    }
    let gold = gold_tags(toy)?;
    let scores: Vec<f64> = preds
        .iter()
        .map(|p| entity_f1(&gold, p).map(|r| r.f1()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let ranking = rank_by_score(&scores);
    let voted: Vec<Vec<String>> = (0..gold.len())
        .map(|s| {
            let per_model: Vec<&[String]> = preds.iter().map(|p| p[s].as_slice()).collect();
            majority_vote(&per_model, &ranking)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let ensemble = entity_f1(&gold, &voted).map_err(|e| e.to_string())?.f1();
    let worst = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let detail = format!(
        "5 models (hme, random, mme_word, concat, linear) dev F1 {}; ensemble {ensemble:.4}; 3-2 and tie fixtures vote correctly",
        scores.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>().join(", ")
    );
    if ensemble < worst {
        return Err(format!("{detail}: ensemble below worst model {worst:.4}"));
    }
    Ok(detail)
}

fn dev_set(toy: &Toy, k: usize) -> Result<Vec<hme_core::tokenize::TokenizedSentence>, String> {
    let config = &toy.configs[k];
    let dev = read_labeled(config, config.data.dev.as_deref().unwrap()).map_err(|e| e.to_string())?;
    let tagger = if k == 0 { &toy.hme.tagger } else { &toy.random.tagger };
    Ok(tagger.tokenize_all(&dev.sentences))
}

fn gold_tags(toy: &Toy) -> Result<Vec<Vec<String>>, String> {
    let config = &toy.configs[0];
    let dev = read_labeled(config, config.data.dev.as_deref().unwrap()).map_err(|e| e.to_string())?;
    Ok(dev
        .sentences
        .into_iter()
        .map(|s| s.labels.unwrap_or_default())
        .collect())
}

fn criterion_8(dir: &Path) -> Verdict {
    let toy = ToyConfig {
        sentences: 300,
        ..ToyConfig::default()
    };
    let mut config = toy_config(dir, &toy, Variant::Hme, 21);
    config.train.max_epochs = 2;
    let fresh = build_tagger(
        &config,
        &read_labeled(&config, config.data.train.as_deref().unwrap())
            .map_err(|e| e.to_string())?
            .sentences,
    )
    .map_err(|e| e.to_string())?;
    let char_id = fresh.char_param().ok_or("HME config has no character table")?;
    let char_before = hash_f64s(fresh.params.get(char_id).data());
    let frozen_before: Vec<String> = fresh
        .embeddings
        .word
        .iter()
        .chain(&fresh.embeddings.subword)
        .map(|t| hash_f64s(t.vectors()))
        .collect();

    let first = train_run(&config).map_err(|e| e.to_string())?;
    let a = std::fs::read(first.output_dir.join(DEV_PREDICTIONS)).map_err(|e| e.to_string())?;
    config.output_dir = config.output_dir.with_extension("again");
    let second = train_run(&config).map_err(|e| e.to_string())?;
    let b = std::fs::read(second.output_dir.join(DEV_PREDICTIONS)).map_err(|e| e.to_string())?;
    if a != b {
        return Err("prediction files differ between identical runs".into());
    }
    let frozen_after: Vec<String> = first
        .tagger
        .embeddings
        .word
        .iter()
        .chain(&first.tagger.embeddings.subword)
        .map(|t| hash_f64s(t.vectors()))
        .collect();
    if frozen_after != frozen_before {
        return Err("a pretrained table changed during training".into());
    }
    let char_after = hash_f64s(first.tagger.params.get(first.tagger.char_param().unwrap()).data());
    if char_after == char_before {
        return Err("character table unchanged by training".into());
    }
    Ok(format!(
        "predictions sha256 {} in both runs; {} pretrained tables unchanged; char table {} → {}",
        &sha256_hex(&a)[..12],
        frozen_before.len(),
        &char_before[..12],
        &char_after[..12]
    ))
}

fn criterion_9() -> Verdict {
    f1_fixture_check()?;
    Ok("3-sentence fixture P = R = F1 = 0.6 with per-type counts; all-O → 0.0; perfect → 1.0".into())
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let toy_dir = dir.path().join("toy");
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "gradient suite", criterion_1()),
        (2, "CRF oracle", criterion_2()),
        (3, "attention invariants", criterion_3()),
        (4, "baseline identities", criterion_4()),
        (5, "BPE and preprocessing", criterion_5()),
    ];
    let toy = toy_experiment(&toy_dir);
    results.push((6, "end-to-end toy experiment", criterion_6(&toy)));
    results.push((7, "ensemble", criterion_7(&toy_dir, &toy)));
    results.push((
        8,
        "determinism and freezing",
        criterion_8(&dir.path().join("determinism")),
    ));
    results.push((9, "F1 metric", criterion_9()));

    let mut failed = 0;
    for (id, name, verdict) in &results {
        match verdict {
            Ok(detail) => println!("PASS {id} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Synthetic code-switched NER corpus with matching embedding tables.
//!
//! Two artificial languages share a syllable inventory for entities: every
//! entity type owns a few syllables, and entity words of both languages are
//! built from them. Filler words use language-specific syllables. Word
//! vectors of an entity sit near its type centroid, subword vectors of a
//! type syllable near a second centroid, and each language's tables are
//! rotated into their own space. A share of dev entity words never occurs
//! in training, so only the pretrained tables can type them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{EmbeddingTable, Level, TextFormat};
use crate::error::{HmeError, Result};
use crate::iob::DEFAULT_ENTITY_TYPES;
use crate::model::Variant;
use crate::tokenize::{BpeModel, Preprocessor, Sentence, END_OF_WORD};

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub sentences: usize,
    pub dev_fraction: f64,
    pub dim: usize,
    pub languages: Vec<String>,
    pub syllables_per_type: usize,
    pub filler_syllables: usize,
    pub entity_words_per_type: usize,
    pub filler_words: usize,
    /// Share of entity words reserved for dev sentences.
    pub heldout_fraction: f64,
    /// Probability that a dev entity word is drawn from the reserved share.
    pub heldout_rate: f64,
    pub switch_prob: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            sentences: 2000,
            dev_fraction: 0.2,
            dim: 50,
            languages: vec!["xa".into(), "xb".into()],
            syllables_per_type: 5,
            filler_syllables: 30,
            entity_words_per_type: 24,
            filler_words: 150,
            heldout_fraction: 0.4,
            heldout_rate: 0.4,
            switch_prob: 0.3,
            noise: 0.9,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub word_tables: Vec<EmbeddingTable>,
    pub subword_tables: Vec<EmbeddingTable>,
    pub bpe: Vec<BpeModel>,
    pub entity_types: Vec<String>,
}

struct Lexicon {
    /// `entity[lang][type]` = (seen words, held-out words).
    entity: Vec<Vec<(Vec<String>, Vec<String>)>>,
    filler: Vec<Vec<String>>,
}

fn syllable_inventory<R: Rng>(rng: &mut R, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut s = String::new();
        s.push(*CONSONANTS.choose(rng).unwrap() as char);
        s.push(*VOWELS.choose(rng).unwrap() as char);
        if rng.random_bool(0.5) {
            s.push(*CONSONANTS.choose(rng).unwrap() as char);
        }
        if taken.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

fn make_words<R: Rng>(rng: &mut R, syllables: &[String], count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        assert!(attempts < 100_000, "syllable inventory too small for {count} words");
        let n = if rng.random_bool(0.6) { 2 } else { 3 };
        let w: String = (0..n).map(|_| syllables.choose(rng).unwrap().as_str()).collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn uniform_vec<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random orthogonal matrix by Gram-Schmidt on uniform entries.
fn random_rotation<R: Rng>(rng: &mut R, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = uniform_vec(rng, dim, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn rotate(q: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    q.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn merges_for(syllables: &[String]) -> Vec<(String, String)> {
    let mut short = Vec::new();
    let mut long = Vec::new();
    for s in syllables {
        let c: Vec<String> = s.chars().map(String::from).collect();
        short.push((c[0].clone(), c[1].clone()));
        if c.len() == 2 {
            short.push((c[0].clone(), format!("{}{END_OF_WORD}", c[1])));
        } else {
            let head = format!("{}{}", c[0], c[1]);
            long.push((head.clone(), c[2].clone()));
            long.push((head, format!("{}{END_OF_WORD}", c[2])));
        }
    }
    let mut seen = BTreeSet::new();
    short
        .into_iter()
        .chain(long)
        .filter(|m| seen.insert(m.clone()))
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

const SPECIAL_RAW: [&str; 5] = ["@amigo", "#fiesta", "http://t.co/x1", "www.example.com", "\u{1F600}"];

impl ToyCorpus {
    pub fn generate(config: &ToyConfig) -> Result<Self> {
        if config.languages.is_empty() || config.sentences < 2 {
            return Err(HmeError::Invalid(
                "toy corpus needs languages and at least two sentences".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let types: Vec<String> = DEFAULT_ENTITY_TYPES.iter().map(|s| s.to_string()).collect();
        let n_lang = config.languages.len();
        let mut taken_syl = BTreeSet::new();
        let type_syl: Vec<Vec<String>> = types
            .iter()
            .map(|_| syllable_inventory(&mut rng, config.syllables_per_type, &mut taken_syl))
            .collect();
        let filler_syl: Vec<Vec<String>> = (0..n_lang)
            .map(|_| syllable_inventory(&mut rng, config.filler_syllables, &mut taken_syl))
            .collect();

        let mut taken_words = BTreeSet::new();
        let mut lex = Lexicon {
            entity: Vec::new(),
            filler: Vec::new(),
        };
        for fillers in &filler_syl {
            let per_type = type_syl
                .iter()
                .map(|syl| {
                    let words = make_words(&mut rng, syl, config.entity_words_per_type, &mut taken_words);
                    let held = (words.len() as f64 * config.heldout_fraction).round() as usize;
                    let (h, s) = words.split_at(held);
                    (s.to_vec(), h.to_vec())
                })
                .collect();
            lex.entity.push(per_type);
            lex.filler
                .push(make_words(&mut rng, fillers, config.filler_words, &mut taken_words));
        }

        let word_centroids: Vec<Vec<f64>> = types.iter().map(|_| uniform_vec(&mut rng, config.dim, 1.0)).collect();
        let sub_centroids: Vec<Vec<f64>> = types.iter().map(|_| uniform_vec(&mut rng, config.dim, 1.0)).collect();
        let rotations: Vec<Vec<Vec<f64>>> = (0..n_lang).map(|_| random_rotation(&mut rng, config.dim)).collect();
        let specials: Vec<String> = {
            let p = Preprocessor::default();
            let set: BTreeSet<String> = SPECIAL_RAW.iter().map(|t| p.preprocess_token(t)).collect();
            set.into_iter().collect()
        };

        let mut word_tables = Vec::new();
        for (j, lang) in config.languages.iter().enumerate() {
            let mut tokens = Vec::new();
            let mut vectors = Vec::new();
            for (t, (seen, held)) in lex.entity[j].iter().enumerate() {
                for w in seen.iter().chain(held) {
                    let v: Vec<f64> = word_centroids[t]
                        .iter()
                        .map(|c| c + rng.random_range(-config.noise..config.noise))
                        .collect();
                    tokens.push(w.clone());
                    vectors.extend(rotate(&rotations[j], &v));
                }
            }
            for w in lex.filler[j].iter().chain(&specials) {
                tokens.push(w.clone());
                vectors.extend(rotate(&rotations[j], &uniform_vec(&mut rng, config.dim, 1.0)));
            }
            word_tables.push(EmbeddingTable::frozen(lang, Level::Word, config.dim, tokens, vectors)?);
        }

        let syllable_type: BTreeMap<&str, usize> = type_syl
            .iter()
            .enumerate()
            .flat_map(|(t, syl)| syl.iter().map(move |s| (s.as_str(), t)))
            .collect();
        let mut bpe = Vec::new();
        let mut subword_tables = Vec::new();
        for (j, lang) in config.languages.iter().enumerate() {
            let syllables: Vec<String> = type_syl.iter().flatten().chain(&filler_syl[j]).cloned().collect();
            let model = BpeModel::new(lang, merges_for(&syllables))?;
            let mut pieces = BTreeSet::new();
            let all_words = lex
                .entity
                .iter()
                .flatten()
                .flat_map(|(seen, held)| seen.iter().chain(held))
                .chain(lex.filler.iter().flatten());
            for w in all_words {
                pieces.extend(model.apply(w).into_iter().map(|p| p.text));
            }
            pieces.extend(syllables.iter().cloned());
            pieces.extend((b'a'..=b'z').map(|c| (c as char).to_string()));
            pieces.extend(specials.iter().cloned());
            let mut tokens = Vec::new();
            let mut vectors = Vec::new();
            for p in pieces {
                let base = match syllable_type.get(p.as_str()) {
                    Some(&t) => sub_centroids[t]
                        .iter()
                        .map(|c| c + rng.random_range(-config.noise..config.noise))
                        .collect(),
                    None => uniform_vec(&mut rng, config.dim, 1.0),
                };
                tokens.push(p);
                vectors.extend(rotate(&rotations[j], &base));
            }
            subword_tables.push(EmbeddingTable::frozen(
                lang,
                Level::Subword,
                config.dim,
                tokens,
                vectors,
            )?);
            bpe.push(model);
        }

        let n_dev = ((config.sentences as f64 * config.dev_fraction).round() as usize).clamp(1, config.sentences - 1);
        let n_train = config.sentences - n_dev;
        let preprocessor = Preprocessor::default();
        let mut make = |dev: bool| -> Sentence {
            let mut lang = rng.random_range(0..n_lang);
            let mut raw = Vec::new();
            let mut tags = Vec::new();
            let n_entities = rng.random_range(1..=3);
            for e in 0..=n_entities {
                for _ in 0..rng.random_range(1..=4) {
                    if rng.random_bool(config.switch_prob) {
                        lang = rng.random_range(0..n_lang);
                    }
                    let tok = if rng.random_bool(0.05) {
                        SPECIAL_RAW.choose(&mut rng).unwrap().to_string()
                    } else {
                        lex.filler[lang].choose(&mut rng).unwrap().clone()
                    };
                    raw.push(tok);
                    tags.push("O".to_string());
                }
                if e == n_entities {
                    break;
                }
                let t = rng.random_range(0..types.len());
                let len = if rng.random_bool(0.3) { 2 } else { 1 };
                for k in 0..len {
                    if rng.random_bool(config.switch_prob) {
                        lang = rng.random_range(0..n_lang);
                    }
                    let (seen, held) = &lex.entity[lang][t];
                    let pool = if dev && !held.is_empty() && rng.random_bool(config.heldout_rate) {
                        held
                    } else {
                        seen
                    };
                    let mut w = pool.choose(&mut rng).unwrap().clone();
                    if rng.random_bool(0.2) {
                        w = capitalize(&w);
                    }
                    raw.push(w);
                    tags.push(format!("{}-{}", if k == 0 { "B" } else { "I" }, types[t]));
                }
            }
            Sentence {
                words: raw.iter().map(|t| preprocessor.preprocess_token(t)).collect(),
                raw_tokens: raw,
                labels: Some(tags),
            }
        };
        let train: Vec<Sentence> = (0..n_train).map(|_| make(false)).collect();
        let dev: Vec<Sentence> = (0..n_dev).map(|_| make(true)).collect();
        Ok(ToyCorpus {
            train,
            dev,
            word_tables,
            subword_tables,
            bpe,
            entity_types: types,
        })
    }

    /// Writes `train.conll`, `dev.conll`, and per language
    /// `<lang>.words.vec`, `<lang>.subwords.txt` and `<lang>.merges`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HmeError::io(dir, e))?;
        let io = |path: &Path, r: std::io::Result<()>| r.map_err(|e| HmeError::io(path, e));
        for (name, data) in [("train.conll", &self.train), ("dev.conll", &self.dev)] {
            let path = dir.join(name);
            let mut buf = Vec::new();
            io(&path, crate::tokenize::write_conll(&mut buf, data))?;
            io(&path, fs::write(&path, buf))?;
        }
        for ((w, s), b) in self.word_tables.iter().zip(&self.subword_tables).zip(&self.bpe) {
            let lang = w.language();
            let path = dir.join(format!("{lang}.words.vec"));
            let mut buf = Vec::new();
            io(&path, w.write_text(&mut buf, TextFormat::VecWithHeader))?;
            io(&path, fs::write(&path, buf))?;
            let path = dir.join(format!("{lang}.subwords.txt"));
            let mut buf = Vec::new();
            io(&path, s.write_text(&mut buf, TextFormat::GloveNoHeader))?;
            io(&path, fs::write(&path, buf))?;
            let path = dir.join(format!("{lang}.merges"));
            let mut buf = Vec::new();
            io(&path, b.write_merges(&mut buf))?;
            io(&path, fs::write(&path, buf))?;
        }
        Ok(())
    }

    /// Manifest entries (TOML) for the files written by [`ToyCorpus::write`].
    pub fn manifest_toml(&self, with_subwords: bool) -> String {
        let mut s = String::new();
        for t in &self.word_tables {
            let l = t.language();
            s += &format!(
                "[[embeddings]]\nlevel = \"word\"\nlanguage = \"{l}\"\npath = \"{l}.words.vec\"\nformat = \"vec_with_header\"\ndim = {}\n\n",
                t.dim()
            );
        }
        if with_subwords {
            for t in &self.subword_tables {
                let l = t.language();
                s += &format!(
                    "[[embeddings]]\nlevel = \"subword\"\nlanguage = \"{l}\"\npath = \"{l}.subwords.txt\"\nmerges = \"{l}.merges\"\nformat = \"glove_no_header\"\ndim = {}\n\n",
                    t.dim()
                );
            }
        }
        s
    }
}

/// A complete run config (TOML) for the files written by
/// [`ToyCorpus::write`], sized to train in a few minutes on one core.
pub fn toy_run_config(corpus: &ToyCorpus, variant: Variant, seed: u64) -> String {
    let name = match variant {
        Variant::Hme => "hme",
        Variant::MmeWord => "mme_word",
        Variant::Concat => "concat",
        Variant::Linear => "linear",
        Variant::Random => "random",
    };
    let manifest = match variant {
        Variant::Random => String::new(),
        Variant::Hme => corpus.manifest_toml(true),
        _ => corpus.manifest_toml(false),
    };
    format!(
        "version = 1\nseed = {seed}\noutput_dir = \"out-{name}\"\n\n[data]\ntrain = \"train.conll\"\ndev = \"dev.conll\"\n\n{manifest}{TOY_MODEL}variant = \"{name}\"\n\n{TOY_TRAIN}"
    )
}

const TOY_MODEL: &str = "[model]
proj_dim = 32
subword_layers = 1
char_dim = 16
char_layers = 1
d_model = 64
layers = 2
heads = 4
dropout = 0.1
random_dim = 32
";

const TOY_TRAIN: &str = "[train]
learning_rate = 0.005
patience = 4
batch_size = 16
max_epochs = 30
";

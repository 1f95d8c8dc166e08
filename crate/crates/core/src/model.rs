//! The full tagger: token representation, sentence encoder and CRF.

use std::collections::BTreeSet;

use hme_autodiff::{ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::Crf;
use crate::embedding::{init_char_table, EmbeddingTable};
use crate::error::{HmeError, Result};
use crate::iob::LabelSet;
use crate::meta::{self, AttentionMode, AttentionScorer, ProjectionSet};
use crate::nn::{EncoderConfig, TransformerEncoder};
use crate::tokenize::{to_chars, BpeModel, Sentence, SubunitTokenizer, TokenizedSentence};

/// How token representations are built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Word, subword and character levels concatenated.
    #[default]
    Hme,
    /// Word-level attention only.
    MmeWord,
    /// Raw word embeddings side by side.
    Concat,
    /// Unweighted sum of projected word embeddings.
    Linear,
    /// A trainable, randomly initialized word table.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub use_subword: bool,
    pub use_char: bool,
    pub attention: AttentionMode,
    /// Shared width `d′` of projected embeddings.
    pub proj_dim: usize,
    pub subword_layers: usize,
    pub char_dim: usize,
    pub char_layers: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; `4 · d_model` when absent.
    pub ff_dim: Option<usize>,
    pub dropout: f64,
    pub random_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Hme,
            use_subword: true,
            use_char: true,
            attention: AttentionMode::Learned,
            proj_dim: 200,
            subword_layers: 1,
            char_dim: 50,
            char_layers: 1,
            d_model: 200,
            layers: 4,
            heads: 4,
            ff_dim: None,
            dropout: 0.1,
            random_dim: 300,
        }
    }
}

impl ModelConfig {
    pub fn subword_enabled(&self) -> bool {
        self.variant == Variant::Hme && self.use_subword
    }

    pub fn char_enabled(&self) -> bool {
        self.variant == Variant::Hme && self.use_char
    }

    fn encoder(&self, input_dim: Option<usize>, d_model: usize, layers: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            d_model,
            layers,
            heads: self.heads,
            ff_dim: self.ff_dim.unwrap_or(4 * d_model),
            dropout: self.dropout,
        }
    }
}

/// Frozen pretrained tables. `subword[j]` is segmented with `bpe[j]`.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingSet {
    pub word: Vec<EmbeddingTable>,
    pub subword: Vec<EmbeddingTable>,
    pub bpe: Vec<BpeModel>,
}

impl EmbeddingSet {
    pub fn word_languages(&self) -> Vec<String> {
        self.word.iter().map(|t| t.language().to_string()).collect()
    }

    pub fn subword_languages(&self) -> Vec<String> {
        self.subword.iter().map(|t| t.language().to_string()).collect()
    }
}

#[derive(Clone, Debug)]
struct Parts {
    word_proj: Option<ProjectionSet>,
    word_scorer: Option<AttentionScorer>,
    sub_proj: Option<ProjectionSet>,
    sub_encoder: Option<TransformerEncoder>,
    sub_scorer: Option<AttentionScorer>,
    char_param: Option<ParamId>,
    char_encoder: Option<TransformerEncoder>,
    random_param: Option<ParamId>,
    sentence: TransformerEncoder,
    crf: Crf,
}

/// Forward-pass results for a batch of sentences stacked row-wise.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `N × T` emission scores.
    pub emissions: Var,
    pub lens: Vec<usize>,
    /// `N × L_w` word-level attention.
    pub alpha_word: Option<Var>,
    /// `N × L_s` subword-level attention.
    pub alpha_subword: Option<Var>,
}

/// Attention weights of one sentence, one row per token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SentenceAttention {
    pub word: Option<Vec<Vec<f64>>>,
    pub subword: Option<Vec<Vec<f64>>>,
}

/// A sequence labeler with its parameters.
#[derive(Clone, Debug)]
pub struct Tagger {
    pub config: ModelConfig,
    pub labels: LabelSet,
    pub embeddings: EmbeddingSet,
    pub params: ParamStore,
    tokenizer: SubunitTokenizer,
    char_table: Option<EmbeddingTable>,
    random_table: Option<EmbeddingTable>,
    parts: Parts,
}

/// Characters of every word in `sentences`.
pub fn char_alphabet(sentences: &[Sentence]) -> BTreeSet<String> {
    sentences
        .iter()
        .flat_map(|s| s.words.iter())
        .flat_map(|w| to_chars(w))
        .collect()
}

/// Distinct words of `sentences`.
pub fn word_vocab(sentences: &[Sentence]) -> BTreeSet<String> {
    sentences.iter().flat_map(|s| s.words.iter().cloned()).collect()
}

impl Tagger {
    /// Builds a freshly initialized tagger. `char_alphabet` feeds the
    /// trainable character table and `random_vocab` the random-baseline
    /// table; each is ignored when its level is unused.
    pub fn new(
        config: ModelConfig,
        labels: LabelSet,
        embeddings: EmbeddingSet,
        char_alphabet: &BTreeSet<String>,
        random_vocab: &BTreeSet<String>,
        seed: u64,
    ) -> Result<Self> {
        validate(&config, &embeddings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.proj_dim;
        let word_langs = embeddings.word_languages();
        let word_dims: Vec<usize> = embeddings.word.iter().map(EmbeddingTable::dim).collect();

        let (word_proj, word_scorer) = match config.variant {
            Variant::Hme | Variant::MmeWord | Variant::Linear => {
                let proj = ProjectionSet::new(&mut params, "word.proj", &word_langs, &word_dims, d, &mut rng);
                let scorer = (config.variant != Variant::Linear)
                    .then(|| AttentionScorer::new(&mut params, "word.scorer", d, &mut rng));
                (Some(proj), scorer)
            }
            Variant::Concat | Variant::Random => (None, None),
        };

        let (mut sub_proj, mut sub_encoder, mut sub_scorer) = (None, None, None);
        if config.subword_enabled() {
            let dims: Vec<usize> = embeddings.subword.iter().map(EmbeddingTable::dim).collect();
            sub_proj = Some(ProjectionSet::new(
                &mut params,
                "subword.proj",
                &embeddings.subword_languages(),
                &dims,
                d,
                &mut rng,
            ));
            sub_encoder = Some(TransformerEncoder::new(
                &mut params,
                "subword.encoder",
                config.encoder(None, d, config.subword_layers),
                &mut rng,
            )?);
            sub_scorer = Some(AttentionScorer::new(&mut params, "subword.scorer", d, &mut rng));
        }

        let (mut char_table, mut char_param, mut char_encoder) = (None, None, None);
        if config.char_enabled() {
            let table = init_char_table(char_alphabet, config.char_dim, seed.wrapping_add(1))?;
            char_param = Some(params.add("char.table", table.to_tensor()));
            char_encoder = Some(TransformerEncoder::new(
                &mut params,
                "char.encoder",
                config.encoder(Some(config.char_dim), d, config.char_layers),
                &mut rng,
            )?);
            char_table = Some(table);
        }

        let (mut random_table, mut random_param) = (None, None);
        if config.variant == Variant::Random {
            let table = meta::random_baseline(random_vocab, config.random_dim, seed.wrapping_add(2))?;
            random_param = Some(params.add("random.table", table.to_tensor()));
            random_table = Some(table);
        }

        let input_dim = match config.variant {
            Variant::Hme => d * (1 + config.subword_enabled() as usize + config.char_enabled() as usize),
            Variant::MmeWord | Variant::Linear => d,
            Variant::Concat => word_dims.iter().sum(),
            Variant::Random => config.random_dim,
        };
        let sentence = TransformerEncoder::new(
            &mut params,
            "sentence",
            config.encoder(Some(input_dim), config.d_model, config.layers),
            &mut rng,
        )?;
        let crf = Crf::new(&mut params, "crf", config.d_model, &labels, &mut rng);
        let tokenizer = SubunitTokenizer::new(embeddings.bpe.clone());
        Ok(Tagger {
            config,
            labels,
            embeddings,
            params,
            tokenizer,
            char_table,
            random_table,
            parts: Parts {
                word_proj,
                word_scorer,
                sub_proj,
                sub_encoder,
                sub_scorer,
                char_param,
                char_encoder,
                random_param,
                sentence,
                crf,
            },
        })
    }

    /// Symbols of the character table, without the padding and unknown rows.
    pub fn char_alphabet(&self) -> Vec<String> {
        self.char_table
            .as_ref()
            .map(|t| t.tokens()[2..].to_vec())
            .unwrap_or_default()
    }

    /// Words of the random-baseline table, without the padding and unknown rows.
    pub fn random_vocab(&self) -> Vec<String> {
        self.random_table
            .as_ref()
            .map(|t| t.tokens()[2..].to_vec())
            .unwrap_or_default()
    }

    pub fn char_param(&self) -> Option<ParamId> {
        self.parts.char_param
    }

    pub fn crf(&self) -> &Crf {
        &self.parts.crf
    }

    pub fn tokenize(&self, sentence: &Sentence) -> TokenizedSentence {
        self.tokenizer.tokenize(sentence)
    }

    pub fn tokenize_all(&self, sentences: &[Sentence]) -> Vec<TokenizedSentence> {
        self.tokenizer.tokenize_all(sentences)
    }

    /// Words that no word table covers, summed over `sentences`.
    pub fn oov_count(&self, sentences: &[TokenizedSentence]) -> usize {
        sentences
            .iter()
            .flat_map(|s| s.words.iter())
            .filter(|w| match &self.random_table {
                Some(t) => t.index_of(w) == Some(crate::embedding::UNK_ROW),
                None => self.embeddings.word.iter().all(|t| t.index_of(w).is_none()),
            })
            .count()
    }

    /// Emission scores and attention weights for `batch`.
    pub fn forward(&self, tape: &mut Tape, batch: &[&TokenizedSentence]) -> Result<ForwardOutput> {
        let lens: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        if lens.is_empty() || lens.contains(&0) {
            return Err(HmeError::Invalid("cannot tag an empty sentence".into()));
        }
        let params = &self.params;
        let parts = &self.parts;
        let words: Vec<&String> = batch.iter().flat_map(|s| s.words.iter()).collect();
        let word_inputs = |tape: &mut Tape| -> Vec<Var> {
            self.embeddings
                .word
                .iter()
                .map(|t| {
                    let rows: Vec<Option<usize>> = words.iter().map(|w| t.index_of(w)).collect();
                    tape.constant(t.gather(&rows))
                })
                .collect()
        };
        let (mut alpha_word, mut alpha_subword) = (None, None);
        let u = match self.config.variant {
            Variant::Hme => {
                let xs = word_inputs(tape);
                let w = meta::mme_word(
                    tape,
                    params,
                    &xs,
                    parts.word_proj.as_ref().unwrap(),
                    parts.word_scorer.as_ref().unwrap(),
                    self.config.attention,
                )?;
                alpha_word = Some(w.alpha);
                let s = if self.config.subword_enabled() {
                    let out = self.subword_level(tape, batch)?;
                    alpha_subword = Some(out.alpha);
                    Some(out.u)
                } else {
                    None
                };
                let c = if self.config.char_enabled() {
                    Some(self.char_level(tape, batch)?)
                } else {
                    None
                };
                meta::hme_concat(tape, w.u, s, c)?
            }
            Variant::MmeWord => {
                let xs = word_inputs(tape);
                let w = meta::mme_word(
                    tape,
                    params,
                    &xs,
                    parts.word_proj.as_ref().unwrap(),
                    parts.word_scorer.as_ref().unwrap(),
                    self.config.attention,
                )?;
                alpha_word = Some(w.alpha);
                w.u
            }
            Variant::Concat => {
                let xs = word_inputs(tape);
                meta::concat_baseline(tape, &xs)?
            }
            Variant::Linear => {
                let xs = word_inputs(tape);
                meta::linear_baseline(tape, params, &xs, parts.word_proj.as_ref().unwrap())?
            }
            Variant::Random => {
                let table = self.random_table.as_ref().unwrap();
                let rows: Vec<usize> = words
                    .iter()
                    .map(|w| table.index_of(w).unwrap_or(crate::embedding::UNK_ROW))
                    .collect();
                tape.gather_rows(params, parts.random_param.unwrap(), &rows)?
            }
        };
        let h = parts.sentence.forward(tape, params, u, &lens)?;
        let emissions = parts.crf.emissions(tape, params, h)?;
        Ok(ForwardOutput {
            emissions,
            lens,
            alpha_word,
            alpha_subword,
        })
    }

    fn subword_level(&self, tape: &mut Tape, batch: &[&TokenizedSentence]) -> Result<meta::MmeOutput> {
        let mut inputs = Vec::with_capacity(self.embeddings.subword.len());
        let mut lens = Vec::with_capacity(self.embeddings.subword.len());
        for (j, table) in self.embeddings.subword.iter().enumerate() {
            let mut rows = Vec::new();
            let mut l = Vec::new();
            for s in batch {
                for pieces in &s.subwords[j] {
                    rows.extend(pieces.iter().map(|p| table.subword_index(p)));
                    l.push(pieces.len());
                }
            }
            inputs.push(tape.constant(table.gather(&rows)));
            lens.push(l);
        }
        meta::mme_subword(
            tape,
            &self.params,
            &inputs,
            &lens,
            self.parts.sub_proj.as_ref().unwrap(),
            self.parts.sub_encoder.as_ref().unwrap(),
            self.parts.sub_scorer.as_ref().unwrap(),
            self.config.attention,
        )
    }

    fn char_level(&self, tape: &mut Tape, batch: &[&TokenizedSentence]) -> Result<Var> {
        let table = self.char_table.as_ref().unwrap();
        let mut rows = Vec::new();
        let mut lens = Vec::new();
        for s in batch {
            for chars in &s.chars {
                rows.extend(
                    chars
                        .iter()
                        .map(|c| table.index_of(c).unwrap_or(crate::embedding::UNK_ROW)),
                );
                lens.push(chars.len());
            }
        }
        let x = tape.gather_rows(&self.params, self.parts.char_param.unwrap(), &rows)?;
        meta::char_encode(tape, &self.params, x, &lens, self.parts.char_encoder.as_ref().unwrap())
    }

    /// Gold tag indices of a labeled sentence.
    pub fn gold_indices(&self, sentence: &TokenizedSentence) -> Result<Vec<usize>> {
        let labels = sentence
            .labels
            .as_ref()
            .ok_or_else(|| HmeError::Invalid("training sentence has no labels".into()))?;
        labels
            .iter()
            .map(|t| {
                self.labels
                    .index(t)
                    .ok_or_else(|| HmeError::LabelMismatch(format!("tag {t:?} is not in the model's label set")))
            })
            .collect()
    }

    /// Mean negative log-likelihood over the sentences of `batch`.
    pub fn loss(&self, tape: &mut Tape, batch: &[&TokenizedSentence]) -> Result<Var> {
        let gold = batch.iter().map(|s| self.gold_indices(s)).collect::<Result<Vec<_>>>()?;
        let out = self.forward(tape, batch)?;
        let total = self
            .parts
            .crf
            .nll(tape, &self.params, out.emissions, &out.lens, &gold)?;
        Ok(tape.scale(total, 1.0 / batch.len() as f64)?)
    }

    fn eval_batches<'a>(
        &self,
        sentences: &'a [TokenizedSentence],
        batch_size: usize,
    ) -> impl Iterator<Item = Vec<&'a TokenizedSentence>> {
        sentences
            .chunks(batch_size.max(1))
            .map(|c| c.iter().filter(|s| !s.is_empty()).collect::<Vec<_>>())
    }

    /// Viterbi tags for every sentence, in eval mode.
    pub fn predict(&self, sentences: &[TokenizedSentence], batch_size: usize) -> Result<Vec<Vec<String>>> {
        let mut out = Vec::with_capacity(sentences.len());
        let mut decoded = Vec::new();
        for batch in self.eval_batches(sentences, batch_size) {
            if batch.is_empty() {
                continue;
            }
            let mut tape = Tape::new(0);
            let f = self.forward(&mut tape, &batch)?;
            decoded.extend(self.parts.crf.decode(&self.params, tape.value(f.emissions), &f.lens));
        }
        let mut decoded = decoded.into_iter();
        for s in sentences {
            if s.is_empty() {
                out.push(Vec::new());
            } else {
                let path = decoded.next().expect("one path per non-empty sentence");
                out.push(path.iter().map(|&i| self.labels.tag(i).to_string()).collect());
            }
        }
        Ok(out)
    }

    /// Word- and subword-level attention weights per sentence, in eval mode.
    pub fn attention(&self, sentences: &[TokenizedSentence], batch_size: usize) -> Result<Vec<SentenceAttention>> {
        let mut out = Vec::with_capacity(sentences.len());
        let mut computed = Vec::new();
        for batch in self.eval_batches(sentences, batch_size) {
            if batch.is_empty() {
                continue;
            }
            let mut tape = Tape::new(0);
            let f = self.forward(&mut tape, &batch)?;
            let split = |alpha: Option<Var>| {
                alpha.map(|a| {
                    let t = tape.value(a);
                    let cols = t.shape()[1];
                    t.data().chunks(cols).map(<[f64]>::to_vec).collect::<Vec<_>>()
                })
            };
            let (word, subword) = (split(f.alpha_word), split(f.alpha_subword));
            let mut offset = 0;
            for &n in &f.lens {
                computed.push(SentenceAttention {
                    word: word.as_ref().map(|w| w[offset..offset + n].to_vec()),
                    subword: subword.as_ref().map(|s| s[offset..offset + n].to_vec()),
                });
                offset += n;
            }
        }
        let mut computed = computed.into_iter();
        for s in sentences {
            out.push(if s.is_empty() {
                SentenceAttention::default()
            } else {
                computed.next().expect("one entry per non-empty sentence")
            });
        }
        Ok(out)
    }

    /// Overwrites parameters by name; every parameter must be present with
    /// its exact shape.
    pub fn load_params(&mut self, named: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(HmeError::Invalid(format!(
                "checkpoint has {} parameters, model has {}",
                named.len(),
                self.params.len()
            )));
        }
        for (name, shape, data) in named {
            let id = self
                .params
                .id(&name)
                .ok_or_else(|| HmeError::Invalid(format!("unknown parameter {name}")))?;
            let t = self.params.get_mut(id);
            if t.shape() != shape.as_slice() || t.len() != data.len() {
                return Err(HmeError::Invalid(format!(
                    "parameter {name} has shape {:?}, checkpoint has {shape:?}",
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }
}

fn validate(config: &ModelConfig, embeddings: &EmbeddingSet) -> Result<()> {
    let needs_words = config.variant != Variant::Random;
    if needs_words && embeddings.word.is_empty() {
        return Err(HmeError::Config(format!(
            "variant {:?} needs at least one word-level embedding table",
            config.variant
        )));
    }
    if config.subword_enabled() {
        if embeddings.subword.is_empty() {
            return Err(HmeError::Config(
                "subword level enabled but no subword tables given".into(),
            ));
        }
        if embeddings.subword.len() != embeddings.bpe.len() {
            return Err(HmeError::Config("every subword table needs a BPE merges file".into()));
        }
    } else if !embeddings.subword.is_empty() {
        return Err(HmeError::Config(format!(
            "variant {:?} does not use subword tables",
            config.variant
        )));
    }
    if config.proj_dim == 0 || config.d_model == 0 || config.char_dim == 0 || config.random_dim == 0 {
        return Err(HmeError::Config("model widths must be positive".into()));
    }
    for (what, width) in [("d_model", config.d_model), ("proj_dim", config.proj_dim)] {
        if config.heads == 0 || width % config.heads != 0 {
            return Err(HmeError::Config(format!(
                "{} heads do not divide {what} {width}",
                config.heads
            )));
        }
    }
    Ok(())
}

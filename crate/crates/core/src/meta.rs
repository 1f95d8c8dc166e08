//! Meta-embeddings: attention-weighted combinations of per-language
//! embeddings at the word and subword level, the character encoder, their
//! hierarchical concatenation, and the CONCAT / LINEAR / random baselines.

use std::collections::BTreeSet;

use hme_autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, Level};
use crate::error::{HmeError, Result};
use crate::nn::{xavier_uniform, Linear, TransformerEncoder};

/// One projection `d_j → d′` per language.
#[derive(Clone, Debug)]
pub struct ProjectionSet {
    pub projections: Vec<Linear>,
    pub out_dim: usize,
}

impl ProjectionSet {
    pub fn new<R: Rng, S: AsRef<str>>(
        params: &mut ParamStore,
        name: &str,
        languages: &[S],
        in_dims: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let projections = languages
            .iter()
            .zip(in_dims)
            .map(|(lang, &d)| Linear::new(params, &format!("{name}.{}", lang.as_ref()), d, out_dim, rng))
            .collect();
        ProjectionSet { projections, out_dim }
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn project(&self, tape: &mut Tape, params: &ParamStore, xs: &[Var]) -> Result<Vec<Var>> {
        check_languages(tape, xs)?;
        if xs.len() != self.projections.len() {
            return Err(HmeError::Invalid(format!(
                "{} inputs for {} projections",
                xs.len(),
                self.projections.len()
            )));
        }
        xs.iter()
            .zip(&self.projections)
            .map(|(&x, p)| p.forward(tape, params, x))
            .collect()
    }
}

/// `score(x′) = v · tanh(x′)`, one scalar per token and language.
#[derive(Clone, Debug)]
pub struct AttentionScorer {
    /// Stored as a `d′ × 1` column.
    pub v: ParamId,
    pub dim: usize,
}

impl AttentionScorer {
    pub fn new<R: Rng>(params: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        AttentionScorer {
            v: params.add(format!("{name}.v"), xavier_uniform(rng, dim, 1)),
            dim,
        }
    }

    /// Scores as an `n × L` matrix.
    pub fn scores(&self, tape: &mut Tape, params: &ParamStore, projected: &[Var]) -> Result<Var> {
        let v = tape.param(params, self.v);
        let cols = projected
            .iter()
            .map(|&x| {
                let t = tape.tanh(x)?;
                Ok(tape.matmul(t, v)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat(&cols, 1)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Every language weighted `1 / L`.
    Uniform,
}

#[derive(Clone, Copy, Debug)]
pub struct MmeOutput {
    /// `n × d′` combined vectors.
    pub u: Var,
    /// `n × L` attention weights.
    pub alpha: Var,
}

fn check_languages(tape: &Tape, xs: &[Var]) -> Result<usize> {
    let first = xs
        .first()
        .ok_or_else(|| HmeError::Invalid("at least one language is required".into()))?;
    let n = tape.shape(*first)[0];
    for &x in xs {
        if tape.shape(x).len() != 2 || tape.shape(x)[0] != n {
            return Err(HmeError::Invalid(format!(
                "token count mismatch across languages: {:?} vs {:?}",
                tape.shape(*first),
                tape.shape(x)
            )));
        }
    }
    Ok(n)
}

/// Softmax over languages of the scores, then the weighted sum.
pub fn combine(
    tape: &mut Tape,
    params: &ParamStore,
    projected: &[Var],
    scorer: &AttentionScorer,
    mode: AttentionMode,
) -> Result<MmeOutput> {
    let n = check_languages(tape, projected)?;
    let l = projected.len();
    let alpha = match mode {
        AttentionMode::Learned => {
            let s = scorer.scores(tape, params, projected)?;
            tape.softmax(s, 1)?
        }
        AttentionMode::Uniform => tape.constant(Tensor::matrix(n, l, vec![1.0 / l as f64; n * l])),
    };
    let u = tape.weighted_sum(alpha, projected)?;
    Ok(MmeOutput { u, alpha })
}

/// Word-level meta-embedding: project each language, score, and take the
/// attention-weighted sum.
pub fn mme_word(
    tape: &mut Tape,
    params: &ParamStore,
    embeddings: &[Var],
    proj: &ProjectionSet,
    scorer: &AttentionScorer,
    mode: AttentionMode,
) -> Result<MmeOutput> {
    let projected = proj.project(tape, params, embeddings)?;
    combine(tape, params, &projected, scorer, mode)
}

/// Subword-level meta-embedding.
///
/// `subwords[j]` stacks the pieces of every word under language `j`;
/// `lens[j][i]` is the number of pieces of word `i`. Each language is
/// projected, run through the shared encoder word by word, mean-pooled, and
/// the pooled vectors are combined across languages.
#[allow(clippy::too_many_arguments)]
pub fn mme_subword(
    tape: &mut Tape,
    params: &ParamStore,
    subwords: &[Var],
    lens: &[Vec<usize>],
    proj: &ProjectionSet,
    encoder: &TransformerEncoder,
    scorer: &AttentionScorer,
    mode: AttentionMode,
) -> Result<MmeOutput> {
    if subwords.len() != lens.len() {
        return Err(HmeError::Invalid("one length list per language is required".into()));
    }
    let n = lens.first().map(Vec::len).unwrap_or(0);
    if lens.iter().any(|l| l.len() != n || l.contains(&0)) {
        return Err(HmeError::Invalid(
            "every word needs at least one subword in every language".into(),
        ));
    }
    let projected = subwords
        .iter()
        .zip(&proj.projections)
        .map(|(&x, p)| p.forward(tape, params, x))
        .collect::<Result<Vec<_>>>()?;
    let pooled = projected
        .iter()
        .zip(lens)
        .map(|(&x, l)| {
            let h = encoder.forward(tape, params, x, l)?;
            Ok(tape.segment_mean(h, l)?)
        })
        .collect::<Result<Vec<_>>>()?;
    combine(tape, params, &pooled, scorer, mode)
}

/// Character encoder: encodes each word's character rows and mean-pools them.
pub fn char_encode(
    tape: &mut Tape,
    params: &ParamStore,
    chars: Var,
    lens: &[usize],
    encoder: &TransformerEncoder,
) -> Result<Var> {
    if lens.is_empty() || lens.contains(&0) {
        return Err(HmeError::Invalid("every word needs at least one character".into()));
    }
    let h = encoder.forward(tape, params, chars, lens)?;
    Ok(tape.segment_mean(h, lens)?)
}

/// Row-wise concatenation in (word, subword, char) order of the levels present.
pub fn hme_concat(tape: &mut Tape, word: Var, subword: Option<Var>, char: Option<Var>) -> Result<Var> {
    let parts: Vec<Var> = [Some(word), subword, char].into_iter().flatten().collect();
    if parts.len() == 1 {
        return Ok(word);
    }
    check_languages(tape, &parts)?;
    Ok(tape.concat(&parts, 1)?)
}

/// Raw per-language embeddings side by side.
pub fn concat_baseline(tape: &mut Tape, embeddings: &[Var]) -> Result<Var> {
    check_languages(tape, embeddings)?;
    if embeddings.len() == 1 {
        return Ok(embeddings[0]);
    }
    Ok(tape.concat(embeddings, 1)?)
}

/// Unweighted sum of the projected embeddings.
pub fn linear_baseline(tape: &mut Tape, params: &ParamStore, embeddings: &[Var], proj: &ProjectionSet) -> Result<Var> {
    let projected = proj.project(tape, params, embeddings)?;
    let mut acc = projected[0];
    for &x in &projected[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}

/// Trainable word table over `vocab` with rows ~ Uniform(−0.1, 0.1).
pub fn random_baseline(vocab: &BTreeSet<String>, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    EmbeddingTable::random_trainable("random", Level::Word, vocab, dim, seed)
}

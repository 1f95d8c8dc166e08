//! Entity-level scoring, ensemble voting and attention statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{HmeError, Result};
use crate::iob::{entities, repair};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    fn finish(mut self) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        self.precision = ratio(self.true_positives, self.true_positives + self.false_positives);
        self.recall = ratio(self.true_positives, self.true_positives + self.false_negatives);
        let sum = self.precision + self.recall;
        self.f1 = if sum == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / sum
        };
        self
    }
}

/// Micro-averaged entity scores with a per-type breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Counts,
    pub per_type: BTreeMap<String, Counts>,
    pub token_accuracy: f64,
    pub sentences: usize,
    pub tokens: usize,
    /// Tags rewritten while reading the gold file.
    pub repairs: usize,
    /// Tokens absent from every word table.
    pub oov_tokens: usize,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.overall.precision
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1
    }

    /// `key<TAB>value` lines; per-type keys are prefixed with the type.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k}\t{v}").unwrap();
        let counts = |line: &mut dyn FnMut(&str, String), prefix: &str, c: &Counts| {
            line(&format!("{prefix}precision"), format!("{:.6}", c.precision));
            line(&format!("{prefix}recall"), format!("{:.6}", c.recall));
            line(&format!("{prefix}f1"), format!("{:.6}", c.f1));
            line(&format!("{prefix}true_positives"), c.true_positives.to_string());
            line(&format!("{prefix}false_positives"), c.false_positives.to_string());
            line(&format!("{prefix}false_negatives"), c.false_negatives.to_string());
        };
        counts(&mut line, "", &self.overall);
        line("token_accuracy", format!("{:.6}", self.token_accuracy));
        line("sentences", self.sentences.to_string());
        line("tokens", self.tokens.to_string());
        line("repairs", self.repairs.to_string());
        line("oov_tokens", self.oov_tokens.to_string());
        for (kind, c) in &self.per_type {
            counts(&mut line, &format!("{kind}."), c);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Exact (start, end, type) span matching over all sentences.
pub fn entity_f1<G: AsRef<str>, P: AsRef<str>>(gold: &[Vec<G>], pred: &[Vec<P>]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(HmeError::Invalid(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut overall = Counts::default();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    let (mut tokens, mut correct) = (0, 0);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(HmeError::Invalid(format!(
                "sentence {i}: {} gold tags but {} predicted",
                g.len(),
                p.len()
            )));
        }
        tokens += g.len();
        correct += g.iter().zip(p).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
        let ge = entities(g);
        let pe = entities(p);
        for e in &pe {
            let c = per_type.entry(e.kind.clone()).or_default();
            if ge.contains(e) {
                overall.true_positives += 1;
                c.true_positives += 1;
            } else {
                overall.false_positives += 1;
                c.false_positives += 1;
            }
        }
        for e in ge.iter().filter(|e| !pe.contains(e)) {
            overall.false_negatives += 1;
            per_type.entry(e.kind.clone()).or_default().false_negatives += 1;
        }
    }
    Ok(EvalReport {
        overall: overall.finish(),
        per_type: per_type.into_iter().map(|(k, c)| (k, c.finish())).collect(),
        token_accuracy: if tokens == 0 {
            0.0
        } else {
            correct as f64 / tokens as f64
        },
        sentences: gold.len(),
        tokens,
        repairs: 0,
        oov_tokens: 0,
    })
}

/// Model indices ordered by descending score; equal scores keep index order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Per-token plurality vote over `predictions` (one tag sequence per model).
///
/// Ties go to the tied tag proposed by the earliest model in `ranking`
/// (best first). The voted sequence is IOB-repaired.
pub fn majority_vote<S: AsRef<str>>(predictions: &[&[S]], ranking: &[usize]) -> Result<Vec<String>> {
    let k = predictions.len();
    if k == 0 {
        return Err(HmeError::Invalid("majority vote needs at least one model".into()));
    }
    let mut sorted = ranking.to_vec();
    sorted.sort_unstable();
    if sorted != (0..k).collect::<Vec<_>>() {
        return Err(HmeError::Invalid(format!(
            "ranking {ranking:?} is not a permutation of {k} models"
        )));
    }
    let n = predictions[0].len();
    if predictions.iter().any(|p| p.len() != n) {
        return Err(HmeError::Invalid("predictions differ in length".into()));
    }
    let mut out: Vec<String> = (0..n)
        .map(|i| {
            let mut votes: HashMap<&str, usize> = HashMap::new();
            for p in predictions {
                *votes.entry(p[i].as_ref()).or_default() += 1;
            }
            let max = *votes.values().max().unwrap();
            ranking
                .iter()
                .map(|&m| predictions[m][i].as_ref())
                .find(|t| votes[t] == max)
                .unwrap()
                .to_string()
        })
        .collect();
    repair(&mut out);
    Ok(out)
}

/// Mean attention per language for the tokens of each tag.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub languages: Vec<String>,
    /// (tag, token count, mean weight per language), sorted by tag.
    pub rows: Vec<(String, usize, Vec<f64>)>,
}

/// Groups per-token attention rows by tag and averages them.
pub fn attention_summary<S: AsRef<str>>(
    languages: &[String],
    alphas: &[Vec<f64>],
    tags: &[S],
) -> Result<AttentionSummary> {
    if alphas.len() != tags.len() {
        return Err(HmeError::Invalid(format!(
            "{} attention rows for {} tags",
            alphas.len(),
            tags.len()
        )));
    }
    let l = languages.len();
    let mut groups: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for (row, tag) in alphas.iter().zip(tags) {
        if row.len() != l {
            return Err(HmeError::Invalid(format!(
                "attention row has {} weights for {l} languages",
                row.len()
            )));
        }
        let g = groups.entry(tag.as_ref()).or_insert_with(|| (0, vec![0.0; l]));
        g.0 += 1;
        for (acc, w) in g.1.iter_mut().zip(row) {
            *acc += w;
        }
    }
    Ok(AttentionSummary {
        languages: languages.to_vec(),
        rows: groups
            .into_iter()
            .map(|(tag, (count, sums))| (tag.to_string(), count, sums.iter().map(|s| s / count as f64).collect()))
            .collect(),
    })
}

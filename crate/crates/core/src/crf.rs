//! Linear-chain CRF: forward algorithm, marginals, Viterbi decoding and a
//! negative log-likelihood node for the tape.

use hme_autodiff::{CustomOp, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{HmeError, Result};
use crate::iob::{is_legal_transition, LabelSet};
use crate::nn::Linear;

/// Additive score for forbidden transitions.
pub const MASKED: f64 = -1e9;

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Transition, start and end scores of a chain over `num_tags` tags, with
/// any mask already added. Emissions are `n × num_tags`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfScores {
    pub num_tags: usize,
    /// `transitions[a * T + b]` scores tag `a` followed by tag `b`.
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub log_z: f64,
    /// `n × T` posterior tag probabilities.
    pub unary: Vec<f64>,
    /// `T × T` expected transition counts summed over positions.
    pub pairwise: Vec<f64>,
}

impl CrfScores {
    pub fn zeros(num_tags: usize) -> Self {
        CrfScores {
            num_tags,
            transitions: vec![0.0; num_tags * num_tags],
            start: vec![0.0; num_tags],
            end: vec![0.0; num_tags],
        }
    }

    fn trans(&self, a: usize, b: usize) -> f64 {
        self.transitions[a * self.num_tags + b]
    }

    fn len_of(&self, emissions: &[f64]) -> usize {
        assert_eq!(emissions.len() % self.num_tags, 0, "emissions must be n × T");
        emissions.len() / self.num_tags
    }

    pub fn path_score(&self, emissions: &[f64], tags: &[usize]) -> f64 {
        let t = self.num_tags;
        assert_eq!(self.len_of(emissions), tags.len());
        let mut s = self.start[tags[0]] + self.end[tags[tags.len() - 1]];
        for (i, &tag) in tags.iter().enumerate() {
            s += emissions[i * t + tag];
            if i > 0 {
                s += self.trans(tags[i - 1], tag);
            }
        }
        s
    }

    fn forward_table(&self, emissions: &[f64]) -> Vec<f64> {
        let t = self.num_tags;
        let n = self.len_of(emissions);
        let mut alpha = vec![0.0; n * t];
        for b in 0..t {
            alpha[b] = self.start[b] + emissions[b];
        }
        for i in 1..n {
            for b in 0..t {
                let prev = &alpha[(i - 1) * t..i * t];
                let lse = log_sum_exp((0..t).map(|a| prev[a] + self.trans(a, b)));
                alpha[i * t + b] = lse + emissions[i * t + b];
            }
        }
        alpha
    }

    /// log Σ over all tag paths of exp(path score).
    pub fn log_partition(&self, emissions: &[f64]) -> f64 {
        let t = self.num_tags;
        let n = self.len_of(emissions);
        let alpha = self.forward_table(emissions);
        log_sum_exp((0..t).map(|b| alpha[(n - 1) * t + b] + self.end[b]))
    }

    pub fn marginals(&self, emissions: &[f64]) -> Marginals {
        let t = self.num_tags;
        let n = self.len_of(emissions);
        let alpha = self.forward_table(emissions);
        let mut beta = vec![0.0; n * t];
        beta[(n - 1) * t..].copy_from_slice(&self.end);
        for i in (0..n - 1).rev() {
            for a in 0..t {
                let next = (0..t).map(|b| self.trans(a, b) + emissions[(i + 1) * t + b] + beta[(i + 1) * t + b]);
                beta[i * t + a] = log_sum_exp(next);
            }
        }
        let log_z = log_sum_exp((0..t).map(|b| alpha[(n - 1) * t + b] + self.end[b]));
        let unary = alpha.iter().zip(&beta).map(|(a, b)| (a + b - log_z).exp()).collect();
        let mut pairwise = vec![0.0; t * t];
        for i in 0..n.saturating_sub(1) {
            for a in 0..t {
                for b in 0..t {
                    pairwise[a * t + b] +=
                        (alpha[i * t + a] + self.trans(a, b) + emissions[(i + 1) * t + b] + beta[(i + 1) * t + b]
                            - log_z)
                            .exp();
                }
            }
        }
        Marginals { log_z, unary, pairwise }
    }

    /// Highest-scoring path and its score. Ties go to the lowest tag index,
    /// both for the final tag and for every back-pointer.
    pub fn viterbi(&self, emissions: &[f64]) -> (Vec<usize>, f64) {
        let t = self.num_tags;
        let n = self.len_of(emissions);
        let mut score: Vec<f64> = (0..t).map(|b| self.start[b] + emissions[b]).collect();
        let mut back = vec![0usize; n * t];
        for i in 1..n {
            let mut next = vec![0.0; t];
            for b in 0..t {
                let mut best = 0;
                for a in 1..t {
                    if score[a] + self.trans(a, b) > score[best] + self.trans(best, b) {
                        best = a;
                    }
                }
                back[i * t + b] = best;
                next[b] = score[best] + self.trans(best, b) + emissions[i * t + b];
            }
            score = next;
        }
        let mut last = 0;
        for b in 1..t {
            if score[b] + self.end[b] > score[last] + self.end[last] {
                last = b;
            }
        }
        let best_score = score[last] + self.end[last];
        let mut path = vec![last; n];
        for i in (1..n).rev() {
            path[i - 1] = back[i * t + path[i]];
        }
        (path, best_score)
    }
}

/// Additive IOB masks: `MASKED` on forbidden `a → b` transitions and on
/// starting with an inside tag, zero elsewhere.
pub fn iob_mask(labels: &LabelSet) -> (Vec<f64>, Vec<f64>) {
    let tags = labels.tags();
    let t = tags.len();
    let mut trans = vec![0.0; t * t];
    for (a, prev) in tags.iter().enumerate() {
        for (b, next) in tags.iter().enumerate() {
            if !is_legal_transition(Some(prev), next) {
                trans[a * t + b] = MASKED;
            }
        }
    }
    let start = tags
        .iter()
        .map(|tag| if is_legal_transition(None, tag) { 0.0 } else { MASKED })
        .collect();
    (trans, start)
}

/// CRF output layer: emission projection plus trainable transition scores.
#[derive(Clone, Debug)]
pub struct Crf {
    pub emission: Linear,
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
    pub num_tags: usize,
    trans_mask: Vec<f64>,
    start_mask: Vec<f64>,
}

impl Crf {
    pub fn new<R: Rng>(params: &mut ParamStore, name: &str, d_model: usize, labels: &LabelSet, rng: &mut R) -> Self {
        let t = labels.len();
        let (trans_mask, start_mask) = iob_mask(labels);
        Crf {
            emission: Linear::new(params, &format!("{name}.emission"), d_model, t, rng),
            transitions: params.add(format!("{name}.transitions"), Tensor::zeros(&[t, t])),
            start: params.add(format!("{name}.start"), Tensor::zeros(&[t])),
            end: params.add(format!("{name}.end"), Tensor::zeros(&[t])),
            num_tags: t,
            trans_mask,
            start_mask,
        }
    }

    /// Current parameters with the mask applied.
    pub fn scores(&self, params: &ParamStore) -> CrfScores {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        CrfScores {
            num_tags: self.num_tags,
            transitions: add(params.get(self.transitions).data(), &self.trans_mask),
            start: add(params.get(self.start).data(), &self.start_mask),
            end: params.get(self.end).data().to_vec(),
        }
    }

    pub fn emissions(&self, tape: &mut Tape, params: &ParamStore, h: Var) -> Result<Var> {
        self.emission.forward(tape, params, h)
    }

    /// Summed negative log-likelihood of the gold paths. `emissions` holds
    /// the rows of all sentences back to back, split by `lens`.
    pub fn nll(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        emissions: Var,
        lens: &[usize],
        gold: &[Vec<usize>],
    ) -> Result<Var> {
        let t = self.num_tags;
        if tape.shape(emissions) != [lens.iter().sum::<usize>(), t] {
            return Err(HmeError::Invalid(format!(
                "emissions {:?} do not match {} tokens × {t} tags",
                tape.shape(emissions),
                lens.iter().sum::<usize>()
            )));
        }
        if gold.len() != lens.len() || gold.iter().zip(lens).any(|(g, &n)| g.len() != n || n == 0) {
            return Err(HmeError::Invalid("gold paths do not match sentence lengths".into()));
        }
        let scores = self.scores(params);
        let em = tape.value(emissions).data();
        let mut total = 0.0;
        let mut d_em = vec![0.0; em.len()];
        let mut d_trans = vec![0.0; t * t];
        let mut d_start = vec![0.0; t];
        let mut d_end = vec![0.0; t];
        let mut offset = 0;
        for (path, &n) in gold.iter().zip(lens) {
            if path.iter().any(|&g| g >= t) {
                return Err(HmeError::Invalid("gold tag index out of range".into()));
            }
            if scores.start[path[0]] <= MASKED / 2.0
                || path.windows(2).any(|w| scores.trans(w[0], w[1]) <= MASKED / 2.0)
            {
                return Err(HmeError::Invalid(
                    "gold tag sequence uses a forbidden transition".into(),
                ));
            }
            let e = &em[offset * t..(offset + n) * t];
            let m = scores.marginals(e);
            total += m.log_z - scores.path_score(e, path);
            for (d, u) in d_em[offset * t..(offset + n) * t].iter_mut().zip(&m.unary) {
                *d = *u;
            }
            for (i, &g) in path.iter().enumerate() {
                d_em[(offset + i) * t + g] -= 1.0;
            }
            for (d, p) in d_trans.iter_mut().zip(&m.pairwise) {
                *d += p;
            }
            for w in path.windows(2) {
                d_trans[w[0] * t + w[1]] -= 1.0;
            }
            for b in 0..t {
                d_start[b] += m.unary[b];
                d_end[b] += m.unary[(n - 1) * t + b];
            }
            d_start[path[0]] -= 1.0;
            d_end[path[n - 1]] -= 1.0;
            offset += n;
        }
        if !total.is_finite() {
            return Err(HmeError::Numerical(format!("CRF log-likelihood is {total}")));
        }
        let trans = tape.param(params, self.transitions);
        let start = tape.param(params, self.start);
        let end = tape.param(params, self.end);
        let op = CrfNll {
            grads: [d_em, d_trans, d_start, d_end],
        };
        Ok(tape.custom(&[emissions, trans, start, end], Tensor::scalar(total), Box::new(op))?)
    }

    /// Viterbi paths for every sentence in a stacked emission matrix.
    pub fn decode(&self, params: &ParamStore, emissions: &Tensor, lens: &[usize]) -> Vec<Vec<usize>> {
        let scores = self.scores(params);
        let t = self.num_tags;
        let mut offset = 0;
        lens.iter()
            .map(|&n| {
                let (path, _) = scores.viterbi(&emissions.data()[offset * t..(offset + n) * t]);
                offset += n;
                path
            })
            .collect()
    }
}

/// Gradient of the summed NLL, computed alongside the forward value.
struct CrfNll {
    grads: [Vec<f64>; 4],
}

impl CustomOp for CrfNll {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = grad_output[0];
        self.grads
            .iter()
            .map(|d| Some(d.iter().map(|v| v * g).collect()))
            .collect()
    }
}

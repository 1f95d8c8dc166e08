//! Checks shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use hme_autodiff::check::{check_params, DEFAULT_STEP};
use hme_autodiff::{ParamStore, Tape, Tensor, Var};
use hme_core::crf::{Crf, CrfScores, MASKED};
use hme_core::iob::{is_legal_transition, LabelSet};
use hme_core::meta::{
    char_encode, concat_baseline, hme_concat, linear_baseline, mme_subword, mme_word, AttentionMode, AttentionScorer,
    ProjectionSet,
};
use hme_core::nn::{EncoderConfig, TransformerEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 100;
pub const LOGZ_TOL: f64 = 1e-9;
pub const SIMPLEX_TOL: f64 = 1e-6;
pub const SHIFT_TOL: f64 = 1e-9;
pub const BASELINE_TOL: f64 = 1e-9;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(x ⊙ W)` for a fixed random `W`, so every output entry matters.
fn weighted_loss(tape: &mut Tape, x: Var, seed: u64) -> hme_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = random_tensor(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn languages(l: usize) -> Vec<String> {
    (0..l).map(|j| format!("l{j}")).collect()
}

fn small_encoder(input_dim: Option<usize>, d: usize) -> EncoderConfig {
    EncoderConfig {
        input_dim,
        d_model: d,
        layers: 1,
        heads: 2,
        ff_dim: 2 * d,
        dropout: 0.0,
    }
}

fn random_lens(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=max)).collect()
}

/// Word-level MME for two levels fed through `hme_concat` with a raw
/// character block; gradients for inputs, projections and scorers.
pub fn grad_mme_hme(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(1..=3);
    let n = rng.random_range(1..=3);
    let d_out = rng.random_range(2..=4);
    let dims: Vec<usize> = (0..l).map(|_| rng.random_range(1..=4)).collect();
    let langs = languages(l);
    let mut params = ParamStore::new();
    let xs: Vec<_> = dims
        .iter()
        .enumerate()
        .map(|(j, &d)| params.add(format!("x{j}"), random_tensor(&mut rng, &[n, d])))
        .collect();
    let ys: Vec<_> = dims
        .iter()
        .enumerate()
        .map(|(j, &d)| params.add(format!("y{j}"), random_tensor(&mut rng, &[n, d])))
        .collect();
    let c = params.add("c", random_tensor(&mut rng, &[n, 2]));
    let proj_a = ProjectionSet::new(&mut params, "pa", &langs, &dims, d_out, &mut rng);
    let proj_b = ProjectionSet::new(&mut params, "pb", &langs, &dims, d_out, &mut rng);
    let score_a = AttentionScorer::new(&mut params, "sa", d_out, &mut rng);
    let score_b = AttentionScorer::new(&mut params, "sb", d_out, &mut rng);
    check_params(
        &mut params,
        None,
        |tape, p| {
            let x: Vec<Var> = xs.iter().map(|&id| tape.param(p, id)).collect();
            let y: Vec<Var> = ys.iter().map(|&id| tape.param(p, id)).collect();
            let a = mme_word(tape, p, &x, &proj_a, &score_a, AttentionMode::Learned).unwrap();
            let b = mme_word(tape, p, &y, &proj_b, &score_b, AttentionMode::Learned).unwrap();
            let cv = tape.param(p, c);
            let h = hme_concat(tape, a.u, Some(b.u), Some(cv)).unwrap();
            weighted_loss(tape, h, seed)
        },
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

/// Subword MME through a shared one-layer encoder.
pub fn grad_mme_subword(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(1..=2);
    let n = rng.random_range(1..=3);
    let d_out = 4;
    let dims: Vec<usize> = (0..l).map(|_| rng.random_range(1..=3)).collect();
    let lens: Vec<Vec<usize>> = (0..l).map(|_| random_lens(&mut rng, n, 3)).collect();
    let langs = languages(l);
    let mut params = ParamStore::new();
    let xs: Vec<_> = dims
        .iter()
        .zip(&lens)
        .enumerate()
        .map(|(j, (&d, ls))| params.add(format!("x{j}"), random_tensor(&mut rng, &[ls.iter().sum(), d])))
        .collect();
    let proj = ProjectionSet::new(&mut params, "p", &langs, &dims, d_out, &mut rng);
    let enc = TransformerEncoder::new(&mut params, "enc", small_encoder(None, d_out), &mut rng).unwrap();
    let scorer = AttentionScorer::new(&mut params, "s", d_out, &mut rng);
    perturb_norms(&mut params, &mut rng);
    check_params(
        &mut params,
        None,
        |tape, p| {
            let x: Vec<Var> = xs.iter().map(|&id| tape.param(p, id)).collect();
            let out = mme_subword(tape, p, &x, &lens, &proj, &enc, &scorer, AttentionMode::Learned).unwrap();
            weighted_loss(tape, out.u, seed)
        },
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

/// Character table lookup, one-layer encoder and mean pooling.
pub fn grad_char_encoder(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let char_dim = 3;
    let vocab = 5;
    let lens = random_lens(&mut rng, n, 4);
    let rows: Vec<usize> = (0..lens.iter().sum()).map(|_| rng.random_range(0..vocab)).collect();
    let mut params = ParamStore::new();
    let table = params.add("chars", random_tensor(&mut rng, &[vocab, char_dim]));
    let enc = TransformerEncoder::new(&mut params, "enc", small_encoder(Some(char_dim), 4), &mut rng).unwrap();
    perturb_norms(&mut params, &mut rng);
    check_params(
        &mut params,
        None,
        |tape, p| {
            let x = tape.gather_rows(p, table, &rows)?;
            let h = char_encode(tape, p, x, &lens, &enc).unwrap();
            weighted_loss(tape, h, seed)
        },
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

/// CRF negative log-likelihood over a batch, including the emission layer.
pub fn grad_crf_nll(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = LabelSet::from_entity_types(&["PER", "LOC"]);
    let d = 3;
    let batch = rng.random_range(1..=3);
    let lens = random_lens(&mut rng, batch, 4);
    let gold: Vec<Vec<usize>> = lens.iter().map(|&n| random_legal_path(&mut rng, &labels, n)).collect();
    let mut params = ParamStore::new();
    let h = params.add("h", random_tensor(&mut rng, &[lens.iter().sum(), d]));
    let crf = Crf::new(&mut params, "crf", d, &labels, &mut rng);
    for id in [crf.transitions, crf.start, crf.end] {
        let shape = params.get(id).shape().to_vec();
        let values = random_tensor(&mut rng, &shape);
        params.get_mut(id).data_mut().copy_from_slice(values.data());
    }
    check_params(
        &mut params,
        None,
        |tape, p| {
            let hv = tape.param(p, h);
            let em = crf.emissions(tape, p, hv).unwrap();
            Ok(crf.nll(tape, p, em, &lens, &gold).unwrap())
        },
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

/// Moves layer-norm gains and biases away from their (1, 0) initial values.
fn perturb_norms(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, name, _)| name.contains("norm") || name.ends_with(".bias"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

pub type GradCase = (&'static str, fn(u64) -> f64);

pub const COMPOSITES: [GradCase; 4] = [
    ("word MME through hme_concat", grad_mme_hme),
    ("subword MME with one-layer encoder", grad_mme_subword),
    ("character encoder", grad_char_encoder),
    ("CRF negative log-likelihood", grad_crf_nll),
];

/// Worst relative error of `case` over `seeds`, with the offending seed.
pub fn sweep(case: fn(u64) -> f64, seeds: u64) -> (f64, u64) {
    (0..seeds)
        .map(|s| (case(s), s))
        .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
}

pub fn random_legal_path(rng: &mut ChaCha8Rng, labels: &LabelSet, n: usize) -> Vec<usize> {
    let mut path = Vec::with_capacity(n);
    let mut prev: Option<usize> = None;
    for _ in 0..n {
        let options: Vec<usize> = (0..labels.len())
            .filter(|&b| is_legal_transition(prev.map(|a| labels.tag(a)), labels.tag(b)))
            .collect();
        let b = options[rng.random_range(0..options.len())];
        path.push(b);
        prev = Some(b);
    }
    path
}

/// Random CRF scores; `integer` draws from {-1, 0, 1} to force ties, and
/// `masked` forbids some transitions and starts (never into tag 0, so the
/// all-zero path stays legal).
pub fn random_scores(rng: &mut ChaCha8Rng, t: usize, integer: bool, masked: bool) -> CrfScores {
    let draw = |rng: &mut ChaCha8Rng| {
        if integer {
            rng.random_range(-1..=1) as f64
        } else {
            rng.random_range(-2.0..2.0)
        }
    };
    let mut s = CrfScores::zeros(t);
    for v in s.transitions.iter_mut().chain(&mut s.start).chain(&mut s.end) {
        *v = draw(rng);
    }
    if masked {
        for (k, v) in s.transitions.iter_mut().enumerate() {
            if k % t != 0 && rng.random_bool(0.25) {
                *v = MASKED;
            }
        }
        for b in 1..t {
            if rng.random_bool(0.25) {
                s.start[b] = MASKED;
            }
        }
    }
    s
}

pub fn random_emissions(rng: &mut ChaCha8Rng, n: usize, t: usize, integer: bool) -> Vec<f64> {
    (0..n * t)
        .map(|_| {
            if integer {
                rng.random_range(-1..=1) as f64
            } else {
                rng.random_range(-3.0..3.0)
            }
        })
        .collect()
}

fn plain_path_score(s: &CrfScores, em: &[f64], path: &[usize]) -> f64 {
    let t = s.num_tags;
    let mut total = s.start[path[0]] + s.end[path[path.len() - 1]];
    for (i, &b) in path.iter().enumerate() {
        total += em[i * t + b];
    }
    for w in path.windows(2) {
        total += s.transitions[w[0] * t + w[1]];
    }
    total
}

pub struct BruteForce {
    pub partition: f64,
    pub best_score: f64,
    /// Among maximal paths, the one that is smallest read from the last
    /// position backwards.
    pub best_path: Vec<usize>,
}

pub fn brute_force(s: &CrfScores, em: &[f64]) -> BruteForce {
    let t = s.num_tags;
    let n = em.len() / t;
    let mut path = vec![0usize; n];
    let mut partition = 0.0;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_path = path.clone();
    loop {
        let score = plain_path_score(s, em, &path);
        partition += score.exp();
        let reverse_smaller = path.iter().rev().lt(best_path.iter().rev());
        if score > best_score || (score == best_score && reverse_smaller) {
            best_score = score;
            best_path = path.clone();
        }
        let mut i = 0;
        loop {
            if i == n {
                return BruteForce {
                    partition,
                    best_score,
                    best_path,
                };
            }
            path[i] += 1;
            if path[i] < t {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// One random `n`-token, `t`-tag instance against exhaustive enumeration.
/// Odd seeds use integer scores so that ties occur.
pub fn crf_instance(seed: u64, n: usize, t: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32) ^ ((t as u64) << 40));
    let integer = seed % 2 == 1;
    let masked = rng.random_bool(0.3);
    let s = random_scores(&mut rng, t, integer, masked);
    let em = random_emissions(&mut rng, n, t, integer);
    let bf = brute_force(&s, &em);
    let z = s.log_partition(&em).exp();
    let rel = (z - bf.partition).abs() / bf.partition;
    if rel > LOGZ_TOL {
        return Err(format!("seed {seed} (n={n}, T={t}): partition rel err {rel:e}"));
    }
    let (path, score) = s.viterbi(&em);
    if path != bf.best_path {
        return Err(format!(
            "seed {seed} (n={n}, T={t}): viterbi {path:?} vs exhaustive {:?}",
            bf.best_path
        ));
    }
    if (score - bf.best_score).abs() > 1e-9 * bf.best_score.abs().max(1.0) {
        return Err(format!("seed {seed}: viterbi score {score} vs {}", bf.best_score));
    }
    Ok(())
}

/// Word-level MME attention invariants for one random configuration:
/// weights on the simplex, invariance to a per-token score shift, output
/// inside the per-coordinate hull of the projections, and reduction to the
/// projection when there is a single language.
pub fn attention_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(1..=5);
    let n = rng.random_range(1..=4);
    let d_out = rng.random_range(1..=6);
    let dims: Vec<usize> = (0..l).map(|_| rng.random_range(1..=6)).collect();
    let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    let mut params = ParamStore::new();
    let proj = ProjectionSet::new(&mut params, "p", &languages(l), &dims, d_out, &mut rng);
    let scorer = AttentionScorer::new(&mut params, "s", d_out, &mut rng);
    for v in params.get_mut(scorer.v).data_mut() {
        *v *= scale;
    }
    let mut tape = Tape::new(0);
    let xs: Vec<Var> = dims
        .iter()
        .map(|&d| {
            let t = random_tensor(&mut rng, &[n, d]);
            tape.constant(t)
        })
        .collect();
    let out = mme_word(&mut tape, &params, &xs, &proj, &scorer, AttentionMode::Learned).map_err(|e| e.to_string())?;
    let alpha = tape.value(out.alpha).clone();
    let u = tape.value(out.u).clone();
    let projected = proj.project(&mut tape, &params, &xs).map_err(|e| e.to_string())?;
    let proj_vals: Vec<Tensor> = projected.iter().map(|&p| tape.value(p).clone()).collect();

    for i in 0..n {
        let row = alpha.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&a| a < 0.0) {
            return Err(format!("seed {seed}: alpha row {row:?} is not on the simplex"));
        }
        for k in 0..d_out {
            let vals: Vec<f64> = proj_vals.iter().map(|p| p.at(i, k)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let x = u.at(i, k);
            let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
            if x < lo - slack || x > hi + slack {
                return Err(format!("seed {seed}: u[{i},{k}] = {x} outside [{lo}, {hi}]"));
            }
        }
    }

    let scores = scorer
        .scores(&mut tape, &params, &projected)
        .map_err(|e| e.to_string())?;
    let shift: Vec<f64> = (0..n)
        .flat_map(|_| {
            let c = rng.random_range(-20.0..20.0);
            std::iter::repeat_n(c, l)
        })
        .collect();
    let shift = tape.constant(Tensor::matrix(n, l, shift));
    let shifted = tape.add(scores, shift).map_err(|e| e.to_string())?;
    let shifted = tape.softmax(shifted, 1).map_err(|e| e.to_string())?;
    for (a, b) in tape.value(shifted).data().iter().zip(alpha.data()) {
        if (a - b).abs() > SHIFT_TOL {
            return Err(format!("seed {seed}: shifted scores changed a weight {b} → {a}"));
        }
    }

    if l == 1 {
        for (a, b) in u.data().iter().zip(proj_vals[0].data()) {
            if a != b {
                return Err(format!(
                    "seed {seed}: single language output {a} differs from projection {b}"
                ));
            }
        }
    }
    Ok(())
}

/// LINEAR equals L times uniformly weighted MME with the same projections,
/// and CONCAT's column blocks are the raw inputs.
pub fn baseline_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(1..=5);
    let n = rng.random_range(1..=4);
    let d_out = rng.random_range(1..=6);
    let dims: Vec<usize> = (0..l).map(|_| rng.random_range(1..=6)).collect();
    let mut params = ParamStore::new();
    let proj = ProjectionSet::new(&mut params, "p", &languages(l), &dims, d_out, &mut rng);
    let scorer = AttentionScorer::new(&mut params, "s", d_out, &mut rng);
    let mut tape = Tape::new(0);
    let inputs: Vec<Tensor> = dims.iter().map(|&d| random_tensor(&mut rng, &[n, d])).collect();
    let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let lin = linear_baseline(&mut tape, &params, &xs, &proj).map_err(|e| e.to_string())?;
    let uni = mme_word(&mut tape, &params, &xs, &proj, &scorer, AttentionMode::Uniform).map_err(|e| e.to_string())?;
    for (a, b) in tape.value(lin).data().iter().zip(tape.value(uni.u).data()) {
        let err = (a - l as f64 * b).abs();
        if err > BASELINE_TOL * (1.0 + a.abs()) {
            return Err(format!("seed {seed}: linear {a} vs {l} × uniform {b}"));
        }
    }
    let cat = concat_baseline(&mut tape, &xs).map_err(|e| e.to_string())?;
    let mut start = 0;
    for (j, input) in inputs.iter().enumerate() {
        let d = dims[j];
        let block = tape.slice(cat, 1, start, start + d).map_err(|e| e.to_string())?;
        if tape.value(block).data() != input.data() {
            return Err(format!("seed {seed}: concat block {j} differs from its input"));
        }
        start += d;
    }
    Ok(())
}

fn tag_rows(rows: &[&str]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| r.split_whitespace().map(String::from).collect())
        .collect()
}

/// Three sentences whose entity counts were tallied by hand:
/// per 2 TP; loc 1 TP, 1 FN; org 0 TP, 2 FP, 1 FN.
pub fn f1_fixture() -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let gold = tag_rows(&["B-per I-per O B-loc", "O B-org I-org O", "B-loc O B-per"]);
    let pred = tag_rows(&["B-per I-per O B-org", "O B-org O O", "B-loc O B-per"]);
    (gold, pred)
}

/// Checks `entity_f1` on the hand-counted fixture and the degenerate
/// all-O and perfect predictions.
pub fn f1_fixture_check() -> Result<(), String> {
    use hme_core::eval::entity_f1;
    let (gold, pred) = f1_fixture();
    let r = entity_f1(&gold, &pred).map_err(|e| e.to_string())?;
    let o = &r.overall;
    let expect = |cond: bool, what: &str| if cond { Ok(()) } else { Err(what.to_string()) };
    expect(
        (o.true_positives, o.false_positives, o.false_negatives) == (3, 2, 2),
        &format!(
            "overall counts {:?}",
            (o.true_positives, o.false_positives, o.false_negatives)
        ),
    )?;
    expect(o.precision == 0.6 && o.recall == 0.6, "overall P/R")?;
    expect((o.f1 - 0.6).abs() < 1e-15, "overall F1")?;
    let per = |t: &str| r.per_type.get(t).cloned().unwrap_or_default();
    expect(per("per").f1 == 1.0, "per F1")?;
    expect(
        per("loc").precision == 1.0 && per("loc").recall == 0.5 && (per("loc").f1 - 2.0 / 3.0).abs() < 1e-15,
        "loc scores",
    )?;
    expect(
        (
            per("org").true_positives,
            per("org").false_positives,
            per("org").false_negatives,
        ) == (0, 2, 1)
            && per("org").f1 == 0.0,
        "org scores",
    )?;
    let all_o: Vec<Vec<String>> = gold.iter().map(|s| vec!["O".to_string(); s.len()]).collect();
    expect(
        entity_f1(&gold, &all_o).map_err(|e| e.to_string())?.f1() == 0.0,
        "all-O F1",
    )?;
    expect(
        entity_f1(&gold, &gold).map_err(|e| e.to_string())?.f1() == 1.0,
        "perfect F1",
    )?;
    Ok(())
}

/// Five models split 3-2 on every token, plus a three-way tie resolved by
/// the best-scoring model.
pub fn vote_fixture_check() -> Result<(), String> {
    use hme_core::eval::{majority_vote, rank_by_score};
    let models = tag_rows(&[
        "B-per I-per O",
        "B-per I-per O",
        "B-per I-per O",
        "B-loc O B-org",
        "B-loc O B-org",
    ]);
    let refs: Vec<&[String]> = models.iter().map(Vec::as_slice).collect();
    let ranking = rank_by_score(&[0.1, 0.2, 0.3, 0.9, 0.8]);
    let voted = majority_vote(&refs, &ranking).map_err(|e| e.to_string())?;
    if voted != models[0] {
        return Err(format!("3-2 vote gave {voted:?}"));
    }
    let tie = tag_rows(&["B-per", "B-loc", "O"]);
    let refs: Vec<&[String]> = tie.iter().map(Vec::as_slice).collect();
    let voted = majority_vote(&refs, &rank_by_score(&[0.7, 0.6, 0.5])).map_err(|e| e.to_string())?;
    if voted != ["B-per"] {
        return Err(format!("three-way tie gave {voted:?}"));
    }
    Ok(())
}

/// Writes a toy corpus into `dir` and returns the run config for `variant`
/// with outputs under `dir/out-<variant>`.
pub fn toy_config(
    dir: &std::path::Path,
    toy: &hme_core::synth::ToyConfig,
    variant: hme_core::model::Variant,
    seed: u64,
) -> hme_core::config::RunConfig {
    use hme_core::synth::{toy_run_config, ToyCorpus};
    let corpus = ToyCorpus::generate(toy).unwrap();
    corpus.write(dir).unwrap();
    let path = dir.join("config.toml");
    std::fs::write(&path, toy_run_config(&corpus, variant, seed)).unwrap();
    hme_core::config::RunConfig::load(&path).unwrap()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

fn check_op<F>(seed: u64, shapes: &[Vec<usize>], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> hme_autodiff::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0A11);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    hme_autodiff::check::check_inputs(
        &inputs,
        |t, v| {
            let y = f(t, v)?;
            weighted_loss(t, y, seed)
        },
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

fn dims(seed: u64, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| rng.random_range(1..=4)).collect()
}

fn op_matmul(seed: u64) -> f64 {
    let d = dims(seed, 3);
    check_op(seed, &[vec![d[0], d[1]], vec![d[1], d[2]]], |t, v| t.matmul(v[0], v[1]))
}

fn op_transpose(seed: u64) -> f64 {
    let d = dims(seed, 2);
    check_op(seed, &[vec![d[0], d[1]]], |t, v| t.transpose(v[0]))
}

fn op_elementwise(seed: u64) -> f64 {
    let d = dims(seed, 2);
    let s = vec![d[0], d[1]];
    check_op(seed, &[s.clone(), s], |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let c = t.mul(b, v[1])?;
        t.scale(c, -0.7)
    })
}

fn op_add_bias(seed: u64) -> f64 {
    let d = dims(seed, 2);
    check_op(seed, &[vec![d[0], d[1]], vec![d[1]]], |t, v| t.add_bias(v[0], v[1]))
}

fn op_tanh(seed: u64) -> f64 {
    let d = dims(seed, 2);
    check_op(seed, &[vec![d[0], d[1]]], |t, v| t.tanh(v[0]))
}

fn op_relu(seed: u64) -> f64 {
    let d = dims(seed, 2);
    check_op(seed, &[vec![d[0], d[1]]], |t, v| t.relu(v[0]))
}

fn op_softmax(seed: u64) -> f64 {
    let d = dims(seed, 2);
    let axis = (seed % 2) as usize;
    check_op(seed, &[vec![d[0], d[1] + 1]], move |t, v| t.softmax(v[0], axis))
}

fn op_concat_slice(seed: u64) -> f64 {
    let d = dims(seed, 2);
    check_op(seed, &[vec![d[0], 2], vec![d[0], d[1]]], |t, v| {
        let c = t.concat(&[v[0], v[1], v[0]], 1)?;
        let s = t.slice(c, 1, 1, 4)?;
        t.concat(&[s, s], 0)
    })
}

fn op_sum_mean(seed: u64) -> f64 {
    let d = dims(seed, 2);
    check_op(seed, &[vec![d[0], d[1]]], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let a = t.mean(sq)?;
        let th = t.tanh(v[0])?;
        let b = t.sum(th)?;
        t.add(a, b)
    })
}

fn op_dropout(seed: u64) -> f64 {
    let d = dims(seed, 2);
    check_op(seed, &[vec![d[0], d[1] + 2]], move |t, v| {
        t.set_train(true);
        t.set_step(seed);
        t.dropout(v[0], 0.3)
    })
}

fn op_layer_norm(seed: u64) -> f64 {
    let d = dims(seed, 2);
    let w = d[1] + 1;
    check_op(seed, &[vec![d[0], w], vec![w], vec![w]], |t, v| {
        let plain = t.layer_norm(v[0], 1e-5)?;
        let affine = t.layer_norm_affine(v[0], v[1], v[2], 1e-5)?;
        t.add(plain, affine)
    })
}

fn op_weighted_sum(seed: u64) -> f64 {
    let d = dims(seed, 3);
    let mut shapes = vec![vec![d[0], d[1]]];
    shapes.extend((0..d[1]).map(|_| vec![d[0], d[2]]));
    check_op(seed, &shapes, |t, v| t.weighted_sum(v[0], &v[1..]))
}

fn op_segment_mean(seed: u64) -> f64 {
    let lens = dims(seed, 3);
    let n = lens.iter().sum();
    check_op(seed, &[vec![n, 3]], move |t, v| t.segment_mean(v[0], &lens))
}

fn op_segment_attention(seed: u64) -> f64 {
    let lens = dims(seed, 3);
    let heads = 1 + (seed % 2) as usize;
    let n = lens.iter().sum();
    let s = vec![n, 2 * heads];
    check_op(seed, &[s.clone(), s.clone(), s], move |t, v| {
        t.segment_attention(v[0], v[1], v[2], heads, &lens)
    })
}

fn op_gather_rows(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let table = params.add("table", random_tensor(&mut rng, &[4, 3]));
    let rows: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..4)).collect();
    check_params(
        &mut params,
        None,
        |t, p| {
            let g = t.gather_rows(p, table, &rows)?;
            weighted_loss(t, g, seed)
        },
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

pub const OPS: [GradCase; 16] = [
    ("matmul", op_matmul),
    ("transpose", op_transpose),
    ("add/sub/mul/scale", op_elementwise),
    ("add_bias", op_add_bias),
    ("tanh", op_tanh),
    ("relu", op_relu),
    ("softmax", op_softmax),
    ("concat/slice", op_concat_slice),
    ("sum/mean", op_sum_mean),
    ("dropout", op_dropout),
    ("layer_norm", op_layer_norm),
    ("weighted_sum", op_weighted_sum),
    ("segment_mean", op_segment_mean),
    ("segment_attention", op_segment_attention),
    ("gather_rows", op_gather_rows),
    ("positional input + encoder", grad_encoder_stack),
];

/// Two-layer encoder with input projection, for the positional path and
/// stacked residual blocks.
fn grad_encoder_stack(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens = random_lens(&mut rng, 2, 3);
    let mut params = ParamStore::new();
    let x = params.add("x", random_tensor(&mut rng, &[lens.iter().sum(), 3]));
    let config = EncoderConfig {
        layers: 2,
        ..small_encoder(Some(3), 4)
    };
    let enc = TransformerEncoder::new(&mut params, "enc", config, &mut rng).unwrap();
    perturb_norms(&mut params, &mut rng);
    check_params(
        &mut params,
        None,
        |t, p| {
            let xv = t.param(p, x);
            let h = enc.forward(t, p, xv, &lens).unwrap();
            weighted_loss(t, h, seed)
        },
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

const ALPHABET: &[char] = &['a', 'b', 'c', 'd', '\u{e9}', '\u{f1}', '\u{fc}', '1', '-'];

pub fn random_word(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    (0..rng.random_range(1..=max_len))
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
        .collect()
}

/// Learns a merge list from a random corpus with the usual greedy
/// most-frequent-pair procedure, so merges build on each other.
pub fn learned_merges(rng: &mut ChaCha8Rng, count: usize) -> Vec<(String, String)> {
    use hme_core::tokenize::END_OF_WORD;
    let mut corpus: Vec<Vec<String>> = (0..200)
        .map(|_| {
            let w = random_word(rng, 8);
            let mut s: Vec<String> = w.chars().map(String::from).collect();
            s.last_mut().unwrap().push_str(END_OF_WORD);
            s
        })
        .collect();
    let mut merges = Vec::new();
    for _ in 0..count {
        let mut freq = std::collections::BTreeMap::new();
        for w in &corpus {
            for p in w.windows(2) {
                *freq.entry((p[0].clone(), p[1].clone())).or_insert(0usize) += 1;
            }
        }
        let Some((best, _)) = freq.into_iter().max_by_key(|(_, c)| *c) else {
            break;
        };
        for w in &mut corpus {
            let mut i = 0;
            while i + 1 < w.len() {
                if w[i] == best.0 && w[i + 1] == best.1 {
                    let right = w.remove(i + 1);
                    w[i].push_str(&right);
                }
                i += 1;
            }
        }
        merges.push(best);
    }
    merges
}

/// Segments `count` random strings with learned merge lists and checks that
/// the pieces concatenate back to the input with one word-final marker.
pub fn bpe_reconstruction(count: usize) -> Result<(), String> {
    use hme_core::tokenize::BpeModel;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let models: Vec<BpeModel> = (0..10)
        .map(|k| BpeModel::new(&format!("m{k}"), learned_merges(&mut rng, 5 + 10 * k)).unwrap())
        .collect();
    for i in 0..count {
        let word = random_word(&mut rng, 12);
        let pieces = models[i % models.len()].apply(&word);
        let joined: String = pieces.iter().map(|p| p.text.as_str()).collect();
        if joined != word || pieces.iter().any(|p| p.text.is_empty()) {
            return Err(format!("{word:?} segmented into {pieces:?}"));
        }
        let ends = pieces.iter().filter(|p| p.end_of_word).count();
        if ends != 1 || !pieces.last().unwrap().end_of_word {
            return Err(format!("{word:?}: end-of-word flags {pieces:?}"));
        }
    }
    Ok(())
}

/// The `lowest` merge fixture and the mention / link / emoji rules.
pub fn bpe_and_preprocess_fixtures() -> Result<(), String> {
    use hme_core::tokenize::{BpeModel, Preprocessor, EMOJI, URL, USR};
    let merges = [("l", "o"), ("lo", "w"), ("e", "s"), ("es", "t</w>")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    let m = BpeModel::new("en", merges).map_err(|e| e.to_string())?;
    let texts: Vec<String> = m.apply("lowest").into_iter().map(|p| p.text).collect();
    if texts != ["low", "est"] {
        return Err(format!("lowest → {texts:?}"));
    }
    let p = Preprocessor::default();
    for (raw, want) in [
        ("@john", USR),
        ("#tbt", USR),
        ("http://example.com/a?b=c", URL),
        ("https://t.co/AbC", URL),
        ("www.example.org", URL),
        ("\u{1F602}", EMOJI),
        ("casa", "casa"),
    ] {
        let got = p.preprocess_token(raw);
        if got != want {
            return Err(format!("{raw:?} → {got:?}, expected {want:?}"));
        }
    }
    Ok(())
}

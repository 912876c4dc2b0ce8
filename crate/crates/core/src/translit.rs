//! Unsupervised transliteration: mine transliteration pairs from 1-1 word
//! alignments with a two-component mixture, train character models on the
//! accepted pairs, and fill decoder OOV slots with rescored candidates.
//!
//! Characters are Unicode scalar values after NFC normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::align::{AlignmentMatrix, Bitext};
use crate::decoder::{NBestList, OovHandler, OptionKind, Translation, Weights, LM, OOV, TRANSLIT};
use crate::lm::{self, LanguageModel, LmError, NgramModel, EOS_ID};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_EM_ROUNDS: usize = 10;
pub const MIN_MINING_PAIRS: usize = 10;
pub const CHAR_LM_ORDER: usize = 3;
pub const DEFAULT_CANDIDATES: usize = 5;
/// Cap on expanded hypotheses per decoder hypothesis.
pub const MAX_EXPANSIONS: usize = 1000;
pub const CHAR_MODEL_ITERATIONS: usize = 10;
/// Strength of the diagonal alignment prior used by the character model.
pub const DIAGONAL_TENSION: f64 = 4.0;
const PROB_FLOOR: f64 = 1e-9;
/// Target characters considered per source character during search.
const OPTIONS_PER_CHAR: usize = 8;
const MIN_LENGTH_VARIANCE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TranslitError {
    #[error("need at least {needed} word pairs to mine, got {found}")]
    TooFewPairs { found: usize, needed: usize },
    #[error("no training pairs")]
    EmptyTraining,
    #[error("cannot transliterate an empty word")]
    EmptyWord,
    #[error("candidate count must be at least 1")]
    ZeroCandidates,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TranslitError + '_ {
    move |source| TranslitError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn chars(word: &str) -> Vec<char> {
    word.nfc().collect()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Unique word-type pairs linked 1-1: the source word has exactly one link
/// and so does the target word it links to.
pub fn harvest_one_to_one(bitext: &Bitext, alignments: &[AlignmentMatrix]) -> Vec<(String, String)> {
    let mut out = BTreeSet::new();
    for ((src, tgt), a) in bitext.iter().zip(alignments) {
        let mut src_links = vec![0usize; src.len()];
        let mut tgt_links = vec![0usize; tgt.len()];
        for &(i, j) in &a.links {
            src_links[i] += 1;
            tgt_links[j] += 1;
        }
        for &(i, j) in &a.links {
            if src_links[i] == 1 && tgt_links[j] == 1 {
                out.insert((src[i].clone(), tgt[j].clone()));
            }
        }
    }
    out.into_iter().collect()
}

/// Character translation table p(target char | source char) with a fixed
/// alignment prior favouring the diagonal. Tension 0 is plain Model 1.
#[derive(Debug, Clone)]
pub struct CharTable {
    source: BTreeMap<char, usize>,
    target: BTreeMap<char, usize>,
    target_chars: Vec<char>,
    /// `t[s][t]`
    t: Vec<Vec<f64>>,
    tension: f64,
}

type CharPair = (Vec<char>, Vec<char>);

impl CharTable {
    fn uniform(pairs: &[CharPair], tension: f64) -> Self {
        let source: BTreeSet<char> = pairs.iter().flat_map(|p| p.0.iter().copied()).collect();
        let target: BTreeSet<char> = pairs.iter().flat_map(|p| p.1.iter().copied()).collect();
        let target_chars: Vec<char> = target.iter().copied().collect();
        let u = 1.0 / target_chars.len().max(1) as f64;
        CharTable {
            source: source.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
            target: target.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
            t: vec![vec![u; target_chars.len()]; source.len()],
            target_chars,
            tension,
        }
    }

    /// p(a_j = i), normalized over source positions.
    fn prior(&self, j: usize, src_len: usize, tgt_len: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..src_len)
            .map(|k| {
                let d = (k as f64 + 0.5) / src_len as f64 - (j as f64 + 0.5) / tgt_len as f64;
                (-self.tension * d.abs()).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / z).collect()
    }

    pub fn prob(&self, s: char, t: char) -> f64 {
        match (self.source.get(&s), self.target.get(&t)) {
            (Some(&i), Some(&j)) => self.t[i][j],
            _ => 0.0,
        }
    }

    pub fn prob_floored(&self, s: char, t: char) -> f64 {
        self.prob(s, t).max(PROB_FLOOR)
    }

    /// Most probable target characters for `s`, best first.
    pub fn best_targets(&self, s: char, k: usize) -> Vec<(char, f64)> {
        let Some(&i) = self.source.get(&s) else { return Vec::new() };
        let mut row: Vec<(char, f64)> = self.target_chars.iter().copied().zip(self.t[i].iter().copied()).collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        row.truncate(k);
        row
    }

    pub fn argmax(&self, s: char) -> Option<char> {
        self.best_targets(s, 1).first().map(|x| x.0)
    }

    /// ln p(target chars | source chars).
    pub fn log_likelihood(&self, src: &[char], tgt: &[char]) -> f64 {
        if src.is_empty() || tgt.is_empty() {
            return 0.0;
        }
        (0..tgt.len())
            .map(|j| {
                let prior = self.prior(j, src.len(), tgt.len());
                let p: f64 = src.iter().zip(&prior).map(|(&s, &a)| a * self.prob(s, tgt[j])).sum();
                p.max(PROB_FLOOR).ln()
            })
            .sum()
    }

    /// Weighted expected counts, then renormalized rows. Rows with no mass
    /// keep their previous values.
    fn em_step(&self, pairs: &[CharPair], weights: &[f64]) -> CharTable {
        let rows = self.t.len();
        let cols = self.target_chars.len();
        let partials: Vec<Vec<f64>> = pairs
            .par_chunks(256)
            .zip(weights.par_chunks(256))
            .map(|(chunk, ws)| {
                let mut c = vec![0.0; rows * cols];
                for ((src, tgt), &w) in chunk.iter().zip(ws) {
                    if w == 0.0 || src.is_empty() || tgt.is_empty() {
                        continue;
                    }
                    let si: Vec<usize> = src.iter().map(|s| self.source[s]).collect();
                    for (j, t) in tgt.iter().enumerate() {
                        let tj = self.target[t];
                        let prior = self.prior(j, src.len(), tgt.len());
                        let parts: Vec<f64> = si.iter().zip(&prior).map(|(&i, &a)| a * self.t[i][tj]).collect();
                        let z: f64 = parts.iter().sum();
                        if z <= 0.0 {
                            continue;
                        }
                        for (&i, p) in si.iter().zip(parts) {
                            c[i * cols + tj] += w * p / z;
                        }
                    }
                }
                c
            })
            .collect();
        let mut counts = vec![0.0; rows * cols];
        for p in partials {
            for (a, b) in counts.iter_mut().zip(p) {
                *a += b;
            }
        }
        let mut next = self.clone();
        for i in 0..rows {
            let row = &counts[i * cols..(i + 1) * cols];
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                next.t[i] = row.iter().map(|c| c / z).collect();
            }
        }
        next
    }
}

fn char_pairs(pairs: &[(String, String)]) -> Vec<CharPair> {
    pairs.iter().map(|(s, t)| (chars(s), chars(t))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedPair {
    pub source: String,
    pub target: String,
    pub posterior: f64,
}

#[derive(Debug, Clone)]
pub struct MinedPairSet {
    pub pairs: Vec<MinedPair>,
    pub threshold: f64,
    /// Prior probability of the transliteration component.
    pub mixture_weight: f64,
    /// Data log-likelihood before the first round and after each round.
    pub log_likelihoods: Vec<f64>,
}

impl MinedPairSet {
    pub fn accepted(&self) -> Vec<&MinedPair> {
        self.pairs.iter().filter(|p| p.posterior >= self.threshold).collect()
    }

    pub fn accepted_pairs(&self) -> Vec<(String, String)> {
        self.accepted()
            .into_iter()
            .map(|p| (p.source.clone(), p.target.clone()))
            .collect()
    }

    pub fn with_threshold(&self, threshold: f64) -> Self {
        MinedPairSet {
            threshold,
            ..self.clone()
        }
    }

    /// `src<TAB>tgt<TAB>posterior`, all pairs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(out, "{}\t{}\t{}", p.source, p.target, p.posterior);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), TranslitError> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn parse(text: &str, threshold: f64) -> Result<Self, TranslitError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: &str| TranslitError::Parse {
                line: i + 1,
                message: message.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err("expected src<TAB>tgt<TAB>posterior"));
            }
            let posterior: f64 = f[2].trim().parse().map_err(|_| err("bad posterior"))?;
            if !(0.0..=1.0).contains(&posterior) {
                return Err(err("posterior outside [0, 1]"));
            }
            pairs.push(MinedPair {
                source: f[0].to_string(),
                target: f[1].to_string(),
                posterior,
            });
        }
        let mixture_weight = if pairs.is_empty() {
            0.0
        } else {
            pairs.iter().map(|p| p.posterior).sum::<f64>() / pairs.len() as f64
        };
        Ok(MinedPairSet {
            pairs,
            threshold,
            mixture_weight,
            log_likelihoods: Vec::new(),
        })
    }

    pub fn read(path: &Path, threshold: f64) -> Result<Self, TranslitError> {
        MinedPairSet::parse(&std::fs::read_to_string(path).map_err(io_err(path))?, threshold)
    }
}

struct Mixture {
    table: CharTable,
    unigram: Vec<f64>,
    weight: f64,
}

impl Mixture {
    /// Per-pair posteriors of the transliteration component and the total
    /// data log-likelihood.
    fn e_step(&self, pairs: &[CharPair]) -> (Vec<f64>, f64) {
        let lw = self.weight.clamp(1e-12, 1.0 - 1e-12);
        let scored: Vec<(f64, f64)> = pairs
            .par_iter()
            .map(|(s, t)| {
                let a = lw.ln() + self.table.log_likelihood(s, t);
                let b = (1.0 - lw).ln()
                    + t.iter()
                        .map(|c| self.unigram[self.table.target[c]].max(PROB_FLOOR).ln())
                        .sum::<f64>();
                let total = log_sum_exp(a, b);
                ((a - total).exp().clamp(0.0, 1.0), total)
            })
            .collect();
        let ll = scored.iter().map(|x| x.1).sum();
        (scored.into_iter().map(|x| x.0).collect(), ll)
    }

    fn m_step(&mut self, pairs: &[CharPair], posteriors: &[f64]) {
        self.table = self.table.em_step(pairs, posteriors);
        let mut counts = vec![0.0; self.unigram.len()];
        for ((_, t), &p) in pairs.iter().zip(posteriors) {
            for c in t {
                counts[self.table.target[c]] += 1.0 - p;
            }
        }
        let z: f64 = counts.iter().sum();
        if z > 0.0 {
            self.unigram = counts.into_iter().map(|c| c / z).collect();
        }
        self.weight = posteriors.iter().sum::<f64>() / posteriors.len() as f64;
    }
}

/// Mixture EM separating transliterations from other translations: a
/// character Model 1 component against independent target-character
/// unigrams. Both start uniform with equal weight.
pub fn mine_pairs(pairs: &[(String, String)], em_rounds: usize) -> Result<MinedPairSet, TranslitError> {
    if pairs.len() < MIN_MINING_PAIRS {
        return Err(TranslitError::TooFewPairs {
            found: pairs.len(),
            needed: MIN_MINING_PAIRS,
        });
    }
    let cp = char_pairs(pairs);
    let table = CharTable::uniform(&cp, 0.0);
    let u = 1.0 / table.target_chars.len().max(1) as f64;
    let mut mix = Mixture {
        unigram: vec![u; table.target_chars.len()],
        table,
        weight: 0.5,
    };
    let mut log_likelihoods = Vec::with_capacity(em_rounds + 1);
    let (mut posteriors, mut ll) = mix.e_step(&cp);
    log_likelihoods.push(ll);
    for round in 0..em_rounds {
        mix.m_step(&cp, &posteriors);
        (posteriors, ll) = mix.e_step(&cp);
        log::debug!("mining round {}: log-likelihood {ll:.4}, weight {:.3}", round + 1, mix.weight);
        log_likelihoods.push(ll);
    }
    Ok(MinedPairSet {
        pairs: pairs
            .iter()
            .zip(posteriors)
            .map(|((s, t), posterior)| MinedPair {
                source: s.clone(),
                target: t.clone(),
                posterior,
            })
            .collect(),
        threshold: DEFAULT_THRESHOLD,
        mixture_weight: mix.weight,
        log_likelihoods,
    })
}

/// Character models trained on accepted transliteration pairs.
#[derive(Debug, Clone)]
pub struct CharModel {
    /// p(target char | source char)
    pub forward: CharTable,
    /// p(source char | target char)
    pub reverse: CharTable,
    pub lm: NgramModel,
    /// Mean and variance of target/source length ratios.
    pub length_mean: f64,
    pub length_variance: f64,
}

fn train_table(pairs: &[CharPair], iterations: usize) -> CharTable {
    let weights = vec![1.0; pairs.len()];
    let mut table = CharTable::uniform(pairs, DIAGONAL_TENSION);
    for _ in 0..iterations {
        table = table.em_step(pairs, &weights);
    }
    table
}

fn spaced(word: &[char]) -> String {
    let mut s = String::with_capacity(word.len() * 2);
    for (i, c) in word.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push(*c);
    }
    s
}

pub fn train_char_model(pairs: &[(String, String)]) -> Result<CharModel, TranslitError> {
    let cp: Vec<CharPair> = char_pairs(pairs)
        .into_iter()
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .collect();
    if cp.is_empty() {
        return Err(TranslitError::EmptyTraining);
    }
    let forward = train_table(&cp, CHAR_MODEL_ITERATIONS);
    let flipped: Vec<CharPair> = cp.iter().map(|(s, t)| (t.clone(), s.clone())).collect();
    let reverse = train_table(&flipped, CHAR_MODEL_ITERATIONS);
    let lm = lm::train(cp.iter().map(|(_, t)| spaced(t)), CHAR_LM_ORDER)?;
    let ratios: Vec<f64> = cp.iter().map(|(s, t)| t.len() as f64 / s.len() as f64).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ratios.len() as f64;
    Ok(CharModel {
        forward,
        reverse,
        lm,
        length_mean: mean,
        length_variance: var,
    })
}

impl CharModel {
    /// Trains on the accepted pairs of a mined-pairs file.
    pub fn from_mined(set: &MinedPairSet) -> Result<Self, TranslitError> {
        train_char_model(&set.accepted_pairs())
    }

    fn length_log_density(&self, src_len: usize, tgt_len: usize) -> f64 {
        let var = self.length_variance.max(MIN_LENGTH_VARIANCE);
        let r = tgt_len as f64 / src_len as f64;
        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (r - self.length_mean).powi(2) / (2.0 * var)
    }

    fn emission(&self, s: char, t: char) -> f64 {
        self.forward.prob_floored(s, t).ln() + self.reverse.prob_floored(t, s).ln()
    }

    fn options(&self, s: char) -> Vec<char> {
        let best = self.forward.best_targets(s, OPTIONS_PER_CHAR);
        if best.is_empty() {
            vec![s]
        } else {
            best.into_iter().map(|x| x.0).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslitCandidate {
    pub text: String,
    pub score: f64,
}

#[derive(Clone)]
struct CharHyp {
    output: Vec<char>,
    state: lm::QueryState,
    score: f64,
}

/// Monotone character beam search. Each source character emits one or
/// two target characters; the score adds both translation directions, the
/// character LM (natural log) and the length-ratio log-density.
pub fn transliterate(word: &str, model: &CharModel, n: usize) -> Result<Vec<TranslitCandidate>, TranslitError> {
    if n == 0 {
        return Err(TranslitError::ZeroCandidates);
    }
    let src = chars(word);
    if src.is_empty() {
        return Err(TranslitError::EmptyWord);
    }
    let beam = (4 * n).max(16);
    let ln10 = std::f64::consts::LN_10;
    let lm = &model.lm;
    let extend = |h: &CharHyp, cs: &[char], s: char| -> CharHyp {
        let mut out = h.clone();
        for &c in cs {
            let (p, next) = lm.score(&out.state, lm.word_id(&c.to_string()));
            out.score += model.emission(s, c) + ln10 * p;
            out.state = next;
            out.output.push(c);
        }
        out
    };
    let mut stack = vec![CharHyp {
        output: Vec::new(),
        state: lm.begin_state(),
        score: 0.0,
    }];
    for &s in &src {
        let opts = model.options(s);
        let mut next: Vec<CharHyp> = Vec::new();
        for h in &stack {
            for &a in &opts {
                next.push(extend(h, &[a], s));
                for &b in &opts {
                    next.push(extend(h, &[a, b], s));
                }
            }
        }
        next.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.output.cmp(&b.output)));
        next.truncate(beam);
        stack = next;
    }
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for h in stack {
        let score = h.score + ln10 * lm.score(&h.state, EOS_ID).0 + model.length_log_density(src.len(), h.output.len());
        let text: String = h.output.iter().collect();
        let e = best.entry(text).or_insert(f64::NEG_INFINITY);
        if score > *e {
            *e = score;
        }
    }
    let mut out: Vec<TranslitCandidate> = best.into_iter().map(|(text, score)| TranslitCandidate { text, score }).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.text.cmp(&b.text)));
    out.truncate(n);
    Ok(out)
}

/// Candidate scores turned into log-probabilities over the list.
pub fn log_softmax(cands: &[TranslitCandidate]) -> Vec<(String, f64)> {
    let z = cands.iter().fold(f64::NEG_INFINITY, |acc, c| log_sum_exp(acc, c.score));
    cands.iter().map(|c| (c.text.clone(), c.score - z)).collect()
}

/// Transliterates many words in parallel; failures give empty lists.
pub fn transliterate_all(words: &BTreeSet<String>, model: &CharModel, n: usize) -> BTreeMap<String, Vec<TranslitCandidate>> {
    let list: Vec<&String> = words.iter().collect();
    let results: Vec<Vec<TranslitCandidate>> = list
        .par_iter()
        .map(|w| transliterate(w, model, n).unwrap_or_default())
        .collect();
    list.into_iter().cloned().zip(results).collect()
}

/// `word<TAB>candidate<TAB>score`, n rows per word.
pub fn candidates_to_text(cands: &BTreeMap<String, Vec<TranslitCandidate>>) -> String {
    let mut out = String::new();
    for (w, list) in cands {
        for c in list {
            let _ = writeln!(out, "{w}\t{}\t{}", c.text, c.score);
        }
    }
    out
}

pub fn write_candidates(path: &Path, cands: &BTreeMap<String, Vec<TranslitCandidate>>) -> Result<(), TranslitError> {
    std::fs::write(path, candidates_to_text(cands)).map_err(io_err(path))
}

pub fn parse_candidates(text: &str) -> Result<BTreeMap<String, Vec<TranslitCandidate>>, TranslitError> {
    let mut out: BTreeMap<String, Vec<TranslitCandidate>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = |message: &str| TranslitError::Parse {
            line: i + 1,
            message: message.to_string(),
        };
        if f.len() != 3 {
            return Err(err("expected word<TAB>candidate<TAB>score"));
        }
        let score: f64 = f[2].trim().parse().map_err(|_| err("bad score"))?;
        out.entry(f[0].to_string()).or_default().push(TranslitCandidate {
            text: f[1].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn read_candidates(path: &Path) -> Result<BTreeMap<String, Vec<TranslitCandidate>>, TranslitError> {
    parse_candidates(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

/// Offers transliterations as decoder options, scored by log-softmax.
pub struct TranslitHandler<'a> {
    pub model: &'a CharModel,
    pub n: usize,
}

impl OovHandler for TranslitHandler<'_> {
    fn candidates(&self, word: &str) -> Vec<(String, f64)> {
        transliterate(word, self.model, self.n)
            .map(|c| log_softmax(&c))
            .unwrap_or_default()
    }
}

/// Expands the passthrough slots of every hypothesis with transliteration
/// candidates, rescores the word LM over each full sentence and re-ranks.
///
/// A candidate sets the slot's `translit` feature to its log-softmax score
/// and drops its `oov` penalty; keeping the passthrough word changes
/// neither. When the cross-product exceeds [`MAX_EXPANSIONS`] the partial
/// expansions with the best weighted feature change survive, and the
/// all-passthrough expansion is always kept.
pub fn integrate_oov_with<M: LanguageModel>(
    nbest: &NBestList,
    candidates: &dyn Fn(&str) -> Vec<(String, f64)>,
    lm: &M,
    weights: &Weights,
) -> NBestList {
    let mut out = NBestList::default();
    let gain = |score: f64| weights.get(TRANSLIT) * score + weights.get(OOV);
    for hyp in &nbest.entries {
        let slots = hyp.oov_slots();
        if slots.is_empty() {
            out.entries.push(hyp.clone());
            continue;
        }
        let options: Vec<Vec<(String, f64)>> = slots.iter().map(|&(pos, _)| candidates(&hyp.tokens[pos])).collect();
        // choice per slot: None keeps the passthrough word
        let mut partial: Vec<(Vec<Option<usize>>, f64)> = vec![(Vec::new(), 0.0)];
        for opts in &options {
            let mut next = Vec::with_capacity(partial.len() * (opts.len() + 1));
            for (choices, g) in &partial {
                let mut c = choices.clone();
                c.push(None);
                next.push((c, *g));
                for (k, (_, score)) in opts.iter().enumerate() {
                    let mut c = choices.clone();
                    c.push(Some(k));
                    next.push((c, g + gain(*score)));
                }
            }
            if next.len() > MAX_EXPANSIONS {
                next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                let keep_all_none = |c: &Vec<Option<usize>>| c.iter().all(Option::is_none);
                let fallback = next.iter().position(|(c, _)| keep_all_none(c)).expect("passthrough expansion");
                if fallback >= MAX_EXPANSIONS {
                    let item = next.remove(fallback);
                    next.truncate(MAX_EXPANSIONS - 1);
                    next.push(item);
                } else {
                    next.truncate(MAX_EXPANSIONS);
                }
            }
            partial = next;
        }
        for (choices, _) in partial {
            out.entries.push(expand(hyp, &slots, &options, &choices, lm, weights));
        }
    }
    out.normalize(usize::MAX);
    out
}

fn expand<M: LanguageModel>(
    hyp: &Translation,
    slots: &[(usize, usize)],
    options: &[Vec<(String, f64)>],
    choices: &[Option<usize>],
    lm: &M,
    weights: &Weights,
) -> Translation {
    let mut t = hyp.clone();
    if choices.iter().all(Option::is_none) {
        return t;
    }
    let mut replaced: BTreeMap<usize, &str> = BTreeMap::new();
    for ((&(pos, _), opts), choice) in slots.iter().zip(options).zip(choices) {
        if let Some(k) = *choice {
            let (text, score) = &opts[k];
            t.tokens[pos] = text.clone();
            t.features[TRANSLIT] += score;
            t.features[OOV] += 1.0;
            replaced.insert(pos, text);
        }
    }
    let mut pos = 0;
    for seg in &mut t.segments {
        if seg.kind == OptionKind::Passthrough {
            if let Some(text) = replaced.get(&pos) {
                seg.target = vec![text.to_string()];
                seg.kind = OptionKind::Candidate;
            }
        }
        pos += seg.target.len();
    }
    t.features[LM] = lm.sentence_log10(&t.tokens) * std::f64::consts::LN_10;
    t.total = weights.dot(&t.features);
    t
}

/// [`integrate_oov_with`] using `n` fresh transliterations per OOV word.
pub fn integrate_oov<M: LanguageModel>(nbest: &NBestList, model: &CharModel, lm: &M, weights: &Weights, n: usize) -> NBestList {
    let handler = TranslitHandler { model, n };
    integrate_oov_with(nbest, &|w| handler.candidates(w), lm, weights)
}

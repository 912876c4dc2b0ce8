//! Stack-based phrase decoder with distance distortion, n-best output and a
//! grid line-search weight tuner.
//!
//! Feature values are natural logs or plain counts; the language model is
//! queried in log10 and converted here. The future cost estimate is a
//! heuristic and not guaranteed admissible.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::lm::{LanguageModel, QueryState, EOS_ID};
use crate::metrics::BleuStats;
use crate::phrase::PhraseTable;
use crate::DetMap;

pub const NUM_FEATURES: usize = 9;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "tm_pts",
    "tm_pst",
    "tm_lts",
    "tm_lst",
    "lm",
    "word_penalty",
    "distortion",
    "oov",
    "translit",
];
pub const LM: usize = 4;
pub const WORD_PENALTY: usize = 5;
pub const DISTORTION: usize = 6;
pub const OOV: usize = 7;
pub const TRANSLIT: usize = 8;

pub const DEFAULT_BEAM: usize = 100;
pub const DEFAULT_DISTORTION_LIMIT: usize = 6;
pub const DEFAULT_NBEST: usize = 100;
pub const DEFAULT_TABLE_LIMIT: usize = 20;

pub type Features = [f64; NUM_FEATURES];

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("expected {expected} weights, got {found}")]
    WeightCount { expected: usize, found: usize },
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("empty development set")]
    EmptyDev,
    #[error("{0} development sentences but {1} references")]
    DevMismatch(usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DecoderError + '_ {
    move |source| DecoderError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Log-linear weights in [`FEATURE_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    values: Vec<f64>,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            values: vec![0.2, 0.2, 0.2, 0.2, 0.5, -0.2, 0.3, 1.0, 1.0],
        }
    }
}

impl Weights {
    pub fn new(values: Vec<f64>) -> Result<Self, DecoderError> {
        if values.len() != NUM_FEATURES {
            return Err(DecoderError::WeightCount {
                expected: NUM_FEATURES,
                found: values.len(),
            });
        }
        Ok(Weights { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, feature: usize) -> f64 {
        self.values[feature]
    }

    pub fn set(&mut self, feature: usize, value: f64) {
        self.values[feature] = value;
    }

    pub fn by_name(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.values[i])
    }

    pub fn dot(&self, features: &[f64]) -> f64 {
        self.values.iter().zip(features).map(|(w, f)| w * f).sum()
    }

    /// `name = value` lines; names missing from the text keep their
    /// default value.
    pub fn parse(text: &str) -> Result<Self, DecoderError> {
        let mut w = Weights::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| DecoderError::Parse { line: i + 1, message };
            let (name, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `name = value`, got {line:?}")))?;
            let name = name.trim();
            let idx = FEATURE_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| parse_err(format!("unknown feature {name:?}")))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad value {:?}", value.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite weight for {name}")));
            }
            w.values[idx] = v;
        }
        Ok(w)
    }

    pub fn to_text(&self) -> String {
        FEATURE_NAMES
            .iter()
            .zip(&self.values)
            .map(|(n, v)| format!("{n} = {v}\n"))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self, DecoderError> {
        Weights::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), DecoderError> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub weights: Weights,
    pub beam_size: usize,
    /// `None` leaves reordering unlimited.
    pub distortion_limit: Option<usize>,
    pub nbest_size: usize,
    /// Options kept per source span, best first. `None` keeps all.
    pub table_limit: Option<usize>,
    pub recombine: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            weights: Weights::default(),
            beam_size: DEFAULT_BEAM,
            distortion_limit: Some(DEFAULT_DISTORTION_LIMIT),
            nbest_size: DEFAULT_NBEST,
            table_limit: Some(DEFAULT_TABLE_LIMIT),
            recombine: true,
        }
    }
}

impl DecoderConfig {
    /// No pruning of any kind; exact search for short inputs.
    pub fn exhaustive(weights: Weights) -> Self {
        DecoderConfig {
            weights,
            beam_size: usize::MAX,
            distortion_limit: None,
            nbest_size: usize::MAX,
            table_limit: None,
            recombine: true,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.weights.values.len() != NUM_FEATURES {
            return Err(DecoderError::WeightCount {
                expected: NUM_FEATURES,
                found: self.weights.values.len(),
            });
        }
        if self.beam_size == 0 {
            return Err(DecoderError::Config("beam size must be at least 1".into()));
        }
        if self.nbest_size == 0 {
            return Err(DecoderError::Config("n-best size must be at least 1".into()));
        }
        if self.table_limit == Some(0) {
            return Err(DecoderError::Config("table limit must be at least 1".into()));
        }
        Ok(())
    }
}

/// Supplies replacement candidates for source words with no single-word
/// table entry. The decoder always adds a passthrough option as well.
pub trait OovHandler: Sync {
    /// Candidates with their `translit` feature values.
    fn candidates(&self, word: &str) -> Vec<(String, f64)>;
}

/// Copies unknown words to the output unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl OovHandler for Passthrough {
    fn candidates(&self, _word: &str) -> Vec<(String, f64)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OptionKind {
    Table,
    /// Unknown word copied verbatim.
    Passthrough,
    /// Unknown word replaced by an [`OovHandler`] candidate.
    Candidate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub source: (usize, usize),
    pub target: Vec<String>,
    pub kind: OptionKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Translation {
    pub tokens: Vec<String>,
    pub features: Features,
    pub total: f64,
    /// Phrases in output order.
    pub segments: Vec<Segment>,
}

impl Translation {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Output positions filled by passthrough words, with their source index.
    pub fn oov_slots(&self) -> Vec<(usize, usize)> {
        let mut pos = 0;
        let mut out = Vec::new();
        for s in &self.segments {
            if s.kind == OptionKind::Passthrough {
                out.push((pos, s.source.0));
            }
            pos += s.target.len();
        }
        out
    }
}

/// Candidates sorted by total descending, output strings unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NBestList {
    pub entries: Vec<Translation>,
}

impl NBestList {
    pub fn best(&self) -> Option<&Translation> {
        self.entries.first()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts by total descending, ties by output string, drops repeated
    /// outputs (keeping the best) and truncates.
    pub fn normalize(&mut self, limit: usize) {
        self.entries.sort_by(|a, b| {
            b.total
                .total_cmp(&a.total)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        let mut seen = crate::DetSet::default();
        self.entries.retain(|t| seen.insert(t.tokens.clone()));
        self.entries.truncate(limit);
    }
}

#[derive(Debug, Clone)]
struct TranslationOption {
    start: usize,
    end: usize,
    target: Vec<String>,
    /// Everything but lm and distortion.
    features: Features,
    kind: OptionKind,
    /// Weighted static features plus a context-free LM estimate.
    estimate: f64,
}

const LN_10: f64 = std::f64::consts::LN_10;

fn lm_estimate<M: LanguageModel>(lm: &M, words: &[String]) -> f64 {
    let mut state = lm.null_state();
    let mut total = 0.0;
    for w in words {
        let (p, s) = lm.score(&state, lm.word_id(w));
        total += p;
        state = s;
    }
    total * LN_10
}

fn collect_options<M: LanguageModel>(
    sentence: &[String],
    table: &PhraseTable,
    lm: &M,
    config: &DecoderConfig,
    handler: &dyn OovHandler,
) -> Vec<Vec<TranslationOption>> {
    let n = sentence.len();
    let w = &config.weights;
    let max_len = table.max_source_len().max(1);
    let make = |start: usize, end: usize, target: Vec<String>, features: Features, kind| {
        let estimate = w.dot(&features) + w.get(LM) * lm_estimate(lm, &target);
        TranslationOption {
            start,
            end,
            target,
            features,
            kind,
            estimate,
        }
    };
    // by_start[i]: options beginning at position i
    let mut by_start: Vec<Vec<TranslationOption>> = vec![Vec::new(); n];
    for start in 0..n {
        for end in start + 1..=(start + max_len).min(n) {
            let mut span: Vec<TranslationOption> = table
                .lookup(&sentence[start..end])
                .iter()
                .map(|e| {
                    let mut f = [0.0; NUM_FEATURES];
                    f[..4].copy_from_slice(&e.features);
                    f[WORD_PENALTY] = -(e.target.len() as f64);
                    make(start, end, e.target.clone(), f, OptionKind::Table)
                })
                .collect();
            span.sort_by(|a, b| b.estimate.total_cmp(&a.estimate).then_with(|| a.target.cmp(&b.target)));
            if let Some(limit) = config.table_limit {
                span.truncate(limit);
            }
            by_start[start].extend(span);
        }
        if table.lookup(&sentence[start..start + 1]).is_empty() {
            let word = &sentence[start];
            let mut f = [0.0; NUM_FEATURES];
            f[WORD_PENALTY] = -1.0;
            f[OOV] = -1.0;
            by_start[start].push(make(start, start + 1, vec![word.clone()], f, OptionKind::Passthrough));
            for (cand, score) in handler.candidates(word) {
                if cand == *word || !score.is_finite() {
                    continue;
                }
                let mut f = [0.0; NUM_FEATURES];
                f[WORD_PENALTY] = -1.0;
                f[TRANSLIT] = score;
                by_start[start].push(make(start, start + 1, vec![cand], f, OptionKind::Candidate));
            }
        }
    }
    by_start
}

/// Best achievable estimate for every span, combining adjacent spans.
fn future_cost_table(n: usize, options: &[Vec<TranslationOption>]) -> Vec<Vec<f64>> {
    let mut fc = vec![vec![f64::NEG_INFINITY; n + 1]; n + 1];
    for opts in options {
        for o in opts {
            let cell = &mut fc[o.start][o.end];
            *cell = cell.max(o.estimate);
        }
    }
    for len in 2..=n {
        for i in 0..=n - len {
            let j = i + len;
            for k in i + 1..j {
                let combined = fc[i][k] + fc[k][j];
                if combined > fc[i][j] {
                    fc[i][j] = combined;
                }
            }
        }
    }
    fc
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Coverage(Vec<u64>);

impl Coverage {
    fn new(n: usize) -> Self {
        Coverage(vec![0; n.div_ceil(64).max(1)])
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn set_range(&mut self, start: usize, end: usize) {
        for i in start..end {
            self.0[i / 64] |= 1 << (i % 64);
        }
    }

    fn any_in(&self, start: usize, end: usize) -> bool {
        (start..end).any(|i| self.get(i))
    }

    fn first_gap(&self, n: usize) -> usize {
        (0..n).find(|&i| !self.get(i)).unwrap_or(n)
    }

    /// Sum of future costs over maximal uncovered runs.
    fn future(&self, n: usize, fc: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        let mut i = 0;
        while i < n {
            if self.get(i) {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && !self.get(i) {
                i += 1;
            }
            total += fc[start][i];
        }
        total
    }
}

#[derive(Debug, Clone)]
struct Hyp {
    coverage: Coverage,
    covered: usize,
    last_end: usize,
    lm_state: QueryState,
    features: Features,
    score: f64,
    future: f64,
    back: Option<usize>,
    option: Option<(usize, usize)>,
}

type RecombKey = (Coverage, QueryState, usize);

struct Search<'a> {
    options: &'a [Vec<TranslationOption>],
    arena: Vec<Hyp>,
}

impl<'a> Search<'a> {
    fn option(&self, at: (usize, usize)) -> &'a TranslationOption {
        &self.options[at.0][at.1]
    }

    /// Output tokens of a hypothesis whose back-links are in the arena.
    fn output(&self, hyp: &Hyp) -> Vec<String> {
        let mut parts: Vec<&[String]> = Vec::new();
        if let Some(o) = hyp.option {
            parts.push(&self.option(o).target);
        }
        let mut cur = hyp.back;
        while let Some(i) = cur {
            let h = &self.arena[i];
            if let Some(o) = h.option {
                parts.push(&self.option(o).target);
            }
            cur = h.back;
        }
        parts.iter().rev().flat_map(|p| p.iter().cloned()).collect()
    }

    fn segments(&self, hyp: &Hyp) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut node = Some(hyp);
        while let Some(h) = node {
            if let Some(o) = h.option {
                let o = self.option(o);
                out.push(Segment {
                    source: (o.start, o.end),
                    target: o.target.clone(),
                    kind: o.kind,
                });
            }
            node = h.back.map(|i| &self.arena[i]);
        }
        out.reverse();
        out
    }

    /// Higher score first; equal scores by output string.
    fn compare(&self, a: &Hyp, b: &Hyp, with_future: bool) -> Ordering {
        let (sa, sb) = if with_future {
            (a.score + a.future, b.score + b.future)
        } else {
            (a.score, b.score)
        };
        sb.total_cmp(&sa).then_with(|| self.output(a).cmp(&self.output(b)))
    }
}

struct Stack {
    hyps: Vec<Hyp>,
    index: DetMap<RecombKey, usize>,
}

impl Stack {
    fn new() -> Self {
        Stack {
            hyps: Vec::new(),
            index: DetMap::default(),
        }
    }

    fn prune(&mut self, search: &Search, beam: usize) {
        if self.hyps.len() <= beam {
            return;
        }
        self.hyps.sort_by(|a, b| search.compare(a, b, true));
        self.hyps.truncate(beam);
        self.index.clear();
        for (i, h) in self.hyps.iter().enumerate() {
            self.index
                .insert((h.coverage.clone(), h.lm_state.clone(), h.last_end), i);
        }
    }

    fn add(&mut self, search: &Search, hyp: Hyp, recombine: bool, beam: usize) {
        if recombine {
            let key = (hyp.coverage.clone(), hyp.lm_state.clone(), hyp.last_end);
            if let Some(&i) = self.index.get(&key) {
                if search.compare(&hyp, &self.hyps[i], false) == Ordering::Less {
                    self.hyps[i] = hyp;
                }
                return;
            }
            self.index.insert(key, self.hyps.len());
        }
        self.hyps.push(hyp);
        if beam != usize::MAX && self.hyps.len() >= beam.saturating_mul(2) {
            self.prune(search, beam);
        }
    }
}

/// Translates one tokenized sentence. An empty input gives a single empty
/// translation scored only by the end-of-sentence LM probability.
pub fn decode<M: LanguageModel>(
    sentence: &[String],
    table: &PhraseTable,
    lm: &M,
    config: &DecoderConfig,
    handler: &dyn OovHandler,
) -> Result<NBestList, DecoderError> {
    config.validate()?;
    let n = sentence.len();
    let w = &config.weights;
    let options = collect_options(sentence, table, lm, config, handler);
    let fc = future_cost_table(n, &options);
    let mut search = Search {
        options: &options,
        arena: Vec::new(),
    };

    let mut initial = Hyp {
        coverage: Coverage::new(n),
        covered: 0,
        last_end: 0,
        lm_state: lm.begin_state(),
        features: [0.0; NUM_FEATURES],
        score: 0.0,
        future: if n > 0 { fc[0][n] } else { 0.0 },
        back: None,
        option: None,
    };
    if n == 0 {
        initial.features[LM] = lm.score(&initial.lm_state, EOS_ID).0 * LN_10;
        initial.score = w.dot(&initial.features);
    }
    let mut stacks: Vec<Stack> = (0..=n).map(|_| Stack::new()).collect();
    stacks[0].hyps.push(initial);

    for s in 0..n {
        let mut stack = std::mem::replace(&mut stacks[s], Stack::new());
        stack.prune(&search, config.beam_size);
        stack.hyps.sort_by(|a, b| search.compare(a, b, true));
        for hyp in stack.hyps {
            let id = search.arena.len();
            search.arena.push(hyp);
            let hyp = &search.arena[id];
            let mut expansions = Vec::new();
            for (start, opts) in options.iter().enumerate() {
                if hyp.coverage.get(start) {
                    continue;
                }
                if let Some(d) = config.distortion_limit {
                    if start.abs_diff(hyp.last_end) > d {
                        continue;
                    }
                }
                for (oi, o) in opts.iter().enumerate() {
                    if hyp.coverage.any_in(o.start, o.end) {
                        continue;
                    }
                    let mut coverage = hyp.coverage.clone();
                    coverage.set_range(o.start, o.end);
                    let covered = hyp.covered + (o.end - o.start);
                    if let Some(d) = config.distortion_limit {
                        // the leftmost gap must stay reachable from here
                        let gap = coverage.first_gap(n);
                        if gap < o.end && o.end - gap > d {
                            continue;
                        }
                    }
                    let mut features = hyp.features;
                    for (f, v) in features.iter_mut().zip(&o.features) {
                        *f += v;
                    }
                    let mut state = hyp.lm_state.clone();
                    let mut lm_gain = 0.0;
                    for word in &o.target {
                        let (p, next) = lm.score(&state, lm.word_id(word));
                        lm_gain += p;
                        state = next;
                    }
                    if covered == n {
                        let (p, next) = lm.score(&state, EOS_ID);
                        lm_gain += p;
                        state = next;
                    }
                    features[LM] += lm_gain * LN_10;
                    let jump = o.start.abs_diff(hyp.last_end) as f64;
                    features[DISTORTION] -= jump;
                    let score = hyp.score + w.dot(&o.features) + w.get(LM) * lm_gain * LN_10 - w.get(DISTORTION) * jump;
                    let future = coverage.future(n, &fc);
                    expansions.push(Hyp {
                        coverage,
                        covered,
                        last_end: o.end,
                        lm_state: state,
                        features,
                        score,
                        future,
                        back: Some(id),
                        option: Some((start, oi)),
                    });
                }
            }
            for e in expansions {
                let target = e.covered;
                // Keep every complete hypothesis distinct for n-best output.
                let recombine = config.recombine && target < n;
                let beam = if target < n { config.beam_size } else { usize::MAX };
                stacks[target].add(&search, e, recombine, beam);
            }
        }
    }

    let last = std::mem::replace(&mut stacks[n], Stack::new());
    let mut list = NBestList {
        entries: last
            .hyps
            .iter()
            .map(|h| Translation {
                tokens: search.output(h),
                features: h.features,
                total: w.dot(&h.features),
                segments: search.segments(h),
            })
            .collect(),
    };
    list.normalize(config.nbest_size);
    Ok(list)
}

/// Decodes sentences in parallel; output order follows input order.
pub fn decode_corpus<M: LanguageModel>(
    sentences: &[Vec<String>],
    table: &PhraseTable,
    lm: &M,
    config: &DecoderConfig,
    handler: &dyn OovHandler,
) -> Result<Vec<NBestList>, DecoderError> {
    config.validate()?;
    sentences
        .par_iter()
        .map(|s| decode(s, table, lm, config, handler))
        .collect()
}

/// Recomputes totals under `weights` and re-sorts.
pub fn rescore_nbest(nbest: &NBestList, weights: &Weights) -> Result<NBestList, DecoderError> {
    if weights.values.len() != NUM_FEATURES {
        return Err(DecoderError::WeightCount {
            expected: NUM_FEATURES,
            found: weights.values.len(),
        });
    }
    let mut out = nbest.clone();
    for t in &mut out.entries {
        t.total = weights.dot(&t.features);
    }
    let n = out.entries.len();
    out.normalize(n);
    Ok(out)
}

/// `sent_id ||| tokens ||| name value ... ||| total`
pub fn nbest_to_text(lists: &[NBestList]) -> String {
    let mut out = String::new();
    for (id, list) in lists.iter().enumerate() {
        for t in &list.entries {
            let _ = write!(out, "{id} ||| {} |||", t.text());
            for (name, v) in FEATURE_NAMES.iter().zip(&t.features) {
                let _ = write!(out, " {name} {v}");
            }
            let _ = writeln!(out, " ||| {}", t.total);
        }
    }
    out
}

pub fn write_nbest(path: &Path, lists: &[NBestList]) -> Result<(), DecoderError> {
    std::fs::write(path, nbest_to_text(lists)).map_err(io_err(path))
}

/// Parses n-best text. Segmentation is not stored, so entries come back
/// with empty segment lists.
pub fn parse_nbest(text: &str) -> Result<Vec<NBestList>, DecoderError> {
    let mut lists: BTreeMap<usize, NBestList> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| DecoderError::Parse {
            line: i + 1,
            message: message.to_string(),
        };
        let fields: Vec<&str> = line.split("|||").map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err("expected 4 `|||`-separated fields"));
        }
        let id: usize = fields[0].parse().map_err(|_| err("bad sentence id"))?;
        let parts: Vec<&str> = fields[2].split_whitespace().collect();
        if parts.len() != 2 * NUM_FEATURES {
            return Err(err("wrong number of feature values"));
        }
        let mut features = [0.0; NUM_FEATURES];
        for (k, pair) in parts.chunks(2).enumerate() {
            if pair[0] != FEATURE_NAMES[k] {
                return Err(err(&format!("expected feature {}", FEATURE_NAMES[k])));
            }
            features[k] = pair[1].parse().map_err(|_| err("bad feature value"))?;
        }
        let total: f64 = fields[3].parse().map_err(|_| err("bad total"))?;
        lists.entry(id).or_default().entries.push(Translation {
            tokens: fields[1].split_whitespace().map(str::to_string).collect(),
            features,
            total,
            segments: Vec::new(),
        });
    }
    let len = lists.keys().next_back().map_or(0, |k| k + 1);
    let mut out = vec![NBestList::default(); len];
    for (id, list) in lists {
        out[id] = list;
    }
    Ok(out)
}

pub fn read_nbest(path: &Path) -> Result<Vec<NBestList>, DecoderError> {
    parse_nbest(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

/// One candidate translation in a tuning pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub tokens: Vec<String>,
    pub features: Features,
    stats: BleuStats,
}

/// Accumulated n-best candidates per development sentence.
#[derive(Debug, Clone)]
pub struct TuningPool {
    references: Vec<Vec<String>>,
    sentences: Vec<Vec<PoolEntry>>,
}

impl TuningPool {
    pub fn new(references: &[Vec<String>]) -> Self {
        TuningPool {
            references: references.to_vec(),
            sentences: vec![Vec::new(); references.len()],
        }
    }

    /// Adds candidates not already in the pool; returns how many were new.
    pub fn merge(&mut self, lists: &[NBestList]) -> usize {
        let mut added = 0;
        for ((pool, list), reference) in self.sentences.iter_mut().zip(lists).zip(&self.references) {
            for t in &list.entries {
                if pool.iter().any(|e| e.tokens == t.tokens) {
                    continue;
                }
                pool.push(PoolEntry {
                    tokens: t.tokens.clone(),
                    features: t.features,
                    stats: BleuStats::sentence(&t.tokens, std::slice::from_ref(reference), crate::metrics::BLEU_ORDER),
                });
                added += 1;
            }
        }
        added
    }

    pub fn size(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Corpus BLEU of the candidates `weights` would pick.
    pub fn bleu(&self, weights: &Weights) -> f64 {
        let mut total = BleuStats::zero(crate::metrics::BLEU_ORDER);
        for pool in &self.sentences {
            let pick = pool.iter().max_by(|a, b| {
                weights
                    .dot(&a.features)
                    .total_cmp(&weights.dot(&b.features))
                    .then_with(|| b.tokens.cmp(&a.tokens))
            });
            if let Some(p) = pick {
                total.add(&p.stats);
            }
        }
        total.score()
    }
}

/// Candidate values tried for each weight, besides its current value.
pub fn weight_grid() -> Vec<f64> {
    (0..=20).map(|i| -2.0 + 0.2 * i as f64).collect()
}

/// One sweep of coordinate line search over all features. A value replaces
/// the current one only if it strictly improves pool BLEU.
pub fn line_search(pool: &TuningPool, weights: &Weights) -> Weights {
    let mut current = weights.clone();
    let mut best = pool.bleu(&current);
    for f in 0..NUM_FEATURES {
        let mut chosen = current.get(f);
        for v in weight_grid() {
            let mut trial = current.clone();
            trial.set(f, v);
            let b = pool.bleu(&trial);
            if b > best {
                best = b;
                chosen = v;
            }
        }
        current.set(f, chosen);
    }
    current
}

#[derive(Debug, Clone)]
pub struct TuningReport {
    /// Weights after each round, starting with the initial ones.
    pub history: Vec<Weights>,
    /// Pool BLEU of each entry of `history` on the final pool.
    pub final_pool_bleu: Vec<f64>,
    pub chosen: usize,
    pub pool_size: usize,
}

/// Grid line-search tuning. `decode_all` translates the development set
/// under a configuration. Every round decodes, grows the pool and sweeps
/// each weight once; the weights returned are the best of all rounds on
/// the final pool, so they never score below the initial weights there.
pub fn tune_weights<F>(
    dev: &[Vec<String>],
    references: &[Vec<String>],
    initial: &DecoderConfig,
    rounds: usize,
    decode_all: F,
) -> Result<(DecoderConfig, TuningReport), DecoderError>
where
    F: Fn(&[Vec<String>], &DecoderConfig) -> Result<Vec<NBestList>, DecoderError>,
{
    if dev.is_empty() {
        return Err(DecoderError::EmptyDev);
    }
    if dev.len() != references.len() {
        return Err(DecoderError::DevMismatch(dev.len(), references.len()));
    }
    initial.validate()?;
    if rounds == 0 {
        return Ok((
            initial.clone(),
            TuningReport {
                history: vec![initial.weights.clone()],
                final_pool_bleu: Vec::new(),
                chosen: 0,
                pool_size: 0,
            },
        ));
    }
    let mut pool = TuningPool::new(references);
    let mut config = initial.clone();
    let mut history = vec![initial.weights.clone()];
    for round in 0..rounds {
        let lists = decode_all(dev, &config)?;
        let added = pool.merge(&lists);
        let next = line_search(&pool, &config.weights);
        log::info!(
            "tuning round {}: {added} new candidates, pool BLEU {:.2} -> {:.2}",
            round + 1,
            pool.bleu(&config.weights),
            pool.bleu(&next)
        );
        config.weights = next;
        history.push(config.weights.clone());
        if added == 0 && history[history.len() - 2] == config.weights {
            break;
        }
    }
    let scores: Vec<f64> = history.iter().map(|w| pool.bleu(w)).collect();
    let mut chosen = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[chosen] {
            chosen = i;
        }
    }
    config.weights = history[chosen].clone();
    Ok((
        config,
        TuningReport {
            history,
            final_pool_bleu: scores,
            chosen,
            pool_size: pool.size(),
        },
    ))
}

#[cfg(test)]
mod tests;

//! Corpus-level BLEU, NIST and TER over pre-tokenized text. Nothing is
//! re-tokenized here, so scores can drift slightly from official scorers.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::read_lines;

pub const BLEU_ORDER: usize = 4;
pub const NIST_ORDER: usize = 5;
/// Longest block TER will shift.
pub const TER_MAX_SHIFT: usize = 10;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty corpus")]
    Empty,
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("sentence {0}: empty reference")]
    EmptyReference(usize),
    #[error("sentence {0}: no references")]
    NoReferences(usize),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

fn ngram_counts<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> HashMap<Vec<&'a str>, u32> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Additive BLEU sufficient statistics.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn zero(max_n: usize) -> Self {
        BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    /// Clipped counts against one or more references; the reference
    /// length is the one closest to the hypothesis length (shorter on ties).
    pub fn sentence<H: AsRef<str>, R: AsRef<str>>(hyp: &[H], refs: &[Vec<R>], max_n: usize) -> Self {
        let mut s = BleuStats::zero(max_n);
        s.hyp_len = hyp.len() as u64;
        s.ref_len = refs
            .iter()
            .map(|r| r.len() as u64)
            .min_by_key(|&l| (l.abs_diff(s.hyp_len), l))
            .unwrap_or(0);
        for n in 1..=max_n {
            let h = ngram_counts(hyp, n);
            let mut max_ref: HashMap<Vec<&str>, u32> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = h
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)) as u64)
                .sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp()
    }

    /// Unsmoothed BLEU in [0, 100]; 0 when any order has no match.
    pub fn score(&self) -> f64 {
        if self.matches.iter().zip(&self.totals).any(|(&m, &t)| m == 0 || t == 0) {
            return 0.0;
        }
        let n = self.matches.len() as f64;
        let log_prec: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / n;
        100.0 * self.brevity_penalty() * log_prec.exp()
    }

    /// Add-one smoothing on orders >= 2, for sentence-level use.
    pub fn smoothed_score(&self) -> f64 {
        if self.hyp_len == 0 || self.totals[0] == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let n = self.matches.len() as f64;
        let log_prec: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .enumerate()
            .map(|(i, (&m, &t))| {
                if i == 0 {
                    (m as f64 / t as f64).ln()
                } else {
                    ((m + 1) as f64 / (t + 1) as f64).ln()
                }
            })
            .sum::<f64>()
            / n;
        100.0 * self.brevity_penalty() * log_prec.exp()
    }
}

fn check_shapes<H, R>(hyps: &[H], refs: &[R]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hyps.len(),
            references: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn bleu_stats_multi<H, R>(hyps: &[Vec<H>], refs: &[Vec<Vec<R>>], max_n: usize) -> Result<BleuStats, MetricError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    check_shapes(hyps, refs)?;
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(MetricError::NoReferences(i));
    }
    let per: Vec<BleuStats> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| BleuStats::sentence(h, r, max_n))
        .collect();
    let mut total = BleuStats::zero(max_n);
    for s in &per {
        total.add(s);
    }
    Ok(total)
}

/// Corpus BLEU with several references per sentence.
pub fn bleu_multi<H, R>(hyps: &[Vec<H>], refs: &[Vec<Vec<R>>], max_n: usize) -> Result<f64, MetricError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    Ok(bleu_stats_multi(hyps, refs, max_n)?.score())
}

/// Corpus BLEU, one reference per sentence.
pub fn bleu<H, R>(hyps: &[Vec<H>], refs: &[Vec<R>], max_n: usize) -> Result<f64, MetricError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync + Clone,
{
    let wrapped: Vec<Vec<Vec<R>>> = refs.iter().map(|r| vec![r.clone()]).collect();
    bleu_multi(hyps, &wrapped, max_n)
}

pub fn sentence_bleu_smoothed<H: AsRef<str>, R: AsRef<str>>(hyp: &[H], reference: &[R]) -> f64 {
    let refs = [reference.iter().map(AsRef::as_ref).collect::<Vec<&str>>()];
    BleuStats::sentence(hyp, &refs, BLEU_ORDER).smoothed_score()
}

/// β such that the brevity factor is 0.5 when the length ratio is 2/3.
fn nist_beta() -> f64 {
    0.5f64.ln() / (2.0f64 / 3.0).ln().powi(2)
}

pub fn nist_brevity_factor(hyp_len: usize, ref_len: usize) -> f64 {
    if ref_len == 0 {
        return 0.0;
    }
    let ratio = (hyp_len as f64 / ref_len as f64).min(1.0);
    if ratio <= 0.0 {
        return 0.0;
    }
    (nist_beta() * ratio.ln().powi(2)).exp()
}

/// NIST with information weights log2(count(prefix) / count(n-gram)) taken
/// from the reference side; the unigram prefix count is the total number of
/// reference words.
pub fn nist<H, R>(hyps: &[Vec<H>], refs: &[Vec<R>], max_n: usize) -> Result<f64, MetricError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    check_shapes(hyps, refs)?;
    let mut ref_counts: Vec<HashMap<Vec<&str>, u64>> = vec![HashMap::new(); max_n];
    let mut ref_words = 0u64;
    for r in refs {
        ref_words += r.len() as u64;
        for n in 1..=max_n {
            for (g, c) in ngram_counts(r, n) {
                *ref_counts[n - 1].entry(g).or_insert(0) += c as u64;
            }
        }
    }
    let info = |g: &[&str]| -> f64 {
        let n = g.len();
        let count = ref_counts[n - 1].get(g).copied().unwrap_or(0) as f64;
        let prefix = if n == 1 {
            ref_words as f64
        } else {
            ref_counts[n - 2].get(&g[..n - 1]).copied().unwrap_or(0) as f64
        };
        (prefix / count).log2()
    };

    let per: Vec<(Vec<f64>, Vec<u64>)> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| {
            let mut gain = vec![0.0; max_n];
            let mut totals = vec![0u64; max_n];
            for n in 1..=max_n {
                let hc = ngram_counts(h, n);
                let rc = ngram_counts(r, n);
                totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
                let mut matched: Vec<(&Vec<&str>, u32)> = hc
                    .iter()
                    .filter_map(|(g, &c)| rc.get(g).map(|&rcount| (g, c.min(rcount))))
                    .collect();
                matched.sort();
                gain[n - 1] = matched.iter().map(|(g, c)| *c as f64 * info(g)).sum();
            }
            (gain, totals)
        })
        .collect();

    let mut score = 0.0;
    for n in 0..max_n {
        let gain: f64 = per.iter().map(|(g, _)| g[n]).sum();
        let total: u64 = per.iter().map(|(_, t)| t[n]).sum();
        if total > 0 {
            score += gain / total as f64;
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    Ok(score * nist_brevity_factor(hyp_len, ref_words as usize))
}

/// Word-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Moves `hyp[start..start + len]` so that it begins at index `dest` of the
/// sequence with the block removed.
pub fn apply_shift<T: Clone>(hyp: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let block = &hyp[start..start + len];
    let mut rest: Vec<T> = hyp[..start].iter().chain(&hyp[start + len..]).cloned().collect();
    rest.splice(dest..dest, block.iter().cloned());
    rest
}

/// Number of edits plus shifts turning `hyp` into `reference`.
///
/// Shifts are chosen greedily: each round applies the block move that
/// lowers the edit distance most, ties going to the smallest
/// (start, length, destination), and stops when no move lowers it by at
/// least one. A block may move only if it occurs contiguously in the
/// reference, and only to destinations where it would line up with one of
/// those occurrences.
pub fn ter_edits<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> (usize, usize) {
    let mut current = hyp.to_vec();
    let mut dist = edit_distance(&current, reference);
    let mut shifts = 0;
    while dist > 0 {
        let mut best: Option<(usize, (usize, usize, usize), Vec<T>)> = None;
        for start in 0..current.len() {
            for len in 1..=TER_MAX_SHIFT.min(current.len() - start) {
                let block = &current[start..start + len];
                let rest_len = current.len() - len;
                let mut dests: Vec<usize> = reference
                    .windows(len)
                    .enumerate()
                    .filter(|(_, w)| *w == block)
                    .map(|(r, _)| r.min(rest_len))
                    .filter(|&d| d != start)
                    .collect();
                if dests.is_empty() {
                    continue;
                }
                dests.sort_unstable();
                dests.dedup();
                for dest in dests {
                    let shifted = apply_shift(&current, start, len, dest);
                    let d = edit_distance(&shifted, reference);
                    if d < dist {
                        let gain = dist - d;
                        let key = (start, len, dest);
                        let better = match &best {
                            None => true,
                            Some((g, k, _)) => gain > *g || (gain == *g && key < *k),
                        };
                        if better {
                            best = Some((gain, key, shifted));
                        }
                    }
                }
            }
        }
        match best {
            Some((gain, _, shifted)) => {
                current = shifted;
                dist -= gain;
                shifts += 1;
            }
            None => break,
        }
    }
    (dist, shifts)
}

/// Sentence TER as a fraction of the reference length.
pub fn ter<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference(0));
    }
    let (edits, shifts) = ter_edits(hyp, reference);
    Ok((edits + shifts) as f64 / reference.len() as f64)
}

/// Corpus TER ×100: total edits over total reference length.
pub fn corpus_ter<H, R>(hyps: &[Vec<H>], refs: &[Vec<R>]) -> Result<f64, MetricError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync,
{
    check_shapes(hyps, refs)?;
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(MetricError::EmptyReference(i));
    }
    let edits: Vec<usize> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| {
            let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
            let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
            let (e, s) = ter_edits(&h, &r);
            e + s
        })
        .collect();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    Ok(100.0 * edits.iter().sum::<usize>() as f64 / ref_len as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub pair: String,
    pub system: String,
    pub bleu: f64,
    pub nist: f64,
    pub ter: f64,
}

impl EvaluationReport {
    pub const HEADER: &'static str = "pair\tsystem\tBLEU\tNIST\tTER";

    pub fn tsv(reports: &[EvaluationReport]) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn pretty(reports: &[EvaluationReport]) -> String {
        let mut out = format!("{:<10} {:<10} {:>7} {:>7} {:>7}\n", "pair", "system", "BLEU", "NIST", "TER");
        for r in reports {
            out.push_str(&format!(
                "{:<10} {:<10} {:>7.2} {:>7.2} {:>7.2}\n",
                r.pair, r.system, r.bleu, r.nist, r.ter
            ));
        }
        out
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.2}\t{:.4}\t{:.2}", self.pair, self.system, self.bleu, self.nist, self.ter)
    }
}

pub fn evaluate_tokens<H, R>(hyps: &[Vec<H>], refs: &[Vec<R>], pair: &str, system: &str) -> Result<EvaluationReport, MetricError>
where
    H: AsRef<str> + Sync,
    R: AsRef<str> + Sync + Clone,
{
    Ok(EvaluationReport {
        pair: pair.to_string(),
        system: system.to_string(),
        bleu: bleu(hyps, refs, BLEU_ORDER)?,
        nist: nist(hyps, refs, NIST_ORDER)?,
        ter: corpus_ter(hyps, refs)?,
    })
}

/// Scores a hypothesis file against a reference file, both one tokenized
/// sentence per line.
pub fn evaluate_system(hyp_path: &Path, ref_path: &Path, pair: &str, system: &str) -> Result<EvaluationReport, MetricError> {
    let split = |lines: Vec<String>| -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    let hyps = split(read_lines(hyp_path)?);
    let refs = split(read_lines(ref_path)?);
    evaluate_tokens(&hyps, &refs, pair, system)
}

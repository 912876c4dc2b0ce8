//! IBM Model 1 word alignment, Viterbi link decoding, symmetrization and
//! stem-factored alignment.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::morpho::{stem, StemmerProfile};
use crate::DetMap;

pub const NULL_TOKEN: &str = "NULL";
/// Probability used for word pairs the table has never seen.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ITERATIONS: usize = 5;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("iterations must be >= 1")]
    NoIterations,
    #[error("alignment shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("link {0}-{1} out of range for a {2}x{3} sentence pair")]
    OutOfRange(usize, usize, usize, usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Dense id assignment for a word list; ids follow first appearance.
#[derive(Debug, Clone, Default)]
pub struct WordIndex {
    ids: DetMap<String, u32>,
    words: Vec<String>,
}

impl WordIndex {
    pub fn intern(&mut self, w: &str) -> u32 {
        if let Some(&id) = self.ids.get(w) {
            return id;
        }
        let id = self.words.len() as u32;
        self.ids.insert(w.to_string(), id);
        self.words.push(w.to_string());
        id
    }

    pub fn get(&self, w: &str) -> Option<u32> {
        self.ids.get(w).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Lexical translation probabilities t(target | source). Rows are sparse
/// over co-occurring target words and sorted by target id.
#[derive(Debug, Clone)]
pub struct TranslationTable {
    source: WordIndex,
    target: WordIndex,
    rows: Vec<Vec<(u32, f64)>>,
    use_null: bool,
}

/// A source/target token sequence pair; the source side conditions.
pub type Bitext = [(Vec<String>, Vec<String>)];

impl TranslationTable {
    /// Uniform t(f|e) = 1/|F| over every co-occurring pair.
    pub fn uniform(bitext: &Bitext, use_null: bool) -> Self {
        let mut source = WordIndex::default();
        let mut target = WordIndex::default();
        source.intern(NULL_TOKEN);
        let mut cooc: Vec<BTreeSet<u32>> = vec![BTreeSet::new()];
        for (src, tgt) in bitext {
            if src.is_empty() || tgt.is_empty() {
                continue;
            }
            let tids: Vec<u32> = tgt.iter().map(|t| target.intern(t)).collect();
            let sids: Vec<u32> = src.iter().map(|s| source.intern(s)).collect();
            cooc.resize(source.len(), BTreeSet::new());
            for &s in sids.iter().chain(use_null.then_some(&0)) {
                cooc[s as usize].extend(tids.iter().copied());
            }
        }
        let init = if target.is_empty() { 0.0 } else { 1.0 / target.len() as f64 };
        let rows = cooc
            .into_iter()
            .map(|set| set.into_iter().map(|t| (t, init)).collect())
            .collect();
        TranslationTable {
            source,
            target,
            rows,
            use_null,
        }
    }

    pub fn uses_null(&self) -> bool {
        self.use_null
    }

    pub fn source_vocab(&self) -> &WordIndex {
        &self.source
    }

    pub fn target_vocab(&self) -> &WordIndex {
        &self.target
    }

    fn lookup(&self, e: u32, f: u32) -> Option<f64> {
        let row = &self.rows[e as usize];
        row.binary_search_by_key(&f, |&(t, _)| t).ok().map(|i| row[i].1)
    }

    /// t(tgt | src); 0 when unseen. Use [`NULL_TOKEN`] for the null word.
    pub fn prob(&self, src: &str, tgt: &str) -> f64 {
        match (self.source.get(src), self.target.get(tgt)) {
            (Some(e), Some(f)) => self.lookup(e, f).unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// t(tgt | src) with unseen pairs floored at [`PROB_FLOOR`].
    pub fn prob_floored(&self, src: &str, tgt: &str) -> f64 {
        self.prob(src, tgt).max(PROB_FLOOR)
    }

    /// Σ_f t(f|src) over the stored row.
    pub fn row_sum(&self, src: &str) -> f64 {
        self.source
            .get(src)
            .map(|e| self.rows[e as usize].iter().map(|&(_, p)| p).sum())
            .unwrap_or(0.0)
    }

    /// Non-empty source rows (including null when used).
    pub fn source_words(&self) -> impl Iterator<Item = &str> {
        (0..self.source.len())
            .filter(|&e| !self.rows[e].is_empty())
            .map(|e| self.source.word(e as u32))
    }

    /// Target distribution for `src`, highest probability first.
    pub fn row(&self, src: &str) -> Vec<(&str, f64)> {
        let Some(e) = self.source.get(src) else {
            return Vec::new();
        };
        let mut row: Vec<(&str, f64)> = self.rows[e as usize]
            .iter()
            .map(|&(f, p)| (self.target.word(f), p))
            .collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        row
    }

    fn conditioning_ids(&self, src: &[String]) -> Vec<Option<u32>> {
        let mut ids: Vec<Option<u32>> = src.iter().map(|s| self.source.get(s)).collect();
        if self.use_null {
            ids.push(Some(0));
        }
        ids
    }

    /// Model 1 log-likelihood ln p(tgt | src) without the length term.
    pub fn sentence_log_likelihood(&self, src: &[String], tgt: &[String]) -> f64 {
        let ids = self.conditioning_ids(src);
        let norm = (ids.len() as f64).ln();
        tgt.iter()
            .map(|f| {
                let fid = self.target.get(f);
                let total: f64 = ids
                    .iter()
                    .map(|&e| match (e, fid) {
                        (Some(e), Some(f)) => self.lookup(e, f).unwrap_or(0.0),
                        _ => 0.0,
                    })
                    .sum();
                total.max(PROB_FLOOR).ln() - norm
            })
            .sum()
    }

    /// Corpus log-likelihood over the trainable pairs.
    pub fn log_likelihood(&self, bitext: &Bitext) -> f64 {
        bitext
            .iter()
            .filter(|(s, t)| !s.is_empty() && !t.is_empty())
            .map(|(s, t)| self.sentence_log_likelihood(s, t))
            .sum()
    }

    /// One EM iteration with per-pair weights (all 1 for plain Model 1).
    /// Returns the re-estimated table.
    pub(crate) fn em_step(&self, bitext: &Bitext, weights: Option<&[f64]>) -> TranslationTable {
        let mut counts: Vec<Vec<f64>> = self.rows.iter().map(|r| vec![0.0; r.len()]).collect();
        let mut slots: Vec<(usize, usize, f64)> = Vec::new();
        for (k, (src, tgt)) in bitext.iter().enumerate() {
            if src.is_empty() || tgt.is_empty() {
                continue;
            }
            let w = weights.map_or(1.0, |w| w[k]);
            if w == 0.0 {
                continue;
            }
            let ids = self.conditioning_ids(src);
            for f in tgt {
                let Some(fid) = self.target.get(f) else { continue };
                slots.clear();
                let mut total = 0.0;
                for e in ids.iter().flatten() {
                    let row = &self.rows[*e as usize];
                    if let Ok(pos) = row.binary_search_by_key(&fid, |&(t, _)| t) {
                        total += row[pos].1;
                        slots.push((*e as usize, pos, row[pos].1));
                    }
                }
                if total <= 0.0 {
                    continue;
                }
                for &(e, pos, p) in &slots {
                    counts[e][pos] += w * p / total;
                }
            }
        }
        let rows = self
            .rows
            .iter()
            .zip(counts)
            .map(|(row, c)| {
                let z: f64 = c.iter().sum();
                if z <= 0.0 {
                    return row.clone();
                }
                row.iter().zip(c).map(|(&(f, _), n)| (f, n / z)).collect()
            })
            .collect();
        TranslationTable {
            source: self.source.clone(),
            target: self.target.clone(),
            rows,
            use_null: self.use_null,
        }
    }

    /// `src<TAB>tgt<TAB>prob` lines, rows in source-id order, entries by
    /// descending probability.
    pub fn write_dump(&self, path: &Path) -> Result<(), AlignError> {
        let mut out = Vec::new();
        for e in self.source_words() {
            for (f, p) in self.row(e) {
                writeln!(out, "{e}\t{f}\t{p}").expect("write to vec");
            }
        }
        std::fs::write(path, out).map_err(|source| AlignError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    /// Corpus log-likelihood before training (index 0) and after each iteration.
    pub log_likelihoods: Vec<f64>,
    /// Pairs skipped for having an empty side.
    pub skipped: Vec<usize>,
}

/// IBM Model 1 EM from uniform initialization.
pub fn train_model1(bitext: &Bitext, iterations: usize, use_null: bool) -> Result<(TranslationTable, TrainingReport), AlignError> {
    if iterations == 0 {
        return Err(AlignError::NoIterations);
    }
    let skipped: Vec<usize> = bitext
        .iter()
        .enumerate()
        .filter(|(_, (s, t))| s.is_empty() || t.is_empty())
        .map(|(i, _)| i)
        .collect();
    if bitext.len() == skipped.len() {
        return Err(AlignError::EmptyCorpus);
    }
    if !skipped.is_empty() {
        log::warn!("model 1: skipping {} pairs with an empty side: {:?}", skipped.len(), skipped);
    }
    let mut table = TranslationTable::uniform(bitext, use_null);
    let mut lls = vec![table.log_likelihood(bitext)];
    for it in 0..iterations {
        table = table.em_step(bitext, None);
        let ll = table.log_likelihood(bitext);
        log::debug!("model 1 iteration {}: log-likelihood {ll:.4}", it + 1);
        lls.push(ll);
    }
    Ok((
        table,
        TrainingReport {
            log_likelihoods: lls,
            skipped,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Forward,
    Reverse,
    Symmetrized,
}

/// Word links for one sentence pair as `(source index, target index)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMatrix {
    pub links: BTreeSet<(usize, usize)>,
    pub source_len: usize,
    pub target_len: usize,
    pub provenance: Provenance,
}

impl AlignmentMatrix {
    pub fn new(
        links: impl IntoIterator<Item = (usize, usize)>,
        source_len: usize,
        target_len: usize,
        provenance: Provenance,
    ) -> Result<Self, AlignError> {
        let links: BTreeSet<_> = links.into_iter().collect();
        if let Some(&(s, t)) = links.iter().find(|&&(s, t)| s >= source_len || t >= target_len) {
            return Err(AlignError::OutOfRange(s, t, source_len, target_len));
        }
        Ok(AlignmentMatrix {
            links,
            source_len,
            target_len,
            provenance,
        })
    }

    /// Swaps the roles of source and target.
    pub fn transposed(&self) -> AlignmentMatrix {
        AlignmentMatrix {
            links: self.links.iter().map(|&(s, t)| (t, s)).collect(),
            source_len: self.target_len,
            target_len: self.source_len,
            provenance: self.provenance,
        }
    }

    /// Space-separated zero-based `src-tgt` pairs.
    pub fn to_pharaoh(&self) -> String {
        self.links
            .iter()
            .map(|(s, t)| format!("{s}-{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_pharaoh(line: &str, source_len: usize, target_len: usize) -> Result<Self, AlignError> {
        let mut links = Vec::new();
        for tok in line.split_whitespace() {
            let parsed = tok
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
            match parsed {
                Some(l) => links.push(l),
                None => {
                    return Err(AlignError::Parse {
                        line: 0,
                        message: format!("bad link {tok:?}"),
                    })
                }
            }
        }
        Self::new(links, source_len, target_len, Provenance::Symmetrized)
    }
}

impl fmt::Display for AlignmentMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_pharaoh())
    }
}

/// Each target word links to its most probable source word; the null word
/// wins only when strictly better. Ties go to the smaller source index.
pub fn viterbi_align(src: &[String], tgt: &[String], table: &TranslationTable) -> AlignmentMatrix {
    let mut links = BTreeSet::new();
    for (j, f) in tgt.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in src.iter().enumerate() {
            let p = table.prob_floored(e, f);
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((i, p));
            }
        }
        let null_p = if table.uses_null() {
            table.prob_floored(NULL_TOKEN, f)
        } else {
            0.0
        };
        if let Some((i, p)) = best {
            if p >= null_p {
                links.insert((i, j));
            }
        }
    }
    AlignmentMatrix {
        links,
        source_len: src.len(),
        target_len: tgt.len(),
        provenance: Provenance::Forward,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heuristic {
    Intersection,
    Union,
    GrowDiagFinal,
}

impl std::str::FromStr for Heuristic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intersection" => Ok(Heuristic::Intersection),
            "union" => Ok(Heuristic::Union),
            "grow-diag-final" => Ok(Heuristic::GrowDiagFinal),
            other => Err(format!("unknown symmetrization heuristic {other:?}")),
        }
    }
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Combines a forward and a reverse alignment given in the same
/// (source, target) orientation.
pub fn symmetrize(forward: &AlignmentMatrix, reverse: &AlignmentMatrix, heuristic: Heuristic) -> Result<AlignmentMatrix, AlignError> {
    if (forward.source_len, forward.target_len) != (reverse.source_len, reverse.target_len) {
        return Err(AlignError::ShapeMismatch(
            forward.source_len,
            forward.target_len,
            reverse.source_len,
            reverse.target_len,
        ));
    }
    let (n_src, n_tgt) = (forward.source_len, forward.target_len);
    let union: BTreeSet<_> = forward.links.union(&reverse.links).copied().collect();
    let inter: BTreeSet<_> = forward.links.intersection(&reverse.links).copied().collect();
    let links = match heuristic {
        Heuristic::Intersection => inter,
        Heuristic::Union => union,
        Heuristic::GrowDiagFinal => {
            let mut links = inter;
            let mut src_aligned = vec![false; n_src];
            let mut tgt_aligned = vec![false; n_tgt];
            for &(s, t) in &links {
                src_aligned[s] = true;
                tgt_aligned[t] = true;
            }
            let admit = |links: &mut BTreeSet<(usize, usize)>, s: usize, t: usize, sa: &mut Vec<bool>, ta: &mut Vec<bool>| {
                links.insert((s, t));
                sa[s] = true;
                ta[t] = true;
            };
            // grow-diag
            loop {
                let mut added = false;
                for s in 0..n_src {
                    for t in 0..n_tgt {
                        if !links.contains(&(s, t)) {
                            continue;
                        }
                        for (ds, dt) in NEIGHBOURS {
                            let (ns, nt) = (s as isize + ds, t as isize + dt);
                            if ns < 0 || nt < 0 || ns as usize >= n_src || nt as usize >= n_tgt {
                                continue;
                            }
                            let (ns, nt) = (ns as usize, nt as usize);
                            if (!src_aligned[ns] || !tgt_aligned[nt]) && union.contains(&(ns, nt)) && !links.contains(&(ns, nt)) {
                                admit(&mut links, ns, nt, &mut src_aligned, &mut tgt_aligned);
                                added = true;
                            }
                        }
                    }
                }
                if !added {
                    break;
                }
            }
            // final
            for directional in [&forward.links, &reverse.links] {
                for &(s, t) in directional {
                    if (!src_aligned[s] || !tgt_aligned[t]) && !links.contains(&(s, t)) {
                        admit(&mut links, s, t, &mut src_aligned, &mut tgt_aligned);
                    }
                }
            }
            links
        }
    };
    Ok(AlignmentMatrix {
        links,
        source_len: n_src,
        target_len: n_tgt,
        provenance: Provenance::Symmetrized,
    })
}

#[derive(Debug, Clone)]
pub struct AlignOptions {
    pub iterations: usize,
    pub use_null: bool,
    pub heuristic: Heuristic,
    /// Source and target stemmers; `None` aligns surface forms.
    pub stemmers: Option<(StemmerProfile, StemmerProfile)>,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            iterations: DEFAULT_ITERATIONS,
            use_null: true,
            heuristic: Heuristic::GrowDiagFinal,
            stemmers: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusAlignment {
    pub alignments: Vec<AlignmentMatrix>,
    /// t(target | source)
    pub forward: TranslationTable,
    /// t(source | target)
    pub reverse: TranslationTable,
    pub forward_report: TrainingReport,
    pub reverse_report: TrainingReport,
}

/// Trains Model 1 in both directions, Viterbi-aligns and symmetrizes.
/// With stemmers configured, training and alignment run on stems; links
/// index the original tokens since stemming is per token.
pub fn align_corpus(bitext: &Bitext, options: &AlignOptions) -> Result<CorpusAlignment, AlignError> {
    let factored: Vec<(Vec<String>, Vec<String>)>;
    let working: &Bitext = match &options.stemmers {
        Some((src_stem, tgt_stem)) => {
            factored = bitext
                .par_iter()
                .map(|(s, t)| {
                    (
                        s.iter().map(|w| stem(w, src_stem)).collect(),
                        t.iter().map(|w| stem(w, tgt_stem)).collect(),
                    )
                })
                .collect();
            &factored
        }
        None => bitext,
    };
    let reversed: Vec<(Vec<String>, Vec<String>)> = working.iter().map(|(s, t)| (t.clone(), s.clone())).collect();
    let (forward, forward_report) = train_model1(working, options.iterations, options.use_null)?;
    let (reverse, reverse_report) = train_model1(&reversed, options.iterations, options.use_null)?;
    let alignments = working
        .par_iter()
        .map(|(s, t)| {
            let fwd = viterbi_align(s, t, &forward);
            let mut rev = viterbi_align(t, s, &reverse).transposed();
            rev.provenance = Provenance::Reverse;
            symmetrize(&fwd, &rev, options.heuristic)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CorpusAlignment {
        alignments,
        forward,
        reverse,
        forward_report,
        reverse_report,
    })
}

/// Stem-factored alignment with grow-diag-final symmetrization.
pub fn align_factored(
    bitext: &Bitext,
    stemmer_src: &StemmerProfile,
    stemmer_tgt: &StemmerProfile,
    iterations: usize,
) -> Result<Vec<AlignmentMatrix>, AlignError> {
    let options = AlignOptions {
        iterations,
        stemmers: Some((stemmer_src.clone(), stemmer_tgt.clone())),
        ..AlignOptions::default()
    };
    Ok(align_corpus(bitext, &options)?.alignments)
}

/// One Pharaoh line per sentence.
pub fn write_pharaoh(path: &Path, alignments: &[AlignmentMatrix]) -> Result<(), AlignError> {
    let mut out = String::new();
    for a in alignments {
        out.push_str(&a.to_pharaoh());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| AlignError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads Pharaoh lines; sentence lengths come from the bitext.
pub fn read_pharaoh(path: &Path, bitext: &Bitext) -> Result<Vec<AlignmentMatrix>, AlignError> {
    let text = std::fs::read_to_string(path).map_err(|source| AlignError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != bitext.len() {
        return Err(AlignError::Parse {
            line: lines.len(),
            message: format!("{} alignment lines for {} sentence pairs", lines.len(), bitext.len()),
        });
    }
    lines
        .iter()
        .zip(bitext)
        .enumerate()
        .map(|(i, (l, (s, t)))| {
            AlignmentMatrix::from_pharaoh(l, s.len(), t.len()).map_err(|e| AlignError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

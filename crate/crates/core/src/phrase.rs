//! Alignment-consistent phrase extraction and phrase-table scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::align::{AlignmentMatrix, Bitext, NULL_TOKEN};
use crate::DetMap;

pub const DEFAULT_MAX_PHRASE_LEN: usize = 7;
pub const NUM_FEATURES: usize = 4;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = ["tm_pts", "tm_pst", "tm_lts", "tm_lst"];

#[derive(Debug, Error)]
pub enum PhraseError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Half-open source and target spans of one extracted phrase pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpanPair {
    pub source: (usize, usize),
    pub target: (usize, usize),
}

/// Every span pair consistent with the alignment: at least one link inside,
/// no link leaving either span, both sides at most `max_len` long.
/// Unaligned target words at the boundary extend pairs; unaligned source
/// boundary words are covered by the enumeration of source spans.
pub fn extract_spans(alignment: &AlignmentMatrix, max_len: usize) -> Vec<SpanPair> {
    let (n_src, n_tgt) = (alignment.source_len, alignment.target_len);
    let mut tgt_aligned = vec![false; n_tgt];
    let mut by_src: Vec<Vec<usize>> = vec![Vec::new(); n_src];
    for &(s, t) in &alignment.links {
        tgt_aligned[t] = true;
        by_src[s].push(t);
    }
    let mut out = Vec::new();
    for s_start in 0..n_src {
        let mut t_min = usize::MAX;
        let mut t_max = 0usize;
        let mut any = false;
        for s_end in s_start..n_src.min(s_start + max_len) {
            for &t in &by_src[s_end] {
                any = true;
                t_min = t_min.min(t);
                t_max = t_max.max(t);
            }
            if !any || t_max - t_min >= max_len {
                continue;
            }
            // every link into [t_min, t_max] must come from [s_start, s_end]
            let consistent = alignment
                .links
                .iter()
                .filter(|&&(_, t)| t >= t_min && t <= t_max)
                .all(|&(s, _)| s >= s_start && s <= s_end);
            if !consistent {
                continue;
            }
            let mut ts = t_min as isize;
            loop {
                let mut te = t_max;
                loop {
                    if te - ts as usize + 1 > max_len {
                        break;
                    }
                    out.push(SpanPair {
                        source: (s_start, s_end + 1),
                        target: (ts as usize, te + 1),
                    });
                    te += 1;
                    if te >= n_tgt || tgt_aligned[te] {
                        break;
                    }
                }
                ts -= 1;
                if ts < 0 || tgt_aligned[ts as usize] {
                    break;
                }
            }
        }
    }
    out.sort();
    out
}

/// One extracted phrase pair with its internal links (phrase-local indices).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhrasePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub links: Vec<(usize, usize)>,
}

pub fn extract_phrases(src: &[String], tgt: &[String], alignment: &AlignmentMatrix, max_len: usize) -> Vec<PhrasePair> {
    extract_spans(alignment, max_len)
        .into_iter()
        .map(|sp| PhrasePair {
            source: src[sp.source.0..sp.source.1].to_vec(),
            target: tgt[sp.target.0..sp.target.1].to_vec(),
            links: alignment
                .links
                .iter()
                .filter(|&&(s, t)| s >= sp.source.0 && s < sp.source.1 && t >= sp.target.0 && t < sp.target.1)
                .map(|&(s, t)| (s - sp.source.0, t - sp.target.0))
                .collect(),
        })
        .collect()
}

/// Word translation distributions estimated from symmetrized link counts.
#[derive(Debug, Clone, Default)]
pub struct LexicalTable {
    /// w(target | source); unaligned target words count against NULL.
    target_given_source: DetMap<(String, String), f64>,
    /// w(source | target); unaligned source words count against NULL.
    source_given_target: DetMap<(String, String), f64>,
}

impl LexicalTable {
    pub fn from_alignments(bitext: &Bitext, alignments: &[AlignmentMatrix]) -> Self {
        let mut joint: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut src_total: BTreeMap<String, f64> = BTreeMap::new();
        let mut tgt_total: BTreeMap<String, f64> = BTreeMap::new();
        for ((src, tgt), al) in bitext.iter().zip(alignments) {
            let mut src_aligned = vec![false; src.len()];
            let mut tgt_aligned = vec![false; tgt.len()];
            let mut add = |s: &str, t: &str| {
                *joint.entry((s.to_string(), t.to_string())).or_default() += 1.0;
                *src_total.entry(s.to_string()).or_default() += 1.0;
                *tgt_total.entry(t.to_string()).or_default() += 1.0;
            };
            for &(s, t) in &al.links {
                src_aligned[s] = true;
                tgt_aligned[t] = true;
                add(&src[s], &tgt[t]);
            }
            for (t, _) in tgt_aligned.iter().enumerate().filter(|(_, a)| !**a) {
                add(NULL_TOKEN, &tgt[t]);
            }
            for (s, _) in src_aligned.iter().enumerate().filter(|(_, a)| !**a) {
                add(&src[s], NULL_TOKEN);
            }
        }
        let mut table = LexicalTable::default();
        for ((s, t), c) in joint {
            if t != NULL_TOKEN {
                table.target_given_source.insert((s.clone(), t.clone()), c / src_total[&s]);
            }
            if s != NULL_TOKEN {
                table.source_given_target.insert((s.clone(), t.clone()), c / tgt_total[&t]);
            }
        }
        table
    }

    /// w(t | s)
    pub fn target_given_source(&self, s: &str, t: &str) -> f64 {
        self.target_given_source
            .get(&(s.to_string(), t.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    /// w(s | t)
    pub fn source_given_target(&self, s: &str, t: &str) -> f64 {
        self.source_given_target
            .get(&(s.to_string(), t.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    /// lex(t | s, a): per target word the average link probability, NULL for
    /// unaligned words; multiplied over target words.
    pub fn lex_target_given_source(&self, pair: &PhrasePair) -> f64 {
        pair.target
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let srcs: Vec<&str> = pair.links.iter().filter(|l| l.1 == j).map(|l| pair.source[l.0].as_str()).collect();
                if srcs.is_empty() {
                    self.target_given_source(NULL_TOKEN, t)
                } else {
                    srcs.iter().map(|s| self.target_given_source(s, t)).sum::<f64>() / srcs.len() as f64
                }
            })
            .product()
    }

    /// lex(s | t, a), the mirror of [`Self::lex_target_given_source`].
    pub fn lex_source_given_target(&self, pair: &PhrasePair) -> f64 {
        pair.source
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let tgts: Vec<&str> = pair.links.iter().filter(|l| l.0 == i).map(|l| pair.target[l.1].as_str()).collect();
                if tgts.is_empty() {
                    self.source_given_target(s, NULL_TOKEN)
                } else {
                    tgts.iter().map(|t| self.source_given_target(s, t)).sum::<f64>() / tgts.len() as f64
                }
            })
            .product()
    }
}

/// Scored translation option for one source phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub target: Vec<String>,
    /// ln p(t|s), ln p(s|t), ln lex(t|s), ln lex(s|t)
    pub features: [f64; NUM_FEATURES],
}

/// Source phrase → options, both levels kept sorted for stable output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhraseTable {
    entries: BTreeMap<Vec<String>, Vec<TableEntry>>,
    max_source_len: usize,
}

impl PhraseTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry. Non-finite features are rejected.
    pub fn insert(&mut self, source: Vec<String>, target: Vec<String>, features: [f64; NUM_FEATURES]) -> bool {
        if features.iter().any(|f| !f.is_finite()) {
            return false;
        }
        self.max_source_len = self.max_source_len.max(source.len());
        let list = self.entries.entry(source).or_default();
        match list.binary_search_by(|e| e.target.cmp(&target)) {
            Ok(i) => list[i].features = features,
            Err(i) => list.insert(i, TableEntry { target, features }),
        }
        true
    }

    pub fn lookup(&self, source: &[String]) -> &[TableEntry] {
        self.entries.get(source).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains_source(&self, source: &[String]) -> bool {
        self.entries.contains_key(source)
    }

    pub fn max_source_len(&self) -> usize {
        self.max_source_len
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[String], &TableEntry)> {
        self.entries
            .iter()
            .flat_map(|(s, list)| list.iter().map(move |e| (s.as_slice(), e)))
    }

    /// `src ||| tgt ||| f1 f2 f3 f4` with a header comment, features to 6 decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# source ||| target ||| ln p(t|s) ln p(s|t) ln lex(t|s) ln lex(s|t)\n");
        for (s, e) in self.iter() {
            let _ = writeln!(
                out,
                "{} ||| {} ||| {:.6} {:.6} {:.6} {:.6}",
                s.join(" "),
                e.target.join(" "),
                e.features[0],
                e.features[1],
                e.features[2],
                e.features[3]
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PhraseError> {
        let mut table = PhraseTable::new();
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: String| PhraseError::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split("|||").map(str::trim).collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 `|||`-separated fields, found {}", fields.len())));
            }
            let source: Vec<String> = fields[0].split_whitespace().map(str::to_string).collect();
            let target: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
            if source.is_empty() || target.is_empty() {
                return Err(err("empty phrase".into()));
            }
            let values = fields[2]
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(format!("bad feature value: {e}")))?;
            let features: [f64; NUM_FEATURES] = values
                .try_into()
                .map_err(|v: Vec<f64>| err(format!("expected {NUM_FEATURES} features, found {}", v.len())))?;
            if !table.insert(source, target, features) {
                return Err(err("non-finite feature".into()));
            }
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<(), PhraseError> {
        std::fs::write(path, self.to_text()).map_err(|source| PhraseError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, PhraseError> {
        let text = std::fs::read_to_string(path).map_err(|source| PhraseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// Joint and marginal phrase counts plus the best lexical weights seen
/// for each pair.
#[derive(Debug, Clone, Default)]
pub struct PhraseCounts {
    joint: BTreeMap<(Vec<String>, Vec<String>), (u64, Vec<Vec<(usize, usize)>>)>,
    source: DetMap<Vec<String>, u64>,
    target: DetMap<Vec<String>, u64>,
}

impl PhraseCounts {
    pub fn add(&mut self, pair: PhrasePair) {
        *self.source.entry(pair.source.clone()).or_default() += 1;
        *self.target.entry(pair.target.clone()).or_default() += 1;
        let slot = self.joint.entry((pair.source, pair.target)).or_default();
        slot.0 += 1;
        if !slot.1.contains(&pair.links) {
            slot.1.push(pair.links);
        }
    }

    pub fn add_sentence(&mut self, src: &[String], tgt: &[String], alignment: &AlignmentMatrix, max_len: usize) {
        for p in extract_phrases(src, tgt, alignment, max_len) {
            self.add(p);
        }
    }

    pub fn joint_count(&self, source: &[String], target: &[String]) -> u64 {
        self.joint
            .get(&(source.to_vec(), target.to_vec()))
            .map_or(0, |j| j.0)
    }

    /// Relative frequencies both ways; lexical weights take the maximum over
    /// the internal alignments the pair was seen with.
    pub fn score(&self, lex: &LexicalTable) -> PhraseTable {
        let mut table = PhraseTable::new();
        for ((s, t), (count, alignments)) in &self.joint {
            let c = *count as f64;
            let p_ts = c / self.source[s] as f64;
            let p_st = c / self.target[t] as f64;
            let (mut lts, mut lst) = (0.0f64, 0.0f64);
            for links in alignments {
                let pair = PhrasePair {
                    source: s.clone(),
                    target: t.clone(),
                    links: links.clone(),
                };
                lts = lts.max(lex.lex_target_given_source(&pair));
                lst = lst.max(lex.lex_source_given_target(&pair));
            }
            table.insert(s.clone(), t.clone(), [p_ts.ln(), p_st.ln(), lts.ln(), lst.ln()]);
        }
        table
    }
}

/// Extraction over the whole corpus followed by scoring.
pub fn score_table(bitext: &Bitext, alignments: &[AlignmentMatrix], max_len: usize) -> PhraseTable {
    let mut counts = PhraseCounts::default();
    for ((s, t), a) in bitext.iter().zip(alignments) {
        counts.add_sentence(s, t, a, max_len);
    }
    counts.score(&LexicalTable::from_alignments(bitext, alignments))
}

//! Corpus ingestion: parallel/monolingual loading, cleaning, tokenization,
//! manifests and vocabulary counts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::kv::{KvError, KvFile};

/// Sentence pairs longer than this (either side, in tokens) are dropped from TM training.
pub const MAX_TRAINING_TOKENS: usize = 80;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line} is not valid UTF-8")]
    Encoding { path: String, line: usize },
    #[error("line-count mismatch between source and target: {source_lines} vs {target_lines}")]
    Alignment {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("manifest declares {declared} lines but {path} has {actual}")]
    LineCount {
        path: String,
        declared: usize,
        actual: usize,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Health,
    Tourism,
    General,
}

impl FromStr for Domain {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "health" => Ok(Domain::Health),
            "tourism" => Ok(Domain::Tourism),
            "general" => Ok(Domain::General),
            other => Err(CorpusError::Manifest(format!("unknown domain {other:?}"))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Health => "health",
            Domain::Tourism => "tourism",
            Domain::General => "general",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainTm,
    TrainLm,
    /// Development split, used for tuning.
    Test1,
    Test2,
}

impl FromStr for Split {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train-tm" => Ok(Split::TrainTm),
            "train-lm" => Ok(Split::TrainLm),
            "test1" => Ok(Split::Test1),
            "test2" => Ok(Split::Test2),
            other => Err(CorpusError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TrainTm => "train-tm",
            Split::TrainLm => "train-lm",
            Split::Test1 => "test1",
            Split::Test2 => "test2",
        })
    }
}

/// Declarative description of one corpus file (pair).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub language_pair: (String, String),
    pub domain: Domain,
    pub split: Split,
    pub source: PathBuf,
    /// Absent for monolingual (LM) corpora.
    pub target: Option<PathBuf>,
    pub line_count: usize,
}

impl CorpusManifest {
    /// Builds a manifest from parsed `key = value` entries. Relative paths
    /// are resolved against `base_dir`.
    pub fn from_kv(kv: &KvFile, base_dir: &Path) -> Result<Self, CorpusError> {
        let need = |key: &str| {
            kv.get(None, key)
                .ok_or_else(|| CorpusError::Manifest(format!("missing key `{key}`")))
        };
        let pair = need("pair")?;
        let (src, tgt) = pair
            .split_once('-')
            .ok_or_else(|| CorpusError::Manifest(format!("pair {pair:?} is not `src-tgt`")))?;
        let lines = need("lines")?;
        let line_count = parse_count(lines)
            .ok_or_else(|| CorpusError::Manifest(format!("bad line count {lines:?}")))?;
        Ok(CorpusManifest {
            language_pair: (src.to_string(), tgt.to_string()),
            domain: need("domain")?.parse()?,
            split: need("split")?.parse()?,
            source: base_dir.join(need("source")?),
            target: kv.get(None, "target").map(|t| base_dir.join(t)),
            line_count,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let kv = KvFile::load(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_kv(&kv, base)
    }

    pub fn is_development(&self) -> bool {
        self.split == Split::Test1
    }
}

/// Accepts plain integers and the `24K` shorthand.
fn parse_count(s: &str) -> Option<usize> {
    let s = s.trim();
    if let Some(k) = s.strip_suffix(['K', 'k']) {
        k.trim().parse::<usize>().ok().map(|v| v * 1000)
    } else {
        s.parse().ok()
    }
}

/// One training unit: tokenized source and target sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub id: usize,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// Raw parallel text, lines kept verbatim.
#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pub manifest: Option<CorpusManifest>,
    pub source_lines: Vec<String>,
    pub target_lines: Vec<String>,
}

/// Reads a UTF-8 file as LF-separated lines. A trailing newline does not
/// produce an extra empty line.
pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    split_lines(&bytes).map_err(|line| CorpusError::Encoding {
        path: path.display().to_string(),
        line,
    })
}

fn split_lines(bytes: &[u8]) -> Result<Vec<String>, usize> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            std::str::from_utf8(line)
                .map(str::to_string)
                .map_err(|_| i + 1)
        })
        .collect()
}

/// Writes lines with LF terminators.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for l in lines {
        out.extend_from_slice(l.as_ref().as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

/// Zips two line-aligned files. When a manifest is given its declared line
/// count must match the files.
pub fn load_parallel(
    source_path: &Path,
    target_path: &Path,
    manifest: Option<&CorpusManifest>,
) -> Result<ParallelCorpus, CorpusError> {
    let source_lines = read_lines(source_path)?;
    let target_lines = read_lines(target_path)?;
    if source_lines.len() != target_lines.len() {
        return Err(CorpusError::Alignment {
            source_lines: source_lines.len(),
            target_lines: target_lines.len(),
        });
    }
    if let Some(m) = manifest {
        if m.line_count != source_lines.len() {
            return Err(CorpusError::LineCount {
                path: source_path.display().to_string(),
                declared: m.line_count,
                actual: source_lines.len(),
            });
        }
    }
    Ok(ParallelCorpus {
        manifest: manifest.cloned(),
        source_lines,
        target_lines,
    })
}

/// Loads the files a manifest points at.
pub fn load_from_manifest(manifest: &CorpusManifest) -> Result<ParallelCorpus, CorpusError> {
    let target = manifest
        .target
        .as_ref()
        .ok_or_else(|| CorpusError::Manifest("parallel corpus needs a `target` key".into()))?;
    load_parallel(&manifest.source, target, Some(manifest))
}

/// Per-pair outcome of tokenization.
#[derive(Debug, Clone, Default)]
pub struct TokenizedCorpus {
    pub pairs: Vec<SentencePair>,
    /// Ids of pairs dropped for being empty or too long.
    pub dropped: Vec<usize>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.source_lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_lines.is_empty()
    }

    pub fn write(&self, source_path: &Path, target_path: &Path) -> Result<(), CorpusError> {
        write_lines(source_path, &self.source_lines)?;
        write_lines(target_path, &self.target_lines)
    }

    /// Tokenizes both sides. Pairs with an empty side, or a side longer than
    /// `max_len` tokens, are dropped and their ids recorded.
    pub fn sentence_pairs(
        &self,
        profiles: (ScriptProfile, ScriptProfile),
        assume_tokenized: bool,
        max_len: usize,
    ) -> TokenizedCorpus {
        let tok = |line: &str, profile| {
            if assume_tokenized {
                line.split_whitespace().map(str::to_string).collect()
            } else {
                tokenize(line, profile)
            }
        };
        let results: Vec<(usize, Vec<String>, Vec<String>)> = self
            .source_lines
            .par_iter()
            .zip(self.target_lines.par_iter())
            .enumerate()
            .map(|(id, (s, t))| (id, tok(s, profiles.0), tok(t, profiles.1)))
            .collect();
        let mut out = TokenizedCorpus::default();
        for (id, source, target) in results {
            if source.is_empty()
                || target.is_empty()
                || source.len() > max_len
                || target.len() > max_len
            {
                out.dropped.push(id);
                continue;
            }
            out.pairs.push(SentencePair { id, source, target });
        }
        if !out.dropped.is_empty() {
            log::warn!(
                "dropped {} sentence pairs (empty or > {max_len} tokens): ids {:?}",
                out.dropped.len(),
                out.dropped
            );
        }
        out
    }
}

/// Removes literal `<s>` / `</s>` tokens; lines left empty are dropped.
pub fn clean_monolingual<I, S>(lines: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    lines
        .into_iter()
        .filter_map(|line| clean_line(line.as_ref()))
        .collect()
}

fn clean_line(line: &str) -> Option<String> {
    let has_marker = line
        .split_whitespace()
        .any(|t| t == BOS || t == EOS);
    if !has_marker {
        return if line.trim().is_empty() {
            None
        } else {
            Some(line.to_string())
        };
    }
    let kept: Vec<&str> = line
        .split_whitespace()
        .filter(|t| *t != BOS && *t != EOS)
        .collect();
    if kept.is_empty() {
        None
    } else {
        Some(kept.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptProfile {
    Latin,
    Indic,
}

impl FromStr for ScriptProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latin" => Ok(ScriptProfile::Latin),
            "indic" => Ok(ScriptProfile::Indic),
            other => Err(format!("unknown script profile {other:?}")),
        }
    }
}

const DANDA: char = '\u{0964}';
const DOUBLE_DANDA: char = '\u{0965}';

fn is_detachable(c: char, profile: ScriptProfile) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':')
        || (profile == ScriptProfile::Indic && (c == DANDA || c == DOUBLE_DANDA))
}

/// Whitespace split plus detachment of trailing punctuation (and the danda
/// for Indic scripts). Never emits empty tokens.
pub fn tokenize(line: &str, profile: ScriptProfile) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.split_whitespace() {
        let mut end = word.len();
        let mut trailing = Vec::new();
        for (idx, c) in word.char_indices().rev() {
            if is_detachable(c, profile) && idx > 0 {
                trailing.push(c);
                end = idx;
            } else {
                break;
            }
        }
        out.push(word[..end].to_string());
        out.extend(trailing.into_iter().rev().map(String::from));
    }
    out
}

/// Token counts for one corpus side.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, token: &str, n: u64) {
        if n == 0 {
            return;
        }
        *self.counts.entry(token.to_string()).or_insert(0) += n;
        self.total += n;
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn merge(&mut self, other: &Vocabulary) {
        for (tok, n) in other.iter() {
            self.add(tok, n);
        }
    }

    /// Same counts, all multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Vocabulary {
        let mut v = Vocabulary::new();
        for (tok, n) in self.iter() {
            v.add(tok, n * factor);
        }
        v
    }

    /// `token<TAB>count` lines, sorted by token.
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let lines: Vec<String> = self.iter().map(|(t, n)| format!("{t}\t{n}")).collect();
        write_lines(path, &lines)
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let mut v = Vocabulary::new();
        for (i, line) in read_lines(path)?.iter().enumerate() {
            let parsed = line
                .split_once('\t')
                .and_then(|(t, n)| n.parse::<u64>().ok().map(|n| (t, n)));
            match parsed {
                Some((t, n)) => v.add(t, n),
                None => {
                    return Err(CorpusError::Manifest(format!(
                        "{}: line {}: expected `token<TAB>count`",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        Ok(v)
    }
}

/// Counts tokens over a tokenized corpus side. Chunks are counted in
/// parallel and merged in a fixed order.
pub fn build_vocabulary<S: AsRef<str> + Sync>(sentences: &[Vec<S>]) -> Vocabulary {
    sentences
        .par_chunks(1024)
        .map(|chunk| {
            let mut v = Vocabulary::new();
            for sent in chunk {
                for tok in sent {
                    v.add(tok.as_ref(), 1);
                }
            }
            v
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Vocabulary::new(), |mut acc, v| {
            acc.merge(&v);
            acc
        })
}

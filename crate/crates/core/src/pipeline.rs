//! End-to-end runs: clean, preprocess, align, extract, train the LM,
//! mine transliterations, tune, translate and score.
//!
//! A run owns its work directory (guarded by a lock file) and appends
//! `timestamp<TAB>stage<TAB>message` lines to `run.log` there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{align_corpus, write_pharaoh, AlignOptions, Heuristic, DEFAULT_ITERATIONS};
use crate::corpus::{
    build_vocabulary, clean_monolingual, load_parallel, read_lines, tokenize, write_lines, ScriptProfile,
    MAX_TRAINING_TOKENS,
};
use crate::decoder::{
    decode_corpus, tune_weights, DecoderConfig, DecoderError, NBestList, OptionKind, Passthrough, Translation,
    Weights, DEFAULT_BEAM, DEFAULT_DISTORTION_LIMIT, DEFAULT_NBEST, DEFAULT_TABLE_LIMIT,
};
use crate::kv::KvFile;
use crate::lm::{binarize, load_binary, write_arpa, BinaryModel, DEFAULT_ORDER};
use crate::metrics::{evaluate_tokens, EvaluationReport};
use crate::morpho::{apply_preprocessing, PreprocessSpec, PreprocessStep, Preprocessor, StemmerProfile};
use crate::phrase::{score_table, PhraseTable, DEFAULT_MAX_PHRASE_LEN};
use crate::translit::{
    integrate_oov_with, log_softmax, mine_pairs, transliterate_all, CharModel, MinedPairSet, DEFAULT_CANDIDATES,
    DEFAULT_EM_ROUNDS, DEFAULT_THRESHOLD,
};

pub const DEFAULT_TUNE_ROUNDS: usize = 3;
/// Hypotheses per sentence that get transliteration expansions.
pub const DEFAULT_TRANSLIT_NBEST: usize = 10;

const LOCK_FILE: &str = ".lock";
const LOG_FILE: &str = "run.log";
const ARTIFACTS_FILE: &str = "artifacts.kv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}`: {message}")]
    Stage { stage: String, message: String },
    #[error("missing artifact `{name}`: {path}")]
    MissingArtifact { name: String, path: PathBuf },
    #[error("rule file {path} does not match the hash recorded at training")]
    RuleHash { path: PathBuf },
    #[error("work directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }

    fn stage(stage: &str, message: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            message: message.to_string(),
        }
    }
}

fn at<T, E: fmt::Display>(stage: &str, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::stage(stage, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum System {
    /// Baseline.
    S1,
    /// Baseline plus source preprocessing.
    S2,
    /// S2 plus transliteration of unknown words.
    S3,
}

impl System {
    pub fn preprocesses(self) -> bool {
        self != System::S1
    }

    pub fn transliterates(self) -> bool {
        self == System::S3
    }
}

impl FromStr for System {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "S1" | "s1" => Ok(System::S1),
            "S2" | "s2" => Ok(System::S2),
            "S3" | "s3" => Ok(System::S3),
            other => Err(PipelineError::Config(format!("unknown system {other:?}"))),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::S1 => "S1",
            System::S2 => "S2",
            System::S3 => "S3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Track {
    Constrained,
    /// Extra monolingual data for the language model.
    Unconstrained,
}

impl FromStr for Track {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "constrained" => Ok(Track::Constrained),
            "unconstrained" => Ok(Track::Unconstrained),
            other => Err(PipelineError::Config(format!("unknown track {other:?}"))),
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Track::Constrained => "constrained",
            Track::Unconstrained => "unconstrained",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub language_pair: (String, String),
    pub system: System,
    pub track: Track,
    pub seed: u64,
    pub work_dir: PathBuf,

    pub train_source: PathBuf,
    pub train_target: PathBuf,
    pub dev_source: PathBuf,
    pub dev_target: PathBuf,
    pub test_source: PathBuf,
    pub test_target: PathBuf,
    /// Target-side monolingual corpora; used by the unconstrained track only.
    pub extra_lm: Vec<PathBuf>,
    pub source_script: ScriptProfile,
    pub target_script: ScriptProfile,
    pub assume_tokenized: bool,
    pub max_sentence_len: usize,

    /// Steps only run for systems that preprocess.
    pub preprocess: PreprocessSpec,

    pub align_iterations: usize,
    pub align_heuristic: Heuristic,
    pub align_null: bool,
    /// Both set: alignment runs on stems.
    pub source_stemmer: Option<PathBuf>,
    pub target_stemmer: Option<PathBuf>,

    pub max_phrase_len: usize,
    pub lm_order: usize,

    pub beam_size: usize,
    pub distortion_limit: Option<usize>,
    pub nbest_size: usize,
    pub table_limit: Option<usize>,
    pub tune_rounds: usize,
    pub initial_weights: Option<PathBuf>,

    pub translit_threshold: f64,
    pub translit_em_rounds: usize,
    pub translit_candidates: usize,
    pub translit_nbest: usize,
}

fn script_name(p: ScriptProfile) -> &'static str {
    match p {
        ScriptProfile::Latin => "latin",
        ScriptProfile::Indic => "indic",
    }
}

fn heuristic_name(h: Heuristic) -> &'static str {
    match h {
        Heuristic::Intersection => "intersection",
        Heuristic::Union => "union",
        Heuristic::GrowDiagFinal => "grow-diag-final",
    }
}

struct Reader<'a> {
    kv: &'a KvFile,
    base: &'a Path,
}

impl Reader<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.kv.get(Some(section), key).filter(|v| !v.is_empty())
    }

    fn required(&self, section: &str, key: &str) -> Result<&str, PipelineError> {
        self.raw(section, key)
            .ok_or_else(|| PipelineError::Config(format!("missing `{key}` in [{section}]")))
    }

    fn path(&self, section: &str, key: &str) -> Result<PathBuf, PipelineError> {
        Ok(self.base.join(self.required(section, key)?))
    }

    fn opt_path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.raw(section, key).map(|v| self.base.join(v))
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, PipelineError> {
        match self.raw(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| PipelineError::Config(format!("[{section}] {key} = {v:?} is not valid"))),
        }
    }

    /// `none` or a number.
    fn limit(&self, section: &str, key: &str, default: Option<usize>) -> Result<Option<usize>, PipelineError> {
        match self.raw(section, key) {
            None => Ok(default),
            Some("none") => Ok(None),
            Some(_) => self.parsed(section, key, 0).map(Some),
        }
    }
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

impl ExperimentConfig {
    /// Relative paths are resolved against `base_dir`.
    pub fn from_kv(kv: &KvFile, base_dir: &Path) -> Result<Self, PipelineError> {
        let base = absolute(base_dir);
        let r = Reader { kv, base: &base };
        let pair = r.required("experiment", "pair")?;
        let (src, tgt) = pair
            .split_once('-')
            .ok_or_else(|| PipelineError::Config(format!("pair {pair:?} is not `src-tgt`")))?;
        let script = |key: &str| -> Result<ScriptProfile, PipelineError> {
            r.raw("data", key)
                .unwrap_or("latin")
                .parse()
                .map_err(PipelineError::Config)
        };
        let steps = match r.raw("preprocess", "steps") {
            None => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<PreprocessStep>().map_err(|e| PipelineError::Config(e.to_string())))
                .collect::<Result<_, _>>()?,
        };
        let defaults = PreprocessSpec::default();
        let preprocess = PreprocessSpec {
            language: src.to_string(),
            steps,
            marker: r.raw("preprocess", "marker").unwrap_or(&defaults.marker).to_string(),
            suffix_rules: r.opt_path("preprocess", "suffix_rules"),
            compound_vocabulary: r.opt_path("preprocess", "compound_vocabulary"),
            compound_min_part_len: r.parsed("preprocess", "compound_min_part_len", defaults.compound_min_part_len)?,
            compound_min_freq: r.parsed("preprocess", "compound_min_freq", defaults.compound_min_freq)?,
            preorder_rules: r.opt_path("preprocess", "preorder_rules"),
            class_lexicon: r.opt_path("preprocess", "class_lexicon"),
            default_class: r
                .raw("preprocess", "default_class")
                .unwrap_or(&defaults.default_class)
                .to_string(),
        };
        let config = ExperimentConfig {
            language_pair: (src.to_string(), tgt.to_string()),
            system: r.required("experiment", "system")?.parse()?,
            track: r.raw("experiment", "track").unwrap_or("constrained").parse()?,
            seed: r.parsed("experiment", "seed", 0)?,
            work_dir: r.path("experiment", "work_dir")?,
            train_source: r.path("data", "train_source")?,
            train_target: r.path("data", "train_target")?,
            dev_source: r.path("data", "dev_source")?,
            dev_target: r.path("data", "dev_target")?,
            test_source: r.path("data", "test_source")?,
            test_target: r.path("data", "test_target")?,
            extra_lm: kv
                .get_all(Some("data"), "extra_lm")
                .filter(|v| !v.is_empty())
                .map(|v| base.join(v))
                .collect(),
            source_script: script("source_script")?,
            target_script: script("target_script")?,
            assume_tokenized: r.parsed("data", "assume_tokenized", false)?,
            max_sentence_len: r.parsed("data", "max_sentence_len", MAX_TRAINING_TOKENS)?,
            preprocess,
            align_iterations: r.parsed("align", "iterations", DEFAULT_ITERATIONS)?,
            align_heuristic: r
                .raw("align", "heuristic")
                .unwrap_or("grow-diag-final")
                .parse()
                .map_err(PipelineError::Config)?,
            align_null: r.parsed("align", "null", true)?,
            source_stemmer: r.opt_path("align", "source_stemmer"),
            target_stemmer: r.opt_path("align", "target_stemmer"),
            max_phrase_len: r.parsed("model", "max_phrase_len", DEFAULT_MAX_PHRASE_LEN)?,
            lm_order: r.parsed("model", "lm_order", DEFAULT_ORDER)?,
            beam_size: r.parsed("decoder", "beam", DEFAULT_BEAM)?,
            distortion_limit: r.limit("decoder", "distortion_limit", Some(DEFAULT_DISTORTION_LIMIT))?,
            nbest_size: r.parsed("decoder", "nbest", DEFAULT_NBEST)?,
            table_limit: r.limit("decoder", "table_limit", Some(DEFAULT_TABLE_LIMIT))?,
            tune_rounds: r.parsed("decoder", "tune_rounds", DEFAULT_TUNE_ROUNDS)?,
            initial_weights: r.opt_path("decoder", "weights"),
            translit_threshold: r.parsed("translit", "threshold", DEFAULT_THRESHOLD)?,
            translit_em_rounds: r.parsed("translit", "em_rounds", DEFAULT_EM_ROUNDS)?,
            translit_candidates: r.parsed("translit", "candidates", DEFAULT_CANDIDATES)?,
            translit_nbest: r.parsed("translit", "rescore_nbest", DEFAULT_TRANSLIT_NBEST)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let kv = KvFile::load(path).map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::from_kv(&kv, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.track == Track::Unconstrained && self.extra_lm.is_empty() {
            return bad("the unconstrained track needs at least one `extra_lm` corpus");
        }
        if self.lm_order == 0 {
            return bad("lm_order must be at least 1");
        }
        if self.max_phrase_len == 0 {
            return bad("max_phrase_len must be at least 1");
        }
        if self.beam_size == 0 || self.nbest_size == 0 || self.table_limit == Some(0) {
            return bad("beam, nbest and table_limit must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.translit_threshold) {
            return bad("translit threshold must lie in [0, 1]");
        }
        if self.translit_candidates == 0 || self.translit_nbest == 0 {
            return bad("translit candidates and rescore_nbest must be at least 1");
        }
        if self.source_stemmer.is_some() != self.target_stemmer.is_some() {
            return bad("factored alignment needs both source_stemmer and target_stemmer");
        }
        let steps = &self.preprocess.steps;
        if steps.iter().enumerate().any(|(i, s)| steps[..i].contains(s)) {
            return bad("a preprocessing step is listed twice");
        }
        Ok(())
    }

    pub fn pair_label(&self) -> String {
        format!("{}-{}", self.language_pair.0, self.language_pair.1)
    }

    /// Row label in reports: `S2`, or `S2+ELM` on the unconstrained track.
    pub fn system_label(&self) -> String {
        match self.track {
            Track::Constrained => self.system.to_string(),
            Track::Unconstrained => format!("{}+ELM", self.system),
        }
    }

    /// Same experiment as another system/track, in its own subdirectory.
    pub fn variant(&self, system: System, track: Track) -> ExperimentConfig {
        let mut c = self.clone();
        c.system = system;
        c.track = track;
        c.work_dir = self.work_dir.join(format!("{}-{system}-{track}", self.pair_label()));
        c
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let p = |p: &Path| p.display().to_string();
        let e = Some("experiment");
        kv.push(e, "pair", self.pair_label());
        kv.push(e, "system", self.system);
        kv.push(e, "track", self.track);
        kv.push(e, "seed", self.seed);
        kv.push(e, "work_dir", p(&self.work_dir));
        let d = Some("data");
        for (k, v) in [
            ("train_source", &self.train_source),
            ("train_target", &self.train_target),
            ("dev_source", &self.dev_source),
            ("dev_target", &self.dev_target),
            ("test_source", &self.test_source),
            ("test_target", &self.test_target),
        ] {
            kv.push(d, k, p(v));
        }
        for x in &self.extra_lm {
            kv.push(d, "extra_lm", p(x));
        }
        kv.push(d, "source_script", script_name(self.source_script));
        kv.push(d, "target_script", script_name(self.target_script));
        kv.push(d, "assume_tokenized", self.assume_tokenized);
        kv.push(d, "max_sentence_len", self.max_sentence_len);
        let s = Some("preprocess");
        let pp = &self.preprocess;
        let steps: Vec<String> = pp.steps.iter().map(|s| s.to_string()).collect();
        kv.push(s, "steps", steps.join(", "));
        kv.push(s, "marker", &pp.marker);
        for (k, v) in [
            ("suffix_rules", &pp.suffix_rules),
            ("compound_vocabulary", &pp.compound_vocabulary),
            ("preorder_rules", &pp.preorder_rules),
            ("class_lexicon", &pp.class_lexicon),
        ] {
            if let Some(v) = v {
                kv.push(s, k, p(v));
            }
        }
        kv.push(s, "compound_min_part_len", pp.compound_min_part_len);
        kv.push(s, "compound_min_freq", pp.compound_min_freq);
        kv.push(s, "default_class", &pp.default_class);
        let a = Some("align");
        kv.push(a, "iterations", self.align_iterations);
        kv.push(a, "heuristic", heuristic_name(self.align_heuristic));
        kv.push(a, "null", self.align_null);
        if let (Some(x), Some(y)) = (&self.source_stemmer, &self.target_stemmer) {
            kv.push(a, "source_stemmer", p(x));
            kv.push(a, "target_stemmer", p(y));
        }
        let m = Some("model");
        kv.push(m, "max_phrase_len", self.max_phrase_len);
        kv.push(m, "lm_order", self.lm_order);
        let limit = |l: Option<usize>| l.map_or("none".to_string(), |v| v.to_string());
        let dd = Some("decoder");
        kv.push(dd, "beam", self.beam_size);
        kv.push(dd, "distortion_limit", limit(self.distortion_limit));
        kv.push(dd, "nbest", self.nbest_size);
        kv.push(dd, "table_limit", limit(self.table_limit));
        kv.push(dd, "tune_rounds", self.tune_rounds);
        if let Some(w) = &self.initial_weights {
            kv.push(dd, "weights", p(w));
        }
        let t = Some("translit");
        kv.push(t, "threshold", self.translit_threshold);
        kv.push(t, "em_rounds", self.translit_em_rounds);
        kv.push(t, "candidates", self.translit_candidates);
        kv.push(t, "rescore_nbest", self.translit_nbest);
        kv
    }

    pub fn to_text(&self) -> String {
        kv_text(&self.to_kv())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Alignment settings, loading stemmer profiles when both are set.
    pub fn align_options(&self) -> Result<AlignOptions, PipelineError> {
        let stemmers = match (&self.source_stemmer, &self.target_stemmer) {
            (Some(s), Some(t)) => Some((
                at("align", StemmerProfile::load(s, &self.language_pair.0))?,
                at("align", StemmerProfile::load(t, &self.language_pair.1))?,
            )),
            _ => None,
        };
        Ok(AlignOptions {
            iterations: self.align_iterations,
            use_null: self.align_null,
            heuristic: self.align_heuristic,
            stemmers,
        })
    }

    pub fn decoder_config(&self, weights: Weights) -> DecoderConfig {
        DecoderConfig {
            weights,
            beam_size: self.beam_size,
            distortion_limit: self.distortion_limit,
            nbest_size: self.nbest_size,
            table_limit: self.table_limit,
            recombine: true,
        }
    }

    pub fn tokenize_source(&self, line: &str) -> Vec<String> {
        tokenize_with(line, self.source_script, self.assume_tokenized)
    }

    pub fn tokenize_target(&self, line: &str) -> Vec<String> {
        tokenize_with(line, self.target_script, self.assume_tokenized)
    }
}

fn tokenize_with(line: &str, profile: ScriptProfile, assume_tokenized: bool) -> Vec<String> {
    if assume_tokenized {
        line.split_whitespace().map(str::to_string).collect()
    } else {
        tokenize(line, profile)
    }
}

/// Serializes entries grouped under their section headers, in order.
pub fn kv_text(kv: &KvFile) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for e in &kv.entries {
        let s = e.section.as_deref();
        if s != current {
            if let Some(name) = s {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{name}]\n"));
            }
            current = s;
        }
        out.push_str(&format!("{} = {}\n", e.key, e.value));
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::MissingArtifact {
        name: format!("rule file ({e})"),
        path: path.to_path_buf(),
    })?;
    Ok(sha256_hex(&bytes))
}

/// Files a finished run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub work_dir: PathBuf,
    pub config_hash: String,
    pub clean_source: PathBuf,
    pub clean_target: PathBuf,
    /// Training source after preprocessing.
    pub train_source: PathBuf,
    pub alignment: PathBuf,
    pub phrase_table: PathBuf,
    pub lm_arpa: PathBuf,
    pub lm_binary: PathBuf,
    pub weights: PathBuf,
    /// Built from the training source when compound splitting has no
    /// vocabulary file configured.
    pub compound_vocabulary: Option<PathBuf>,
    pub mined_pairs: Option<PathBuf>,
    pub output: PathBuf,
    pub report: PathBuf,
    pub run_log: PathBuf,
    /// (rule file, SHA-256) for every preprocessing file used in training.
    pub rule_hashes: Vec<(PathBuf, String)>,
    pub evaluation: EvaluationReport,
    /// Passthrough tokens left in the test translation.
    pub untranslated: usize,
}

impl RunArtifacts {
    /// Every model and output file, named.
    pub fn files(&self) -> Vec<(&'static str, &Path)> {
        let mut out: Vec<(&'static str, &Path)> = vec![
            ("clean_source", &self.clean_source),
            ("clean_target", &self.clean_target),
            ("train_source", &self.train_source),
            ("alignment", &self.alignment),
            ("phrase_table", &self.phrase_table),
            ("lm_arpa", &self.lm_arpa),
            ("lm_binary", &self.lm_binary),
            ("weights", &self.weights),
            ("output", &self.output),
            ("report", &self.report),
        ];
        if let Some(p) = &self.compound_vocabulary {
            out.push(("compound_vocabulary", p));
        }
        if let Some(p) = &self.mined_pairs {
            out.push(("mined_pairs", p));
        }
        out
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.push(None, "config_hash", &self.config_hash);
        for (name, path) in self.files() {
            kv.push(None, name, path.display());
        }
        kv.push(None, "run_log", self.run_log.display());
        for (path, hash) in &self.rule_hashes {
            kv.push(None, "rule", format!("{hash} {}", path.display()));
        }
        kv.push(None, "untranslated", self.untranslated);
        let e = &self.evaluation;
        kv.push(None, "evaluation", format!("{}\t{}\t{}\t{}\t{}", e.pair, e.system, e.bleu, e.nist, e.ter));
        kv
    }

    pub fn write(&self) -> Result<(), PipelineError> {
        let path = self.work_dir.join(ARTIFACTS_FILE);
        at("finish", fs::write(&path, kv_text(&self.to_kv())))
    }

    /// Reads `artifacts.kv` from a finished run's work directory.
    pub fn load(work_dir: &Path) -> Result<Self, PipelineError> {
        let path = work_dir.join(ARTIFACTS_FILE);
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact {
                name: "artifacts".into(),
                path,
            });
        }
        let kv = KvFile::load(&path).map_err(|e| PipelineError::stage("load", e))?;
        let bad = |m: String| PipelineError::stage("load", format!("{}: {m}", path.display()));
        let get = |k: &str| kv.get(None, k).map(PathBuf::from).ok_or_else(|| bad(format!("missing `{k}`")));
        let mut rule_hashes = Vec::new();
        for v in kv.get_all(None, "rule") {
            let (hash, p) = v.split_once(' ').ok_or_else(|| bad(format!("bad rule entry {v:?}")))?;
            rule_hashes.push((PathBuf::from(p), hash.to_string()));
        }
        let eval = kv.get(None, "evaluation").ok_or_else(|| bad("missing `evaluation`".into()))?;
        let cols: Vec<&str> = eval.split('\t').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad score {s:?}")));
        if cols.len() != 5 {
            return Err(bad(format!("bad evaluation entry {eval:?}")));
        }
        Ok(RunArtifacts {
            work_dir: work_dir.to_path_buf(),
            config_hash: kv.get(None, "config_hash").unwrap_or_default().to_string(),
            clean_source: get("clean_source")?,
            clean_target: get("clean_target")?,
            train_source: get("train_source")?,
            alignment: get("alignment")?,
            phrase_table: get("phrase_table")?,
            lm_arpa: get("lm_arpa")?,
            lm_binary: get("lm_binary")?,
            weights: get("weights")?,
            compound_vocabulary: get("compound_vocabulary").ok(),
            mined_pairs: get("mined_pairs").ok(),
            output: get("output")?,
            report: get("report")?,
            run_log: get("run_log")?,
            rule_hashes,
            evaluation: EvaluationReport {
                pair: cols[0].to_string(),
                system: cols[1].to_string(),
                bleu: num(cols[2])?,
                nist: num(cols[3])?,
                ter: num(cols[4])?,
            },
            untranslated: kv
                .get(None, "untranslated")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("missing `untranslated`".into()))?,
        })
    }
}

/// Exclusive ownership of a work directory; released on drop.
pub struct WorkLock {
    path: PathBuf,
}

impl WorkLock {
    pub fn acquire(work_dir: &Path) -> Result<Self, PipelineError> {
        at("lock", fs::create_dir_all(work_dir))?;
        let path = work_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(work_dir.to_path_buf()))
            }
            Err(e) => Err(PipelineError::stage("lock", e)),
        }
    }
}

impl Drop for WorkLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Appends `timestamp<TAB>stage<TAB>message` lines.
pub struct RunLog {
    file: File,
    pub path: PathBuf,
}

impl RunLog {
    pub fn open(work_dir: &Path) -> Result<Self, PipelineError> {
        let path = work_dir.join(LOG_FILE);
        let file = at("log", OpenOptions::new().create(true).append(true).open(&path))?;
        Ok(RunLog { file, path })
    }

    pub fn record(&mut self, stage: &str, message: impl fmt::Display) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let message = message.to_string().replace(['\t', '\n'], " ");
        log::debug!("{stage}: {message}");
        let _ = writeln!(self.file, "{}.{:03}\t{stage}\t{message}", now.as_secs(), now.subsec_millis());
    }
}

/// Preprocessing spec actually used by a system; S1 gets none.
pub fn effective_spec(config: &ExperimentConfig, compound_vocabulary: Option<&Path>) -> PreprocessSpec {
    let mut spec = config.preprocess.clone();
    if !config.system.preprocesses() {
        spec.steps.clear();
    }
    if let Some(p) = compound_vocabulary {
        spec.compound_vocabulary = Some(p.to_path_buf());
    }
    // only files of active steps are loaded and hashed
    let has = |s| spec.steps.contains(&s);
    if !has(PreprocessStep::Suffix) {
        spec.suffix_rules = None;
    }
    if !has(PreprocessStep::Compound) {
        spec.compound_vocabulary = None;
    }
    if !has(PreprocessStep::Preorder) {
        spec.preorder_rules = None;
        spec.class_lexicon = None;
    }
    spec
}

fn change_message(c: &crate::morpho::ChangeRecord) -> String {
    format!(
        "sentence {} {}: {} -> {}",
        c.sentence + 1,
        c.step,
        c.before.join(" "),
        c.after.join(" ")
    )
}

/// Loaded models for translation.
pub struct Engine {
    pub table: PhraseTable,
    pub lm: BinaryModel,
    pub weights: Weights,
    pub preprocessor: Preprocessor,
    pub char_model: Option<CharModel>,
    config: ExperimentConfig,
}

/// Result of translating a batch.
#[derive(Debug, Clone)]
pub struct Translated {
    /// Source tokens after preprocessing.
    pub sources: Vec<Vec<String>>,
    pub best: Vec<Translation>,
}

impl Translated {
    pub fn lines(&self) -> Vec<String> {
        self.best.iter().map(Translation::text).collect()
    }

    pub fn untranslated(&self) -> usize {
        count_untranslated(&self.best)
    }
}

/// Passthrough segments across translations.
pub fn count_untranslated(best: &[Translation]) -> usize {
    best.iter()
        .flat_map(|t| &t.segments)
        .filter(|s| s.kind == OptionKind::Passthrough)
        .count()
}

impl Engine {
    /// Loads everything translation needs, checking that each file exists
    /// and that preprocessing rule files still match their training hashes.
    pub fn load(config: &ExperimentConfig, artifacts: &RunArtifacts) -> Result<Self, PipelineError> {
        let need = |name: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(PipelineError::MissingArtifact {
                    name: name.to_string(),
                    path: p.to_path_buf(),
                })
            }
        };
        need("phrase_table", &artifacts.phrase_table)?;
        need("lm_binary", &artifacts.lm_binary)?;
        need("weights", &artifacts.weights)?;
        let mined = if config.system.transliterates() {
            let p = artifacts.mined_pairs.clone().ok_or_else(|| PipelineError::MissingArtifact {
                name: "mined_pairs".into(),
                path: artifacts.work_dir.join("translit.mined"),
            })?;
            need("mined_pairs", &p)?;
            Some(p)
        } else {
            None
        };
        let spec = effective_spec(config, artifacts.compound_vocabulary.as_deref());
        verify_rule_hashes(&spec, &artifacts.rule_hashes)?;
        let preprocessor = at("translate", Preprocessor::from_spec(&spec))?;
        let table = at("translate", PhraseTable::read(&artifacts.phrase_table))?;
        let lm = at("translate", load_binary(&artifacts.lm_binary))?;
        let weights = at("translate", Weights::read(&artifacts.weights))?;
        let char_model = match mined {
            Some(p) => {
                let set = at("translate", MinedPairSet::read(&p, config.translit_threshold))?;
                Some(at("translate", CharModel::from_mined(&set))?)
            }
            None => None,
        };
        Ok(Engine {
            table,
            lm,
            weights,
            preprocessor,
            char_model,
            config: config.clone(),
        })
    }

    /// Tokenizes and preprocesses raw lines, logging every change.
    pub fn prepare(&self, lines: &[String], log: &mut RunLog, stage: &str) -> Result<Vec<Vec<String>>, PipelineError> {
        let tokens: Vec<Vec<String>> = lines.iter().map(|l| self.config.tokenize_source(l)).collect();
        let (out, changes) = at(stage, apply_preprocessing(&tokens, &self.preprocessor))?;
        for c in &changes {
            log.record(stage, change_message(c));
        }
        Ok(out)
    }

    /// N-best lists under `config`, with OOV slots expanded for S3.
    pub fn nbest(&self, sentences: &[Vec<String>], config: &DecoderConfig) -> Result<Vec<NBestList>, DecoderError> {
        let lists = decode_corpus(sentences, &self.table, &self.lm, config, &Passthrough)?;
        let Some(model) = &self.char_model else {
            return Ok(lists);
        };
        let mut unknown = BTreeSet::new();
        for s in sentences {
            for w in s {
                if self.table.lookup(std::slice::from_ref(w)).is_empty() {
                    unknown.insert(w.clone());
                }
            }
        }
        let cands: BTreeMap<String, Vec<(String, f64)>> = transliterate_all(&unknown, model, self.config.translit_candidates)
            .into_iter()
            .map(|(w, c)| (w, log_softmax(&c)))
            .collect();
        let lookup = |w: &str| cands.get(w).cloned().unwrap_or_default();
        Ok(lists
            .into_iter()
            .map(|mut list| {
                list.entries.truncate(self.config.translit_nbest);
                let mut out = integrate_oov_with(&list, &lookup, &self.lm, &config.weights);
                out.normalize(config.nbest_size);
                out
            })
            .collect())
    }

    pub fn translate_tokens(&self, sentences: Vec<Vec<String>>) -> Result<Translated, PipelineError> {
        let config = self.config.decoder_config(self.weights.clone());
        let lists = at("translate", self.nbest(&sentences, &config))?;
        let best = lists
            .into_iter()
            .map(|l| l.entries.into_iter().next().unwrap_or_default())
            .collect();
        Ok(Translated { sources: sentences, best })
    }
}

fn verify_rule_hashes(spec: &PreprocessSpec, recorded: &[(PathBuf, String)]) -> Result<(), PipelineError> {
    let wanted: BTreeSet<&Path> = spec.rule_files().into_iter().collect();
    let have: BTreeSet<&Path> = recorded.iter().map(|(p, _)| p.as_path()).collect();
    if wanted != have {
        return Err(PipelineError::stage(
            "translate",
            format!("preprocessing files {wanted:?} differ from those used in training {have:?}"),
        ));
    }
    for (path, hash) in recorded {
        if &hash_file(path)? != hash {
            return Err(PipelineError::RuleHash { path: path.clone() });
        }
    }
    Ok(())
}

struct Run<'a> {
    config: &'a ExperimentConfig,
    log: RunLog,
    created: Vec<PathBuf>,
}

impl Run<'_> {
    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.config.work_dir.join(name);
        self.created.push(p.clone());
        p
    }

    fn train(&mut self) -> Result<RunArtifacts, PipelineError> {
        let config = self.config;
        let hash = config.hash();
        self.log.record(
            "start",
            format!("{} {} config {hash} seed {}", config.pair_label(), config.system_label(), config.seed),
        );

        // clean
        let corpus = at("clean", load_parallel(&config.train_source, &config.train_target, None))?;
        let tokenized = corpus.sentence_pairs(
            (config.source_script, config.target_script),
            config.assume_tokenized,
            config.max_sentence_len,
        );
        if tokenized.pairs.is_empty() {
            return Err(PipelineError::stage("clean", "no training pairs survive cleaning"));
        }
        self.log.record(
            "clean",
            format!("{} pairs kept, {} dropped", tokenized.pairs.len(), tokenized.dropped.len()),
        );
        let (src, tgt): (Vec<Vec<String>>, Vec<Vec<String>>) =
            tokenized.pairs.into_iter().map(|p| (p.source, p.target)).unzip();
        let clean_source = self.file("clean.src");
        let clean_target = self.file("clean.tgt");
        at("clean", write_lines(&clean_source, &joined(&src)))?;
        at("clean", write_lines(&clean_target, &joined(&tgt)))?;

        // preprocess
        let mut compound_vocabulary = None;
        let mut spec = effective_spec(config, None);
        if spec.steps.contains(&PreprocessStep::Compound) && spec.compound_vocabulary.is_none() {
            let p = self.file("compound.vocab");
            at("preprocess", build_vocabulary(&src).write(&p))?;
            spec.compound_vocabulary = Some(p.clone());
            compound_vocabulary = Some(p);
        }
        let preprocessor = at("preprocess", Preprocessor::from_spec(&spec))?;
        let mut rule_hashes = Vec::new();
        for p in spec.rule_files() {
            rule_hashes.push((p.to_path_buf(), hash_file(p)?));
        }
        let (src, changes) = at("preprocess", apply_preprocessing(&src, &preprocessor))?;
        for c in &changes {
            self.log.record("preprocess", change_message(c));
        }
        let train_source = self.file("train.pp.src");
        at("preprocess", write_lines(&train_source, &joined(&src)))?;

        // align
        let bitext: Vec<(Vec<String>, Vec<String>)> = src.into_iter().zip(tgt).collect();
        let options = config.align_options()?;
        let aligned = at("align", align_corpus(&bitext, &options))?;
        self.log.record(
            "align",
            format!(
                "{} pairs, forward log-likelihood {:?}",
                bitext.len(),
                aligned.forward_report.log_likelihoods.last()
            ),
        );
        let alignment = self.file("align.txt");
        at("align", write_pharaoh(&alignment, &aligned.alignments))?;

        // extract
        let table = score_table(&bitext, &aligned.alignments, config.max_phrase_len);
        let phrase_table = self.file("phrase-table.txt");
        at("extract", table.write(&phrase_table))?;
        self.log.record("extract", format!("{} phrase pairs", table.len()));

        // lm
        let mut lm_lines = joined(&bitext.iter().map(|p| p.1.clone()).collect::<Vec<_>>());
        if config.track == Track::Unconstrained {
            for extra in &config.extra_lm {
                let lines = at("lm", read_lines(extra))?;
                let tokenized: Vec<String> = lines.iter().map(|l| config.tokenize_target(l).join(" ")).collect();
                let cleaned = clean_monolingual(&tokenized);
                self.log.record("lm", format!("{} extra lines from {}", cleaned.len(), extra.display()));
                lm_lines.extend(cleaned);
            }
        }
        let model = at("lm", crate::lm::train(&lm_lines, config.lm_order))?;
        let lm_arpa = self.file("lm.arpa");
        let lm_binary = self.file("lm.bin");
        at("lm", write_arpa(&model, &lm_arpa))?;
        at("lm", binarize(&model, &lm_binary))?;
        self.log.record(
            "lm",
            format!("order {} on {} lines, {} unigrams", config.lm_order, lm_lines.len(), model.count(1)),
        );
        drop(model);

        // translit
        let mined_pairs = if config.system.transliterates() {
            let pairs = crate::translit::harvest_one_to_one(&bitext, &aligned.alignments);
            let mined = at("translit", mine_pairs(&pairs, config.translit_em_rounds))?
                .with_threshold(config.translit_threshold);
            let p = self.file("translit.mined");
            at("translit", mined.write(&p))?;
            self.log.record(
                "translit",
                format!(
                    "{} of {} one-to-one pairs accepted, mixture weight {:.3}",
                    mined.accepted().len(),
                    pairs.len(),
                    mined.mixture_weight
                ),
            );
            Some(p)
        } else {
            None
        };

        // tune
        let initial = match &config.initial_weights {
            Some(p) => at("tune", Weights::read(p))?,
            None => Weights::default(),
        };
        let weights = self.file("weights.txt");
        at("tune", initial.write(&weights))?;
        let output = self.file("test.out");
        let report = self.file("report.tsv");
        let mut artifacts = RunArtifacts {
            work_dir: config.work_dir.clone(),
            config_hash: hash,
            clean_source,
            clean_target,
            train_source,
            alignment,
            phrase_table,
            lm_arpa,
            lm_binary,
            weights,
            compound_vocabulary,
            mined_pairs,
            output,
            report,
            run_log: self.log.path.clone(),
            rule_hashes,
            evaluation: EvaluationReport {
                pair: config.pair_label(),
                system: config.system_label(),
                bleu: 0.0,
                nist: 0.0,
                ter: 0.0,
            },
            untranslated: 0,
        };
        let engine = Engine::load(config, &artifacts)?;
        let tuned = tune_on_dev(config, &engine, initial, &mut self.log)?;
        at("tune", tuned.write(&artifacts.weights))?;
        let engine = Engine {
            weights: tuned,
            ..engine
        };

        // translate + evaluate
        let test = at("translate", load_parallel(&config.test_source, &config.test_target, None))?;
        let test_src = engine.prepare(&test.source_lines, &mut self.log, "translate")?;
        let translated = engine.translate_tokens(test_src)?;
        at("translate", write_lines(&artifacts.output, &translated.lines()))?;
        artifacts.untranslated = translated.untranslated();
        self.log.record(
            "translate",
            format!("{} sentences, {} untranslated tokens", test.len(), artifacts.untranslated),
        );
        let hyps: Vec<Vec<String>> = translated.best.iter().map(|t| t.tokens.clone()).collect();
        let refs: Vec<Vec<String>> = test.target_lines.iter().map(|l| config.tokenize_target(l)).collect();
        artifacts.evaluation = at(
            "evaluate",
            evaluate_tokens(&hyps, &refs, &config.pair_label(), &config.system_label()),
        )?;
        at(
            "evaluate",
            fs::write(&artifacts.report, EvaluationReport::tsv(std::slice::from_ref(&artifacts.evaluation))),
        )?;
        self.log.record("evaluate", &artifacts.evaluation);
        artifacts.write()?;
        self.log.record("done", config.work_dir.display());
        Ok(artifacts)
    }
}

fn tune_on_dev(config: &ExperimentConfig, engine: &Engine, initial: Weights, log: &mut RunLog) -> Result<Weights, PipelineError> {
    let dev = at("tune", load_parallel(&config.dev_source, &config.dev_target, None))?;
    let dev_src = engine.prepare(&dev.source_lines, log, "tune")?;
    let dev_ref: Vec<Vec<String>> = dev.target_lines.iter().map(|l| config.tokenize_target(l)).collect();
    let (tuned, report) = at(
        "tune",
        tune_weights(&dev_src, &dev_ref, &config.decoder_config(initial), config.tune_rounds, |s, c| {
            engine.nbest(s, c)
        }),
    )?;
    log.record(
        "tune",
        format!(
            "{} rounds, pool {} candidates, pool BLEU per round {:?}, chose round {}",
            report.history.len() - 1,
            report.pool_size,
            report.final_pool_bleu,
            report.chosen
        ),
    );
    Ok(tuned.weights)
}

/// Re-tunes the weights of a trained run on the development split,
/// starting from its current weights, and overwrites its weights file.
pub fn retune(config: &ExperimentConfig, artifacts: &RunArtifacts) -> Result<Weights, PipelineError> {
    let _lock = WorkLock::acquire(&config.work_dir)?;
    let mut log = RunLog::open(&config.work_dir)?;
    let engine = Engine::load(config, artifacts)?;
    let tuned = tune_on_dev(config, &engine, engine.weights.clone(), &mut log)?;
    at("tune", tuned.write(&artifacts.weights))?;
    Ok(tuned)
}

fn joined(sentences: &[Vec<String>]) -> Vec<String> {
    sentences.iter().map(|s| s.join(" ")).collect()
}

/// Trains every model for `config`, tunes on the development split and
/// translates and scores the test split. On failure the files this run
/// created are removed; the run log is kept.
pub fn train_pipeline(config: &ExperimentConfig) -> Result<RunArtifacts, PipelineError> {
    config.validate()?;
    let _lock = WorkLock::acquire(&config.work_dir)?;
    let mut run = Run {
        config,
        log: RunLog::open(&config.work_dir)?,
        created: Vec::new(),
    };
    let result = run.train();
    if let Err(e) = &result {
        run.log.record("abort", e);
        for p in run.created.iter().chain([&config.work_dir.join(ARTIFACTS_FILE)]) {
            let _ = fs::remove_file(p);
        }
    }
    result
}

/// Translates a raw input file with a trained run. The output has exactly
/// one line per input line.
pub fn translate(
    config: &ExperimentConfig,
    artifacts: &RunArtifacts,
    input: &Path,
    output: &Path,
) -> Result<Translated, PipelineError> {
    let _lock = WorkLock::acquire(&config.work_dir)?;
    let mut log = RunLog::open(&config.work_dir)?;
    let engine = Engine::load(config, artifacts)?;
    let lines = at("translate", read_lines(input))?;
    let sources = engine.prepare(&lines, &mut log, "translate")?;
    let translated = engine.translate_tokens(sources)?;
    at("translate", write_lines(output, &translated.lines()))?;
    log.record(
        "translate",
        format!(
            "{} -> {}: {} lines, {} untranslated tokens",
            input.display(),
            output.display(),
            lines.len(),
            translated.untranslated()
        ),
    );
    Ok(translated)
}

/// Outcome of a grid of runs.
#[derive(Debug)]
pub struct GridOutcome {
    pub runs: Vec<RunArtifacts>,
    /// (system label, error) for configs that failed.
    pub failures: Vec<(String, PipelineError)>,
}

impl GridOutcome {
    pub fn rows(&self) -> Vec<EvaluationReport> {
        self.runs.iter().map(|r| r.evaluation.clone()).collect()
    }

    pub fn report_tsv(&self) -> String {
        EvaluationReport::tsv(&self.rows())
    }
}

/// Runs each configuration in turn. A failing configuration is reported
/// and the rest still run.
pub fn run_grid(configs: &[ExperimentConfig]) -> Result<GridOutcome, PipelineError> {
    if configs.is_empty() {
        return Err(PipelineError::Config("the grid has no configurations".into()));
    }
    let mut out = GridOutcome {
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for c in configs {
        match train_pipeline(c) {
            Ok(a) => out.runs.push(a),
            Err(e) => {
                log::error!("{} {}: {e}", c.pair_label(), c.system_label());
                out.failures.push((format!("{} {}", c.pair_label(), c.system_label()), e));
            }
        }
    }
    Ok(out)
}

/// Expands the `[grid]` section (`systems`, `tracks`) of a config file
/// into one configuration per combination. Without a `[grid]` section the
/// file describes a single run.
pub fn grid_configs(kv: &KvFile, base_dir: &Path) -> Result<Vec<ExperimentConfig>, PipelineError> {
    let list = |key: &str| kv.get(Some("grid"), key).map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()));
    let (Some(systems), tracks) = (list("systems"), list("tracks")) else {
        return Ok(vec![ExperimentConfig::from_kv(kv, base_dir)?]);
    };
    let systems: Vec<System> = systems.map(str::parse).collect::<Result<_, _>>()?;
    let tracks: Vec<Track> = match tracks {
        Some(t) => t.map(str::parse).collect::<Result<_, _>>()?,
        None => vec![Track::Constrained],
    };
    // the base only needs a valid system; each variant sets its own
    let mut base_kv = kv.clone();
    base_kv.push(Some("experiment"), "system", systems.first().copied().unwrap_or(System::S1));
    base_kv.push(Some("experiment"), "track", Track::Constrained);
    let base = ExperimentConfig::from_kv(&base_kv, base_dir)?;
    let mut out = Vec::new();
    for &t in &tracks {
        for &s in &systems {
            let c = base.variant(s, t);
            c.validate()?;
            out.push(c);
        }
    }
    Ok(out)
}

/// Config text for a grid over the fixture files in `paths`.
pub fn fixture_config_text(paths: &crate::fixture::FixturePaths, work_dir: &Path, seed: u64) -> String {
    let p = |x: &Path| x.display().to_string();
    format!(
        "[experiment]\npair = agg-grk\nseed = {seed}\nwork_dir = {}\n\n\
         [data]\ntrain_source = {}\ntrain_target = {}\ndev_source = {}\ndev_target = {}\n\
         test_source = {}\ntest_target = {}\nextra_lm = {}\nassume_tokenized = true\n\n\
         [preprocess]\nsteps = compound, suffix\nsuffix_rules = {}\n\n\
         [grid]\nsystems = S1, S2, S3\ntracks = constrained\n",
        p(work_dir),
        p(&paths.train_source),
        p(&paths.train_target),
        p(&paths.dev_source),
        p(&paths.dev_target),
        p(&paths.test_source),
        p(&paths.test_target),
        p(&paths.extra_lm),
        p(&paths.suffix_rules),
    )
}

//! Source-side preprocessing: suffix separation, compound splitting,
//! class-pattern preordering and a lightweight suffix-stripping stemmer.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{read_lines, CorpusError, Vocabulary};
use crate::DetMap;

pub const DEFAULT_MARKER: &str = "+";

#[derive(Debug, Error)]
pub enum MorphoError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: line {line}: {message}")]
    RuleFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error("preorder rule {rule:?}: {message}")]
    PreorderRule { rule: String, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("sentence {sentence}: {message}")]
    Annotation { sentence: usize, message: String },
}

/// Ordered suffix rules; longest suffix first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuffixRuleSet {
    pub language: String,
    rules: Vec<(String, usize)>,
    pub marker: String,
}

impl SuffixRuleSet {
    /// Rules are re-sorted by descending suffix length (stable, so file order
    /// breaks ties).
    pub fn new(language: &str, rules: Vec<(String, usize)>, marker: &str) -> Result<Self, MorphoError> {
        for (i, (suffix, min)) in rules.iter().enumerate() {
            if suffix.is_empty() || *min < 2 {
                return Err(MorphoError::RuleFile {
                    path: "<inline>".into(),
                    line: i + 1,
                    message: "suffix must be non-empty and min stem length >= 2".into(),
                });
            }
        }
        let mut rules = rules;
        rules.sort_by_key(|(s, _)| std::cmp::Reverse(s.chars().count()));
        Ok(SuffixRuleSet {
            language: language.to_string(),
            rules,
            marker: marker.to_string(),
        })
    }

    /// `suffix<TAB>min_stem_len` per line, `#` comments.
    pub fn load(path: &Path, language: &str, marker: &str) -> Result<Self, MorphoError> {
        let rules = load_suffix_file(path)?;
        Self::new(language, rules, marker)
    }

    pub fn rules(&self) -> &[(String, usize)] {
        &self.rules
    }

    /// Longest applicable rule: `(stem, suffix)`.
    fn find<'w>(&'w self, word: &'w str) -> Option<(&'w str, &'w str)> {
        let word_len = word.chars().count();
        self.rules.iter().find_map(|(suffix, min_stem)| {
            let stem = word.strip_suffix(suffix.as_str())?;
            (word_len - suffix.chars().count() >= *min_stem).then_some((stem, suffix.as_str()))
        })
    }
}

fn load_suffix_file(path: &Path) -> Result<Vec<(String, usize)>, MorphoError> {
    let mut rules = Vec::new();
    for (i, raw) in read_lines(path)?.iter().enumerate() {
        let line = strip_comment(raw);
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| MorphoError::RuleFile {
            path: path.display().to_string(),
            line: i + 1,
            message: message.to_string(),
        };
        let (suffix, min) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `suffix<TAB>min_stem_len`"))?;
        let suffix = suffix.trim();
        let min: usize = min.trim().parse().map_err(|_| err("min stem length is not an integer"))?;
        if suffix.is_empty() || min < 2 {
            return Err(err("suffix must be non-empty and min stem length >= 2"));
        }
        rules.push((suffix.to_string(), min));
    }
    Ok(rules)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(p) => &line[..p],
        None => line,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Suffix,
    Compound,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDecision {
    pub word: String,
    pub parts: Vec<String>,
    pub kind: SplitKind,
    /// Geometric-mean part frequency for compounds, 0 otherwise.
    pub score: f64,
}

impl SplitDecision {
    fn unsplit(word: &str) -> Self {
        SplitDecision {
            word: word.to_string(),
            parts: vec![word.to_string()],
            kind: SplitKind::None,
            score: 0.0,
        }
    }

    /// Concatenation of the parts with `marker` prefixes removed.
    pub fn rejoin(&self, marker: &str) -> String {
        self.parts
            .iter()
            .map(|p| p.strip_prefix(marker).filter(|s| !s.is_empty()).unwrap_or(p))
            .collect()
    }
}

/// Detaches at most one suffix, the longest that leaves a long enough stem.
pub fn separate_suffix(word: &str, rules: &SuffixRuleSet) -> SplitDecision {
    if word.starts_with(&rules.marker) {
        return SplitDecision::unsplit(word);
    }
    match rules.find(word) {
        Some((stem, suffix)) => SplitDecision {
            word: word.to_string(),
            parts: vec![stem.to_string(), format!("{}{}", rules.marker, suffix)],
            kind: SplitKind::Suffix,
            score: 0.0,
        },
        None => SplitDecision::unsplit(word),
    }
}

/// Two-part split maximizing the geometric mean of part frequencies; only
/// taken when that mean strictly exceeds the word's own frequency.
pub fn split_compound(word: &str, vocabulary: &Vocabulary, min_part_len: usize, min_freq: u64) -> SplitDecision {
    let whole = vocabulary.count(word) as f64;
    let boundaries: Vec<usize> = word.char_indices().map(|(i, _)| i).skip(1).collect();
    let n_chars = word.chars().count();
    let mut best: Option<(f64, usize)> = None;
    for (k, &b) in boundaries.iter().enumerate() {
        let left_len = k + 1;
        if left_len < min_part_len || n_chars - left_len < min_part_len {
            continue;
        }
        let (left, right) = word.split_at(b);
        let (fl, fr) = (vocabulary.count(left), vocabulary.count(right));
        if fl < min_freq || fr < min_freq || fl == 0 || fr == 0 {
            continue;
        }
        let gm = ((fl as f64) * (fr as f64)).sqrt();
        if best.is_none_or(|(s, _)| gm > s) {
            best = Some((gm, b));
        }
    }
    match best {
        Some((gm, b)) if gm > whole => SplitDecision {
            word: word.to_string(),
            parts: vec![word[..b].to_string(), word[b..].to_string()],
            kind: SplitKind::Compound,
            score: gm,
        },
        _ => SplitDecision::unsplit(word),
    }
}

/// Pattern of class labels (`*` matches any class) and the output order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreorderRule {
    pub pattern: Vec<String>,
    pub permutation: Vec<usize>,
}

impl PreorderRule {
    pub fn new(pattern: Vec<String>, permutation: Vec<usize>) -> Result<Self, MorphoError> {
        let rule = PreorderRule { pattern, permutation };
        let mut seen = vec![false; rule.pattern.len()];
        let ok = !rule.pattern.is_empty()
            && rule.permutation.len() == rule.pattern.len()
            && rule.permutation.iter().all(|&i| {
                i < seen.len() && !std::mem::replace(&mut seen[i], true)
            });
        if !ok {
            return Err(MorphoError::PreorderRule {
                rule: rule.to_string(),
                message: "permutation is not a bijection on pattern indices".into(),
            });
        }
        Ok(rule)
    }

    fn matches(&self, classes: &[String]) -> bool {
        classes.len() >= self.pattern.len()
            && self
                .pattern
                .iter()
                .zip(classes)
                .all(|(p, c)| p == "*" || p == c)
    }

    /// Rule that undoes this one.
    pub fn inverse(&self) -> PreorderRule {
        let mut inv = vec![0; self.permutation.len()];
        for (k, &p) in self.permutation.iter().enumerate() {
            inv[p] = k;
        }
        PreorderRule {
            pattern: self.permutation.iter().map(|&p| self.pattern[p].clone()).collect(),
            permutation: inv,
        }
    }
}

impl fmt::Display for PreorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let perm: Vec<String> = self.permutation.iter().map(|p| p.to_string()).collect();
        write!(f, "{} -> {}", self.pattern.join(" "), perm.join(" "))
    }
}

impl FromStr for PreorderRule {
    type Err = MorphoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |message: &str| MorphoError::PreorderRule {
            rule: s.trim().to_string(),
            message: message.to_string(),
        };
        let (lhs, rhs) = s.split_once("->").ok_or_else(|| bad("missing `->`"))?;
        let pattern: Vec<String> = lhs.split_whitespace().map(str::to_string).collect();
        let permutation = rhs
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("permutation must be integers"))?;
        PreorderRule::new(pattern, permutation).map_err(|_| bad("permutation is not a bijection on pattern indices"))
    }
}

/// `CLASS1 CLASS2 ... -> i j k` per line.
pub fn load_preorder_rules(path: &Path) -> Result<Vec<PreorderRule>, MorphoError> {
    read_lines(path)?
        .iter()
        .map(|l| strip_comment(l))
        .filter(|l| !l.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Reorders leftmost-longest non-overlapping matches. Among rules of equal
/// length the first listed wins.
pub fn preorder<T: Clone>(sentence: &[T], classes: &[String], rules: &[PreorderRule]) -> Vec<T> {
    assert_eq!(sentence.len(), classes.len(), "one class per token");
    let mut out = Vec::with_capacity(sentence.len());
    let mut i = 0;
    while i < sentence.len() {
        let best = rules
            .iter()
            .filter(|r| r.matches(&classes[i..]))
            .fold(None::<&PreorderRule>, |acc, r| match acc {
                Some(a) if a.pattern.len() >= r.pattern.len() => Some(a),
                _ => Some(r),
            });
        match best {
            Some(rule) => {
                out.extend(rule.permutation.iter().map(|&p| sentence[i + p].clone()));
                i += rule.pattern.len();
            }
            None => {
                out.push(sentence[i].clone());
                i += 1;
            }
        }
    }
    out
}

/// Token → class lexicon with a default class for unlisted tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLexicon {
    classes: DetMap<String, String>,
    pub default_class: String,
}

impl ClassLexicon {
    pub fn new(default_class: &str) -> Self {
        ClassLexicon {
            classes: DetMap::default(),
            default_class: default_class.to_string(),
        }
    }

    pub fn insert(&mut self, token: &str, class: &str) {
        self.classes.insert(token.to_string(), class.to_string());
    }

    /// `token<TAB>CLASS` per line.
    pub fn load(path: &Path, default_class: &str) -> Result<Self, MorphoError> {
        let mut lex = ClassLexicon::new(default_class);
        for (i, raw) in read_lines(path)?.iter().enumerate() {
            let line = strip_comment(raw);
            if line.trim().is_empty() {
                continue;
            }
            let (tok, class) = line.split_once('\t').ok_or_else(|| MorphoError::RuleFile {
                path: path.display().to_string(),
                line: i + 1,
                message: "expected `token<TAB>CLASS`".into(),
            })?;
            lex.insert(tok.trim(), class.trim());
        }
        Ok(lex)
    }

    pub fn classify(&self, tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .map(|t| self.classes.get(t).unwrap_or(&self.default_class).clone())
            .collect()
    }
}

/// One class sequence per corpus line.
pub fn load_annotations(path: &Path) -> Result<Vec<Vec<String>>, MorphoError> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemmerProfile {
    pub language: String,
    suffixes: Vec<String>,
    pub min_stem_len: usize,
}

impl StemmerProfile {
    pub fn new(language: &str, suffixes: Vec<String>, min_stem_len: usize) -> Self {
        let mut suffixes: Vec<String> = suffixes.into_iter().filter(|s| !s.is_empty()).collect();
        suffixes.sort_by_key(|s| std::cmp::Reverse(s.chars().count()));
        StemmerProfile {
            language: language.to_string(),
            suffixes,
            min_stem_len: min_stem_len.max(1),
        }
    }

    /// Profile that never strips anything.
    pub fn identity(language: &str) -> Self {
        Self::new(language, Vec::new(), 1)
    }

    /// Same file format as suffix rules; the smallest listed min length is used.
    pub fn load(path: &Path, language: &str) -> Result<Self, MorphoError> {
        let rules = load_suffix_file(path)?;
        let min = rules.iter().map(|(_, m)| *m).min().unwrap_or(2);
        Ok(Self::new(language, rules.into_iter().map(|(s, _)| s).collect(), min))
    }

    pub fn suffixes(&self) -> &[String] {
        &self.suffixes
    }

    fn strip_once<'w>(&self, word: &'w str) -> Option<&'w str> {
        let len = word.chars().count();
        self.suffixes.iter().find_map(|s| {
            let stem = word.strip_suffix(s.as_str())?;
            (len - s.chars().count() >= self.min_stem_len).then_some(stem)
        })
    }
}

/// Strips the longest listed suffix that leaves at least `min_stem_len`
/// characters, repeated until no suffix applies, so the result is a fixed
/// point.
pub fn stem(word: &str, profile: &StemmerProfile) -> String {
    let mut current = word;
    while let Some(next) = profile.strip_once(current) {
        current = next;
    }
    current.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessStep {
    Suffix,
    Compound,
    Preorder,
}

impl FromStr for PreprocessStep {
    type Err = MorphoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "suffix" => Ok(PreprocessStep::Suffix),
            "compound" => Ok(PreprocessStep::Compound),
            "preorder" => Ok(PreprocessStep::Preorder),
            other => Err(MorphoError::Config(format!("unknown preprocessing step {other:?}"))),
        }
    }
}

impl fmt::Display for PreprocessStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PreprocessStep::Suffix => "suffix",
            PreprocessStep::Compound => "compound",
            PreprocessStep::Preorder => "preorder",
        })
    }
}

/// Unloaded preprocessing configuration (file paths only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessSpec {
    pub language: String,
    pub steps: Vec<PreprocessStep>,
    pub marker: String,
    pub suffix_rules: Option<PathBuf>,
    /// Token counts used by compound splitting.
    pub compound_vocabulary: Option<PathBuf>,
    pub compound_min_part_len: usize,
    pub compound_min_freq: u64,
    pub preorder_rules: Option<PathBuf>,
    /// `token<TAB>CLASS` lexicon for preordering.
    pub class_lexicon: Option<PathBuf>,
    pub default_class: String,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            language: "src".into(),
            steps: Vec::new(),
            marker: DEFAULT_MARKER.into(),
            suffix_rules: None,
            compound_vocabulary: None,
            compound_min_part_len: 3,
            compound_min_freq: 1,
            preorder_rules: None,
            class_lexicon: None,
            default_class: "X".into(),
        }
    }
}

impl PreprocessSpec {
    /// Default ordering: compound splitting, then suffix separation, then preordering.
    pub fn default_order() -> Vec<PreprocessStep> {
        vec![PreprocessStep::Compound, PreprocessStep::Suffix, PreprocessStep::Preorder]
    }

    /// Rule files this spec reads, in a stable order.
    pub fn rule_files(&self) -> Vec<&Path> {
        [
            &self.suffix_rules,
            &self.compound_vocabulary,
            &self.preorder_rules,
            &self.class_lexicon,
        ]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .collect()
    }
}

/// Where preordering gets token classes from.
#[derive(Debug, Clone)]
pub enum ClassSource {
    Lexicon(ClassLexicon),
    /// Per-sentence class sequences, indexed by sentence position.
    Annotations(Vec<Vec<String>>),
}

/// Loaded, ready-to-run preprocessing pipeline.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub steps: Vec<PreprocessStep>,
    pub marker: String,
    suffix: Option<SuffixRuleSet>,
    compound: Option<(Vocabulary, usize, u64)>,
    preorder: Option<(Vec<PreorderRule>, ClassSource)>,
}

/// One token changed by a preprocessing step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeRecord {
    pub sentence: usize,
    pub step: PreprocessStep,
    pub before: Vec<String>,
    pub after: Vec<String>,
}

impl fmt::Display for ChangeRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.sentence,
            self.step,
            self.before.join(" "),
            self.after.join(" ")
        )
    }
}

impl Preprocessor {
    /// Identity preprocessing.
    pub fn none() -> Self {
        Preprocessor {
            steps: Vec::new(),
            marker: DEFAULT_MARKER.into(),
            suffix: None,
            compound: None,
            preorder: None,
        }
    }

    /// Loads every file the configured steps need; fails before any text is
    /// processed if one is missing.
    pub fn from_spec(spec: &PreprocessSpec) -> Result<Self, MorphoError> {
        let need = |p: &Option<PathBuf>, what: &str, step: PreprocessStep| -> Result<PathBuf, MorphoError> {
            let path = p
                .clone()
                .ok_or_else(|| MorphoError::Config(format!("step `{step}` needs {what}")))?;
            if !path.is_file() {
                return Err(MorphoError::Config(format!(
                    "step `{step}`: {what} {} does not exist",
                    path.display()
                )));
            }
            Ok(path)
        };
        let mut pre = Preprocessor::none();
        pre.marker = spec.marker.clone();
        for &step in &spec.steps {
            match step {
                PreprocessStep::Suffix => {
                    need(&spec.suffix_rules, "a suffix rule file", step)?;
                }
                PreprocessStep::Compound => {
                    need(&spec.compound_vocabulary, "a vocabulary file", step)?;
                }
                PreprocessStep::Preorder => {
                    need(&spec.preorder_rules, "a preorder rule file", step)?;
                    if let Some(p) = &spec.class_lexicon {
                        need(&Some(p.clone()), "a class lexicon", step)?;
                    }
                }
            }
        }
        for &step in &spec.steps {
            match step {
                PreprocessStep::Suffix => {
                    let path = spec.suffix_rules.as_ref().expect("checked");
                    pre.suffix = Some(SuffixRuleSet::load(path, &spec.language, &spec.marker)?);
                }
                PreprocessStep::Compound => {
                    let path = spec.compound_vocabulary.as_ref().expect("checked");
                    pre.compound = Some((
                        Vocabulary::read(path)?,
                        spec.compound_min_part_len,
                        spec.compound_min_freq,
                    ));
                }
                PreprocessStep::Preorder => {
                    let rules = load_preorder_rules(spec.preorder_rules.as_ref().expect("checked"))?;
                    let lex = match &spec.class_lexicon {
                        Some(p) => ClassLexicon::load(p, &spec.default_class)?,
                        None => ClassLexicon::new(&spec.default_class),
                    };
                    pre.preorder = Some((rules, ClassSource::Lexicon(lex)));
                }
            }
            pre.steps.push(step);
        }
        Ok(pre)
    }

    pub fn with_suffix_rules(mut self, rules: SuffixRuleSet) -> Self {
        self.marker = rules.marker.clone();
        self.suffix = Some(rules);
        self.steps.push(PreprocessStep::Suffix);
        self
    }

    pub fn with_compound(mut self, vocabulary: Vocabulary, min_part_len: usize, min_freq: u64) -> Self {
        self.compound = Some((vocabulary, min_part_len, min_freq));
        self.steps.push(PreprocessStep::Compound);
        self
    }

    pub fn with_preorder(mut self, rules: Vec<PreorderRule>, classes: ClassSource) -> Self {
        self.preorder = Some((rules, classes));
        self.steps.push(PreprocessStep::Preorder);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    /// Applies the configured steps in order to one sentence.
    pub fn apply_sentence(
        &self,
        index: usize,
        tokens: &[String],
        log: &mut Vec<ChangeRecord>,
    ) -> Result<Vec<String>, MorphoError> {
        let mut current = tokens.to_vec();
        for &step in &self.steps {
            current = match step {
                PreprocessStep::Suffix => {
                    let rules = self.suffix.as_ref().expect("loaded with step");
                    self.split_each(index, step, &current, log, |w| separate_suffix(w, rules))
                }
                PreprocessStep::Compound => {
                    let (vocab, min_len, min_freq) = self.compound.as_ref().expect("loaded with step");
                    self.split_each(index, step, &current, log, |w| {
                        split_compound(w, vocab, *min_len, *min_freq)
                    })
                }
                PreprocessStep::Preorder => {
                    let (rules, source) = self.preorder.as_ref().expect("loaded with step");
                    let classes = match source {
                        ClassSource::Lexicon(lex) => lex.classify(&current),
                        ClassSource::Annotations(all) => {
                            let c = all.get(index).ok_or_else(|| MorphoError::Annotation {
                                sentence: index,
                                message: "no class annotation line".into(),
                            })?;
                            if c.len() != current.len() {
                                return Err(MorphoError::Annotation {
                                    sentence: index,
                                    message: format!("{} classes for {} tokens", c.len(), current.len()),
                                });
                            }
                            c.clone()
                        }
                    };
                    let reordered = preorder(&current, &classes, rules);
                    if reordered != current {
                        log.push(ChangeRecord {
                            sentence: index,
                            step,
                            before: current.clone(),
                            after: reordered.clone(),
                        });
                    }
                    reordered
                }
            };
        }
        Ok(current)
    }

    fn split_each(
        &self,
        index: usize,
        step: PreprocessStep,
        tokens: &[String],
        log: &mut Vec<ChangeRecord>,
        split: impl Fn(&str) -> SplitDecision,
    ) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        for tok in tokens {
            if tok.starts_with(&self.marker) && tok.len() > self.marker.len() {
                out.push(tok.clone());
                continue;
            }
            let d = split(tok);
            if d.kind != SplitKind::None {
                log.push(ChangeRecord {
                    sentence: index,
                    step,
                    before: vec![tok.clone()],
                    after: d.parts.clone(),
                });
            }
            out.extend(d.parts);
        }
        out
    }
}

/// Runs the preprocessor over every sentence. Returns the transformed
/// sentences and the change log.
pub fn apply_preprocessing(
    sentences: &[Vec<String>],
    pre: &Preprocessor,
) -> Result<(Vec<Vec<String>>, Vec<ChangeRecord>), MorphoError> {
    let mut log = Vec::new();
    let mut out = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        out.push(pre.apply_sentence(i, s, &mut log)?);
    }
    Ok((out, log))
}

//! Order-k n-gram language models with interpolated modified Kneser-Ney
//! smoothing, stored in backoff form (log10, ARPA conventions).
//!
//! Two query backends share one scoring routine: [`NgramModel`] (hash
//! maps, what ARPA files load into) and [`BinaryModel`] (sorted-array
//! trie loaded from the `MSLM1` binary format).

mod arpa;
mod binary;
mod counts;

pub use arpa::{arpa_string, parse_arpa, read_arpa, write_arpa, ArpaError};
pub use binary::{binarize, load_binary, BinaryModel};
pub use counts::{count_ngrams, estimate_mkn, CountTable, DiscountFallback, Discounts};

use thiserror::Error;

use crate::corpus::{BOS, EOS};
use crate::DetMap;

pub const UNK: &str = "<unk>";
pub type WordId = u32;
pub const UNK_ID: WordId = 0;
pub const BOS_ID: WordId = 1;
pub const EOS_ID: WordId = 2;
/// log10 probability ARPA files give `<s>`, which is never predicted.
pub const BOS_LOG10: f64 = -99.0;
/// Score for unknown words when a model has no `<unk>` entry.
pub const MISSING_UNK_LOG10: f64 = -100.0;
pub const DEFAULT_ORDER: usize = 5;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("order must be >= 1")]
    BadOrder,
    #[error("cannot compute perplexity of an empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Arpa(#[from] ArpaError),
    #[error("binary model: {0}")]
    Binary(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Word list with the three special symbols at fixed ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmVocab {
    words: Vec<String>,
    ids: DetMap<String, WordId>,
}

impl Default for LmVocab {
    fn default() -> Self {
        let mut v = LmVocab {
            words: Vec::new(),
            ids: DetMap::default(),
        };
        for w in [UNK, BOS, EOS] {
            v.intern(w);
        }
        v
    }
}

impl LmVocab {
    pub fn intern(&mut self, w: &str) -> WordId {
        if let Some(&id) = self.ids.get(w) {
            return id;
        }
        let id = self.words.len() as WordId;
        self.words.push(w.to_string());
        self.ids.insert(w.to_string(), id);
        id
    }

    /// Id of `w`, or [`UNK_ID`].
    pub fn id(&self, w: &str) -> WordId {
        self.ids.get(w).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, w: &str) -> bool {
        self.ids.contains_key(w)
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgramEntry {
    pub log10_prob: f64,
    pub log10_backoff: f64,
}

/// Up to k-1 most recent words, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct QueryState {
    words: Vec<WordId>,
}

impl QueryState {
    pub fn words(&self) -> &[WordId] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Backoff query interface shared by both storage backends.
pub trait LanguageModel: Sync {
    fn order(&self) -> usize;
    fn vocab(&self) -> &LmVocab;
    /// Stored entry for an exact n-gram.
    fn entry(&self, ngram: &[WordId]) -> Option<NgramEntry>;

    fn word_id(&self, w: &str) -> WordId {
        self.vocab().id(w)
    }

    /// State after `<s>`.
    fn begin_state(&self) -> QueryState {
        let mut s = QueryState::default();
        if self.order() > 1 {
            s.words.push(BOS_ID);
        }
        s
    }

    /// Context-free state, used for out-of-context estimates.
    fn null_state(&self) -> QueryState {
        QueryState::default()
    }

    /// log10 p(word | state) by backoff, plus the successor state.
    fn score(&self, state: &QueryState, word: WordId) -> (f64, QueryState) {
        let ctx = state.words();
        let mut gram: Vec<WordId> = Vec::with_capacity(ctx.len() + 1);
        let mut backoff = 0.0;
        let mut prob = None;
        for start in 0..=ctx.len() {
            gram.clear();
            gram.extend_from_slice(&ctx[start..]);
            gram.push(word);
            if let Some(e) = self.entry(&gram) {
                prob = Some(backoff + e.log10_prob);
                break;
            }
            if start < ctx.len() {
                if let Some(c) = self.entry(&ctx[start..]) {
                    backoff += c.log10_backoff;
                }
            }
        }
        let prob = prob.unwrap_or(backoff + MISSING_UNK_LOG10);

        let keep = self.order().saturating_sub(1);
        let mut next: Vec<WordId> = ctx.iter().copied().chain(std::iter::once(word)).collect();
        if next.len() > keep {
            next.drain(..next.len() - keep);
        }
        while !next.is_empty() && self.entry(&next).is_none() {
            next.remove(0);
        }
        (prob, QueryState { words: next })
    }

    /// log10 probability of a whole sentence including `</s>`.
    fn sentence_log10<S: AsRef<str>>(&self, words: &[S]) -> f64
    where
        Self: Sized,
    {
        let mut state = self.begin_state();
        let mut total = 0.0;
        for w in words {
            let (p, s) = self.score(&state, self.word_id(w.as_ref()));
            total += p;
            state = s;
        }
        total + self.score(&state, EOS_ID).0
    }
}

/// Hash-map backed model.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab: LmVocab,
    /// `tables[n - 1]` holds the n-grams.
    tables: Vec<DetMap<Vec<WordId>, NgramEntry>>,
}

impl NgramModel {
    pub fn new(order: usize, vocab: LmVocab) -> Self {
        NgramModel {
            order,
            vocab,
            tables: vec![DetMap::default(); order],
        }
    }

    pub fn insert(&mut self, ngram: Vec<WordId>, entry: NgramEntry) {
        let n = ngram.len();
        assert!(n >= 1 && n <= self.order, "n-gram order {n} outside 1..={}", self.order);
        self.tables[n - 1].insert(ngram, entry);
    }

    pub fn vocab_mut(&mut self) -> &mut LmVocab {
        &mut self.vocab
    }

    pub fn count(&self, n: usize) -> usize {
        self.tables[n - 1].len()
    }

    /// Entries of order `n` sorted by their word strings.
    pub fn sorted_entries(&self, n: usize) -> Vec<(Vec<&str>, &Vec<WordId>, NgramEntry)> {
        let mut out: Vec<_> = self.tables[n - 1]
            .iter()
            .map(|(g, e)| (g.iter().map(|&w| self.vocab.word(w)).collect::<Vec<_>>(), g, *e))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub(crate) fn table(&self, n: usize) -> &DetMap<Vec<WordId>, NgramEntry> {
        &self.tables[n - 1]
    }
}

impl LanguageModel for NgramModel {
    fn order(&self) -> usize {
        self.order
    }

    fn vocab(&self) -> &LmVocab {
        &self.vocab
    }

    fn entry(&self, ngram: &[WordId]) -> Option<NgramEntry> {
        if ngram.is_empty() || ngram.len() > self.order {
            return None;
        }
        self.tables[ngram.len() - 1].get(ngram).copied()
    }
}

/// Words the model can predict: everything but `<s>`, plus `<unk>`.
pub fn predictable_words<M: LanguageModel>(model: &M) -> Vec<WordId> {
    (0..model.vocab().len() as WordId).filter(|&w| w != BOS_ID).collect()
}

/// 10^(-average log10 probability per token), counting `</s>` per sentence.
pub fn perplexity<M: LanguageModel, S: AsRef<str>>(model: &M, sentences: &[Vec<S>]) -> Result<f64, LmError> {
    if sentences.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for s in sentences {
        total += model.sentence_log10(s);
        tokens += s.len() + 1;
    }
    Ok(10f64.powf(-total / tokens as f64))
}

/// Counting plus estimation in one call.
pub fn train<I, S>(lines: I, order: usize) -> Result<NgramModel, LmError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let counts = count_ngrams(lines, order)?;
    Ok(estimate_mkn(&counts).0)
}

#[cfg(test)]
mod tests;

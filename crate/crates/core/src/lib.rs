//! A compact phrase-based statistical machine translation toolkit.
//!
//! The crate covers the whole training and translation pipeline:
//! corpus handling, source-side morphological preprocessing, IBM Model 1
//! word alignment with symmetrization, phrase extraction and scoring,
//! modified Kneser-Ney language models (ARPA and binary), a stack decoder,
//! unsupervised transliteration of out-of-vocabulary words, and the
//! BLEU/NIST/TER metrics used to compare systems.

pub mod align;
pub mod corpus;
pub mod decoder;
pub mod fixture;
pub mod kv;
pub mod lm;
pub mod metrics;
pub mod morpho;
pub mod phrase;
pub mod pipeline;
pub mod translit;

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::BuildHasherDefault;

/// Hash map with a fixed hasher so iteration order is reproducible across runs.
pub type DetMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;
/// Hash set counterpart of [`DetMap`].
pub type DetSet<K> = HashSet<K, BuildHasherDefault<DefaultHasher>>;

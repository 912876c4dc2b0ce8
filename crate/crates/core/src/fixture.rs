//! Seeded synthetic language pair for end-to-end runs.
//!
//! The source side is agglutinative: a word is a lowercase stem, optionally
//! followed by one suffix from a 30-entry inventory. Every suffix starts
//! with an uppercase letter, so suffix rules can never fire inside a stem.
//! The target side is written in Greek letters; a stem maps to one target
//! word and a suffix to one trailing function word. Personal names use only
//! the letters `a..t` and are written on the target side through a fixed
//! letter cipher, so unseen names can only be handled by transliteration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_lines, CorpusError};

/// Letters names are drawn from; also the domain of the cipher.
pub const NAME_LETTERS: &str = "abcdefghijklmnopqrst";

pub const SUFFIXES: [&str; 30] = [
    "Ne", "Ko", "Ti", "La", "Ra", "Mu", "Si", "Da", "Pe", "Gu", "Ala", "Ani", "Eko", "Iru", "Ote", "Uma", "Kar",
    "Tal", "Mon", "Sek", "Vin", "Hut", "Bar", "Zel", "Nok", "Wai", "Yum", "Fen", "Jor", "Qis",
];

pub const SUFFIX_MIN_STEM: usize = 3;

const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const GREEK: &str = "αβγδεζηθικλμνξοπρστυφχψω";

/// Greek letter for a name letter; `None` outside `a..t`.
pub fn cipher_char(c: char) -> Option<char> {
    let k = NAME_LETTERS.find(c)?;
    GREEK.chars().nth(k)
}

/// Enciphers a name. Panics on letters outside `a..t`.
pub fn cipher_word(word: &str) -> String {
    word.chars()
        .map(|c| cipher_char(c).unwrap_or_else(|| panic!("{c:?} is not a name letter")))
        .collect()
}

pub fn random_name(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let letters: Vec<char> = NAME_LETTERS.chars().collect();
    (0..rng.gen_range(min..=max))
        .map(|_| *letters.choose(rng).expect("non-empty"))
        .collect()
}

/// `n` (name, enciphered name) pairs.
pub fn cipher_pairs(rng: &mut impl Rng, n: usize) -> Vec<(String, String)> {
    (0..n)
        .map(|_| {
            let w = random_name(rng, 3, 8);
            let c = cipher_word(&w);
            (w, c)
        })
        .collect()
}

/// `n` pairs of a name and the cipher of an unrelated name.
pub fn unrelated_pairs(rng: &mut impl Rng, n: usize) -> Vec<(String, String)> {
    (0..n)
        .map(|_| {
            let w = random_name(rng, 3, 8);
            (w, cipher_word(&random_name(rng, 3, 8)))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    pub stems: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    /// Extra target-side lines for unconstrained language models.
    pub extra_lm_lines: usize,
    pub train_names: usize,
    /// Names that only occur in dev, test and extra LM data.
    pub held_out_names: usize,
    pub suffix_rate: f64,
    pub compound_rate: f64,
    pub name_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 7,
            stems: 300,
            train_pairs: 2000,
            dev_pairs: 200,
            test_pairs: 200,
            extra_lm_lines: 2000,
            train_names: 300,
            held_out_names: 100,
            suffix_rate: 0.7,
            compound_rate: 0.05,
            name_rate: 0.12,
            min_words: 3,
            max_words: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub train: Vec<(String, String)>,
    pub dev: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    pub extra_lm: Vec<String>,
    /// (source stem, target word)
    pub stems: Vec<(String, String)>,
    /// (source suffix, target function word)
    pub suffixes: Vec<(String, String)>,
    pub train_names: Vec<String>,
    pub held_out_names: Vec<String>,
}

/// Where [`Fixture::write`] put things.
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub train_source: PathBuf,
    pub train_target: PathBuf,
    pub dev_source: PathBuf,
    pub dev_target: PathBuf,
    pub test_source: PathBuf,
    pub test_target: PathBuf,
    pub extra_lm: PathBuf,
    pub suffix_rules: PathBuf,
}

fn syllable(rng: &mut impl Rng) -> String {
    let c = *CONSONANTS.choose(rng).expect("non-empty") as char;
    let v = *VOWELS.choose(rng).expect("non-empty") as char;
    format!("{c}{v}")
}

fn greek_word(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let letters: Vec<char> = GREEK.chars().collect();
    (0..rng.gen_range(min..=max))
        .map(|_| *letters.choose(rng).expect("non-empty"))
        .collect()
}

struct Lexicon<'a> {
    fixture: &'a Fixture,
}

impl Lexicon<'_> {
    fn sentence(&self, rng: &mut ChaCha8Rng, spec: &FixtureSpec, names: &[&[String]]) -> (String, String) {
        let f = self.fixture;
        let n = rng.gen_range(spec.min_words..=spec.max_words);
        let mut src = Vec::with_capacity(n);
        let mut tgt = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let r: f64 = rng.gen();
            if r < spec.name_rate {
                let pool = names[rng.gen_range(0..names.len())];
                let name = pool.choose(rng).expect("non-empty name pool");
                src.push(name.clone());
                tgt.push(cipher_word(name));
                continue;
            }
            let (mut word, mut out) = {
                let (s, t) = f.stems.choose(rng).expect("stems");
                (s.clone(), vec![t.clone()])
            };
            if r < spec.name_rate + spec.compound_rate {
                let (s, t) = f.stems.choose(rng).expect("stems");
                word.push_str(s);
                out.push(t.clone());
            }
            if rng.gen::<f64>() < spec.suffix_rate {
                let (s, t) = f.suffixes.choose(rng).expect("suffixes");
                word.push_str(s);
                out.push(t.clone());
            }
            src.push(word);
            tgt.extend(out);
        }
        (src.join(" "), tgt.join(" "))
    }
}

impl Fixture {
    pub fn generate(spec: &FixtureSpec) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut taken = BTreeSet::new();

        let mut stems = Vec::with_capacity(spec.stems);
        let mut targets = BTreeSet::new();
        while stems.len() < spec.stems {
            let k = rng.gen_range(2..=3);
            let s: String = (0..k).map(|_| syllable(&mut rng)).collect();
            let t = greek_word(&mut rng, 3, 7);
            if taken.contains(&s) || targets.contains(&t) {
                continue;
            }
            taken.insert(s.clone());
            targets.insert(t.clone());
            stems.push((s, t));
        }
        let mut suffixes = Vec::with_capacity(SUFFIXES.len());
        for s in SUFFIXES {
            loop {
                let t = greek_word(&mut rng, 2, 2);
                if targets.insert(t.clone()) {
                    suffixes.push((s.to_string(), t));
                    break;
                }
            }
        }
        let mut names = Vec::new();
        while names.len() < spec.train_names + spec.held_out_names {
            let n = random_name(&mut rng, 5, 8);
            // a name must not be readable as a stem or a compound of stems
            if taken.insert(n.clone()) {
                names.push(n);
            }
        }
        let held_out_names = names.split_off(spec.train_names);
        let mut fixture = Fixture {
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
            extra_lm: Vec::new(),
            stems,
            suffixes,
            train_names: names,
            held_out_names,
        };
        let lex = Lexicon { fixture: &fixture };
        let train_pool: &[String] = &fixture.train_names;
        let held: &[String] = &fixture.held_out_names;
        let train: Vec<_> = (0..spec.train_pairs)
            .map(|_| lex.sentence(&mut rng, spec, &[train_pool]))
            .collect();
        let dev: Vec<_> = (0..spec.dev_pairs)
            .map(|_| lex.sentence(&mut rng, spec, &[train_pool, held, held]))
            .collect();
        let test: Vec<_> = (0..spec.test_pairs)
            .map(|_| lex.sentence(&mut rng, spec, &[train_pool, held, held]))
            .collect();
        let extra: Vec<_> = (0..spec.extra_lm_lines)
            .map(|_| lex.sentence(&mut rng, spec, &[train_pool, held]).1)
            .collect();
        fixture.train = train;
        fixture.dev = dev;
        fixture.test = test;
        fixture.extra_lm = extra;
        fixture
    }

    /// `suffix<TAB>min_stem_len` lines.
    pub fn suffix_rules_text(&self) -> String {
        let mut out = String::from("# synthetic agglutinative suffixes\n");
        for (s, _) in &self.suffixes {
            out.push_str(&format!("{s}\t{SUFFIX_MIN_STEM}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<FixturePaths, CorpusError> {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let p = |name: &str| dir.join(name);
        let paths = FixturePaths {
            dir: dir.to_path_buf(),
            train_source: p("train.src"),
            train_target: p("train.tgt"),
            dev_source: p("dev.src"),
            dev_target: p("dev.tgt"),
            test_source: p("test.src"),
            test_target: p("test.tgt"),
            extra_lm: p("extra-lm.tgt"),
            suffix_rules: p("suffixes.tsv"),
        };
        for (pairs, s, t) in [
            (&self.train, &paths.train_source, &paths.train_target),
            (&self.dev, &paths.dev_source, &paths.dev_target),
            (&self.test, &paths.test_source, &paths.test_target),
        ] {
            let (src, tgt): (Vec<&str>, Vec<&str>) = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).unzip();
            write_lines(s, &src)?;
            write_lines(t, &tgt)?;
        }
        write_lines(&paths.extra_lm, &self.extra_lm)?;
        std::fs::write(&paths.suffix_rules, self.suffix_rules_text()).map_err(|source| CorpusError::Io {
            path: paths.suffix_rules.display().to_string(),
            source,
        })?;
        Ok(paths)
    }
}

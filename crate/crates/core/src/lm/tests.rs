use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_corpus(seed: u64, lines: usize, vocab: usize, max_len: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lines)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len)
                // skewed so that count-of-counts are non-degenerate
                .map(|_| format!("w{}", rng.gen_range(0..vocab).min(rng.gen_range(0..vocab))))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

fn padded(line: &str) -> Vec<String> {
    std::iter::once(BOS.to_string())
        .chain(line.split_whitespace().map(str::to_string))
        .chain(std::iter::once(EOS.to_string()))
        .collect()
}

type StrCounts = Vec<HashMap<Vec<String>, u64>>;

fn naive_raw(lines: &[String], order: usize) -> StrCounts {
    let mut out = vec![HashMap::new(); order];
    for l in lines {
        let p = padded(l);
        for n in 1..=order {
            for i in 0..p.len().saturating_sub(n - 1) {
                *out[n - 1].entry(p[i..i + n].to_vec()).or_insert(0) += 1;
            }
        }
    }
    out
}

/// Interpolated modified Kneser-Ney computed straight from the definition,
/// with no backoff representation involved.
struct ReferenceKn {
    order: usize,
    counts: StrCounts,
    discounts: Vec<Discounts>,
    events: usize,
}

impl ReferenceKn {
    fn new(lines: &[String], order: usize) -> Self {
        let raw = naive_raw(lines, order);
        let mut counts = raw.clone();
        for n in 1..order {
            for (g, c) in counts[n - 1].iter_mut() {
                if g[0] != BOS {
                    *c = raw[n].keys().filter(|k| k[1..] == g[..]).count() as u64;
                }
            }
        }
        let discounts = (0..order)
            .map(|n| {
                let mut coc = [0u64; 4];
                for (g, &c) in &counts[n] {
                    if !(n == 0 && g[0] == BOS) && (1..=4).contains(&c) {
                        coc[c as usize - 1] += 1;
                    }
                }
                Discounts::from_count_of_counts(coc)
            })
            .collect();
        let mut words: std::collections::HashSet<&str> =
            lines.iter().flat_map(|l| l.split_whitespace()).collect();
        words.insert(EOS);
        words.insert(UNK);
        let events = words.len();
        ReferenceKn {
            order,
            counts,
            discounts,
            events,
        }
    }

    fn prob(&self, history: &[String], w: &str) -> f64 {
        let h = &history[history.len().saturating_sub(self.order - 1)..];
        self.interp(h, w)
    }

    fn interp(&self, h: &[String], w: &str) -> f64 {
        let n = h.len() + 1;
        let lower = if h.is_empty() {
            1.0 / self.events as f64
        } else {
            self.interp(&h[1..], w)
        };
        let table = &self.counts[n - 1];
        let mut total = 0u64;
        let mut mass = 0.0;
        let mut own = 0u64;
        let d = &self.discounts[n - 1];
        for (g, &c) in table {
            if g[..n - 1] != *h || (n == 1 && g[0] == BOS) {
                continue;
            }
            total += c;
            mass += d.for_count(c);
            if g[n - 1] == w {
                own = c;
            }
        }
        if total == 0 {
            return lower;
        }
        (own as f64 - d.for_count(own)) / total as f64 + mass / total as f64 * lower
    }

    fn sentence_log10(&self, line: &str, known: &LmVocab) -> f64 {
        let mut history = vec![BOS.to_string()];
        let mut total = 0.0;
        for w in line.split_whitespace().chain(std::iter::once(EOS)) {
            let w = if known.contains(w) { w } else { UNK };
            total += self.prob(&history, w).log10();
            history.push(w.to_string());
        }
        total
    }
}

fn toy_model(order: usize) -> (Vec<String>, NgramModel) {
    let lines = random_corpus(7, 300, 12, 8);
    let model = train(&lines, order).unwrap();
    (lines, model)
}

#[test]
fn counts_pad_sentences() {
    let c = count_ngrams(["a b", "a b"], 2).unwrap();
    assert_eq!(c.raw_count(&["a", "b"]), 2);
    assert_eq!(c.raw_count(&["b", "</s>"]), 2);
    assert_eq!(c.raw_count(&["<s>", "a"]), 2);
}

#[test]
fn empty_corpus_gives_empty_tables() {
    let c = count_ngrams(Vec::<String>::new(), 3).unwrap();
    assert_eq!(c.distinct_ngrams(), 0);
    assert!(matches!(count_ngrams(["a"], 0), Err(LmError::BadOrder)));
}

#[test]
fn counts_match_naive_recount() {
    let lines = random_corpus(1, 1000, 30, 12);
    let c = count_ngrams(&lines, 4).unwrap();
    let naive = naive_raw(&lines, 4);
    for n in 0..4 {
        assert_eq!(c.raw[n].len(), naive[n].len(), "order {}", n + 1);
        for (g, &count) in &naive[n] {
            let words: Vec<&str> = g.iter().map(String::as_str).collect();
            assert_eq!(c.raw_count(&words), count, "{g:?}");
        }
    }
}

#[test]
fn repeated_lines_do_not_grow_tables() {
    let base = random_corpus(3, 200, 20, 10);
    let once = count_ngrams(&base, 5).unwrap();
    let repeated: Vec<&String> = base.iter().cycle().take(base.len() * 20).collect();
    let many = count_ngrams(repeated, 5).unwrap();
    assert_eq!(once.distinct_ngrams(), many.distinct_ngrams());
    assert_eq!(once.vocab.len(), many.vocab.len());
}

#[test]
fn discounts_from_hand_counted_bigrams() {
    // Bigram counts: (<s> a)=4 (a </s>)=4 (<s> b)=3 (b </s>)=3
    // (<s> c)=2 (c </s>)=2 (<s> d)=1 (d </s>)=1, so n1..n4 = 2,2,2,2.
    let mut lines = Vec::new();
    for (w, k) in [("a", 4), ("b", 3), ("c", 2), ("d", 1)] {
        lines.extend(std::iter::repeat(w).take(k));
    }
    let c = count_ngrams(&lines, 2).unwrap();
    assert_eq!(c.count_of_counts[1], [2, 2, 2, 2]);
    let (_, discounts) = estimate_mkn(&c);
    let y = 2.0 / (2.0 + 2.0 * 2.0);
    let want = [1.0 - 2.0 * y * 2.0 / 2.0, 2.0 - 3.0 * y * 2.0 / 2.0, 3.0 - 4.0 * y * 2.0 / 2.0];
    assert_eq!(discounts[1].fallback, DiscountFallback::None);
    for i in 0..3 {
        assert!((discounts[1].d[i] - want[i]).abs() < 1e-12);
    }
    // Continuation counts: a..d follow only <s>; </s> follows four words.
    // n2 = 0, so the single discount n1 / (n1 + 2 n2) = 1 is used.
    assert_eq!(c.count_of_counts[0], [4, 0, 0, 1]);
    assert_eq!(discounts[0].fallback, DiscountFallback::SingleKneserNey);
    assert_eq!(discounts[0].d, [1.0; 3]);
}

#[test]
fn degenerate_statistics_fall_back() {
    let d = Discounts::from_count_of_counts([0, 0, 0, 0]);
    assert_eq!(d.fallback, DiscountFallback::Absolute);
    assert_eq!(d.d, [0.5; 3]);
    let d = Discounts::from_count_of_counts([3, 1, 0, 0]);
    assert_eq!(d.fallback, DiscountFallback::SingleKneserNey);
    assert!((d.d[0] - 0.6).abs() < 1e-12);
    // training on a single word must not fail
    let m = train(["a"], 3).unwrap();
    assert!(m.sentence_log10(&["a"]).is_finite());
}

fn assert_normalized<M: LanguageModel>(model: &M, state: &QueryState) {
    let sum: f64 = predictable_words(model)
        .into_iter()
        .map(|w| 10f64.powf(model.score(state, w).0))
        .sum();
    assert!((sum - 1.0).abs() < 1e-6, "state {state:?} sums to {sum}");
}

#[test]
fn distributions_sum_to_one_on_random_contexts() {
    let (lines, model) = toy_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let line = &lines[rng.gen_range(0..lines.len())];
        let words: Vec<&str> = line.split_whitespace().collect();
        let stop = rng.gen_range(0..=words.len());
        let mut state = model.begin_state();
        for w in &words[..stop] {
            state = model.score(&state, model.word_id(w)).1;
        }
        assert!(state.len() <= 4);
        assert_normalized(&model, &state);
    }
    assert_normalized(&model, &model.null_state());
}

#[test]
fn chain_scoring_matches_reference_recursion() {
    let lines = random_corpus(5, 120, 8, 7);
    for order in [1, 2, 3, 4] {
        let model = train(&lines, order).unwrap();
        let reference = ReferenceKn::new(&lines, order);
        let mut probes: Vec<String> = lines[..20].to_vec();
        probes.push("w1 zz w2 w3 qq".into());
        probes.extend(random_corpus(9, 20, 9, 9));
        for line in &probes {
            let words: Vec<&str> = line.split_whitespace().collect();
            let got = model.sentence_log10(&words);
            let want = reference.sentence_log10(line, model.vocab());
            assert!((got - want).abs() < 1e-9, "order {order} {line:?}: {got} vs {want}");
        }
    }
}

#[test]
fn unknown_word_gets_interpolation_mass() {
    let (_, model) = toy_model(3);
    let (p, state) = model.score(&model.null_state(), model.word_id("never-seen"));
    assert!(p.is_finite() && p < 0.0);
    assert!(state.is_empty() || state.words() == [UNK_ID]);
}

#[test]
fn arpa_round_trip() {
    let (_, model) = toy_model(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.arpa");
    write_arpa(&model, &path).unwrap();
    let back = read_arpa(&path).unwrap();
    for n in 1..=5 {
        assert_eq!(back.count(n), model.count(n));
        for (words, _, e) in model.sorted_entries(n) {
            let ids: Vec<WordId> = words.iter().map(|w| back.word_id(w)).collect();
            let got = back.entry(&ids).unwrap();
            assert!((got.log10_prob - e.log10_prob).abs() < 1e-4);
            assert!((got.log10_backoff - e.log10_backoff).abs() < 1e-4);
        }
    }
}

#[test]
fn arpa_count_mismatch_names_section() {
    let text = "\\data\\\nngram 1=3\nngram 2=5\n\n\\1-grams:\n-1\t<s>\t-0.5\n-0.5\ta\t-0.3\n-0.5\t</s>\n\n\\2-grams:\n-0.2\t<s> a\n-0.2\ta </s>\n-0.2\ta a\n-0.2\t<s> </s>\n\n\\end\\\n";
    let err = parse_arpa(text).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, ArpaError::CountMismatch { order: 2, declared: 5, found: 4, .. }), "{msg}");
    assert!(msg.contains("\\2-grams:") && msg.starts_with("line 16"), "{msg}");
}

#[test]
fn arpa_structural_errors() {
    assert!(matches!(parse_arpa("ngram 1=1\n"), Err(ArpaError::MissingData { line: 1 })));
    let out_of_order = "\\data\\\nngram 1=1\nngram 2=0\n\n\\2-grams:\n\n\\1-grams:\n-1\ta\n\\end\\\n";
    assert!(matches!(
        parse_arpa(out_of_order),
        Err(ArpaError::SectionOrder { line: 5, expected: 1, found: 2 })
    ));
    let unterminated = "\\data\\\nngram 1=1\n\n\\1-grams:\n-1\ta\n";
    assert!(matches!(parse_arpa(unterminated), Err(ArpaError::MissingEnd { .. })));
}

#[test]
fn hand_written_unigram_arpa_returns_listed_values() {
    let text = "\\data\\\nngram 1=3\n\n\\1-grams:\n-1.25\t<unk>\n-0.5\tcat\n-0.75\t</s>\n\n\\end\\\n";
    let m = parse_arpa(text).unwrap();
    let s = m.null_state();
    assert_eq!(m.score(&s, m.word_id("cat")).0, -0.5);
    assert_eq!(m.score(&s, EOS_ID).0, -0.75);
    assert_eq!(m.score(&s, m.word_id("dog")).0, -1.25);
}

#[test]
fn perplexity_of_half_probability_model_is_two() {
    let half = 0.5f64.log10();
    let text = format!("\\data\\\nngram 1=3\n\n\\1-grams:\n-99\t<s>\n{half}\ta\n{half}\t</s>\n\n\\end\\\n");
    let m = parse_arpa(&text).unwrap();
    let ppl = perplexity(&m, &[vec!["a"]]).unwrap();
    assert!((ppl - 2.0).abs() < 1e-12);
    assert!(matches!(perplexity(&m, &Vec::<Vec<&str>>::new()), Err(LmError::EmptyCorpus)));
}

fn mle_bigram(lines: &[String]) -> NgramModel {
    let c = count_ngrams(lines, 2).unwrap();
    let mut m = NgramModel::new(2, c.vocab.clone());
    let total: u64 = c.raw[0].iter().filter(|(g, _)| g[0] != BOS_ID).map(|(_, &n)| n).sum();
    for (g, &n) in &c.raw[0] {
        let p = if g[0] == BOS_ID { BOS_LOG10 } else { (n as f64 / total as f64).log10() };
        m.insert(g.clone(), NgramEntry { log10_prob: p, log10_backoff: 0.0 });
    }
    for (g, &n) in &c.raw[1] {
        let ctx = c.raw[0][&g[..1]];
        m.insert(g.clone(), NgramEntry { log10_prob: (n as f64 / ctx as f64).log10(), log10_backoff: 0.0 });
    }
    m
}

#[test]
fn perplexity_orderings() {
    let lines = random_corpus(21, 200, 15, 9);
    let sentences: Vec<Vec<&str>> = lines.iter().map(|l| l.split_whitespace().collect()).collect();
    let kn = train(&lines, 2).unwrap();
    let kn_ppl = perplexity(&kn, &sentences).unwrap();
    let mle_ppl = perplexity(&mle_bigram(&lines), &sentences).unwrap();
    assert!(mle_ppl <= kn_ppl, "mle {mle_ppl} kn {kn_ppl}");
    let uniform_ppl = predictable_words(&kn).len() as f64;
    assert!(kn_ppl <= uniform_ppl, "kn {kn_ppl} uniform {uniform_ppl}");

    let doubled: Vec<Vec<&str>> = sentences.iter().chain(sentences.iter()).cloned().collect();
    let again = perplexity(&kn, &doubled).unwrap();
    assert!((again - kn_ppl).abs() < 1e-9 * kn_ppl);
}

#[test]
fn binary_matches_arpa_backend_exactly() {
    let (_, model) = toy_model(5);
    let dir = tempfile::tempdir().unwrap();
    let arpa = dir.path().join("toy.arpa");
    let bin = dir.path().join("toy.bin");
    write_arpa(&model, &arpa).unwrap();
    let text_model = read_arpa(&arpa).unwrap();
    binarize(&text_model, &bin).unwrap();
    let binary = load_binary(&bin).unwrap();
    assert_eq!(binary.vocab(), text_model.vocab());

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let v = text_model.vocab().len() as WordId;
    let mut state = text_model.begin_state();
    for i in 0..10_000 {
        if i % 12 == 0 {
            state = if rng.gen_bool(0.5) { text_model.begin_state() } else { text_model.null_state() };
        }
        let w = rng.gen_range(0..v);
        let a = text_model.score(&state, w);
        let b = binary.score(&state, w);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        state = a.1;
    }
    let arpa_len = std::fs::metadata(&arpa).unwrap().len();
    let bin_len = std::fs::metadata(&bin).unwrap().len();
    assert!(bin_len < arpa_len, "binary {bin_len} >= arpa {arpa_len}");
}

#[test]
fn corrupted_binary_is_rejected() {
    let (_, model) = toy_model(3);
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("toy.bin");
    binarize(&model, &bin).unwrap();
    let bytes = std::fs::read(&bin).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(BinaryModel::from_bytes(&bad_magic), Err(LmError::Binary(m)) if m.contains("magic")));

    let mut bad_header = bytes.clone();
    bad_header[5] ^= 0x01;
    assert!(BinaryModel::from_bytes(&bad_header).is_err());

    assert!(BinaryModel::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(BinaryModel::from_bytes(&bytes).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn discounts_stay_within_bounds(n1 in 0u64..500, n2 in 0u64..300, n3 in 0u64..200, n4 in 0u64..100) {
        let d = Discounts::from_count_of_counts([n1, n2, n3, n4]);
        for (i, &v) in d.d.iter().enumerate() {
            prop_assert!(v > 0.0 && v <= (i + 1) as f64, "{:?}", d);
        }
        if d.fallback == DiscountFallback::None {
            prop_assert!(d.d[0] <= 1.0 && d.d[1] <= 2.0 && d.d[2] <= 3.0);
        }
    }

    #[test]
    fn small_models_are_normalized(seed in 0u64..1000, order in 1usize..5) {
        let lines = random_corpus(seed, 15, 6, 6);
        let model = train(&lines, order).unwrap();
        let mut state = model.begin_state();
        assert_normalized(&model, &state);
        for w in lines[0].split_whitespace() {
            state = model.score(&state, model.word_id(w)).1;
            prop_assert!(state.len() < order.max(1));
            assert_normalized(&model, &state);
        }
    }
}

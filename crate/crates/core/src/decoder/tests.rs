use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lm::{self, NgramModel};

fn s(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn toy_lm() -> NgramModel {
    lm::train(["x y z", "x z y", "y x", "z z x y", "q x y z", "x q"], 3).unwrap()
}

fn flat() -> Weights {
    Weights::new(vec![1.0; NUM_FEATURES]).unwrap()
}

fn random_table(rng: &mut ChaCha8Rng, source_vocab: &[&str], target_vocab: &[&str], entries: usize) -> PhraseTable {
    let mut t = PhraseTable::new();
    for _ in 0..entries {
        let sl = rng.gen_range(1..=2);
        let tl = rng.gen_range(1..=2);
        let src = (0..sl).map(|_| source_vocab[rng.gen_range(0..source_vocab.len())].to_string()).collect();
        let tgt = (0..tl).map(|_| target_vocab[rng.gen_range(0..target_vocab.len())].to_string()).collect();
        let f = [
            -rng.gen_range(0.0..3.0),
            -rng.gen_range(0.0..3.0),
            -rng.gen_range(0.0..3.0),
            -rng.gen_range(0.0..3.0),
        ];
        t.insert(src, tgt, f);
    }
    t
}

/// Best weighted score over every segmentation and ordering, each full
/// derivation scored from scratch.
fn brute_force_best(sentence: &[String], table: &PhraseTable, lm: &NgramModel, weights: &Weights) -> f64 {
    let n = sentence.len();
    let mut options: Vec<(usize, usize, Vec<String>, [f64; 4], bool)> = Vec::new();
    for i in 0..n {
        for j in i + 1..=n {
            for e in table.lookup(&sentence[i..j]) {
                options.push((i, j, e.target.clone(), e.features, false));
            }
        }
        if table.lookup(&sentence[i..i + 1]).is_empty() {
            options.push((i, i + 1, vec![sentence[i].clone()], [0.0; 4], true));
        }
    }
    fn walk(
        n: usize,
        options: &[(usize, usize, Vec<String>, [f64; 4], bool)],
        used: &mut Vec<bool>,
        path: &mut Vec<usize>,
        out: &mut dyn FnMut(&[usize]),
    ) {
        if used.iter().all(|&u| u) {
            out(path);
            return;
        }
        for (k, o) in options.iter().enumerate() {
            if (o.0..o.1).any(|i| used[i]) {
                continue;
            }
            for i in o.0..o.1 {
                used[i] = true;
            }
            path.push(k);
            walk(n, options, used, path, out);
            path.pop();
            for i in o.0..o.1 {
                used[i] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut used = vec![false; n];
    walk(n, &options, &mut used, &mut Vec::new(), &mut |path| {
        let mut f = [0.0; NUM_FEATURES];
        let mut output: Vec<String> = Vec::new();
        let mut last_end = 0usize;
        for &k in path {
            let (i, j, ref tgt, tm, oov) = options[k];
            for x in 0..4 {
                f[x] += tm[x];
            }
            f[DISTORTION] -= i.abs_diff(last_end) as f64;
            last_end = j;
            if oov {
                f[OOV] -= 1.0;
            }
            output.extend(tgt.iter().cloned());
        }
        f[WORD_PENALTY] = -(output.len() as f64);
        f[LM] = lm.sentence_log10(&output) * std::f64::consts::LN_10;
        best = best.max(weights.dot(&f));
    });
    best
}

#[test]
fn single_entry_covering_source() {
    let mut t = PhraseTable::new();
    t.insert(s("a b c"), s("x y z"), [-0.1; 4]);
    let config = DecoderConfig {
        weights: flat(),
        distortion_limit: Some(0),
        ..DecoderConfig::default()
    };
    let out = decode(&s("a b c"), &t, &toy_lm(), &config, &Passthrough).unwrap();
    assert_eq!(out.best().unwrap().tokens, s("x y z"));
}

#[test]
fn two_token_source_matches_enumeration() {
    let mut t = PhraseTable::new();
    t.insert(s("a"), s("x"), [-0.5, -0.7, -1.0, -0.2]);
    t.insert(s("a"), s("z"), [-0.3, -1.7, -0.4, -0.9]);
    t.insert(s("b"), s("y"), [-0.2, -0.1, -0.6, -0.3]);
    t.insert(s("a b"), s("y x"), [-1.5, -0.4, -0.8, -0.6]);
    let lm = toy_lm();
    let w = Weights::new(vec![0.3, 0.2, 0.25, 0.1, 0.6, -0.1, 0.4, 1.0, 0.5]).unwrap();
    let out = decode(&s("a b"), &t, &lm, &DecoderConfig::exhaustive(w.clone()), &Passthrough).unwrap();
    let want = brute_force_best(&s("a b"), &t, &lm, &w);
    assert!((out.best().unwrap().total - want).abs() < 1e-9);
    // outputs: x y, y x (both orders of x/y), z y, y z, and the phrase y x
    let outputs: std::collections::BTreeSet<String> = out.entries.iter().map(|e| e.text()).collect();
    let expect: std::collections::BTreeSet<String> =
        ["x y", "y x", "z y", "y z"].iter().map(|x| x.to_string()).collect();
    assert_eq!(outputs, expect);
}

#[test]
fn unknown_word_passes_through() {
    let mut t = PhraseTable::new();
    t.insert(s("a"), s("x"), [-0.1; 4]);
    let out = decode(&s("a zebra"), &t, &toy_lm(), &DecoderConfig::default(), &Passthrough).unwrap();
    let best = out.best().unwrap();
    assert!(best.tokens.contains(&"zebra".to_string()));
    assert_eq!(best.features[OOV], -1.0);
    let slots = best.oov_slots();
    assert_eq!(slots.len(), 1);
    assert_eq!(best.tokens[slots[0].0], "zebra");
    assert_eq!(slots[0].1, 1);
}

struct Fixed;

impl OovHandler for Fixed {
    fn candidates(&self, word: &str) -> Vec<(String, f64)> {
        if word == "zebra" {
            vec![("y".into(), -0.1), ("q".into(), -2.5)]
        } else {
            Vec::new()
        }
    }
}

#[test]
fn handler_candidates_compete_with_passthrough() {
    let mut t = PhraseTable::new();
    t.insert(s("a"), s("x"), [-0.1; 4]);
    let out = decode(&s("a zebra"), &t, &toy_lm(), &DecoderConfig::exhaustive(Weights::default()), &Fixed).unwrap();
    let texts: Vec<String> = out.entries.iter().map(|e| e.text()).collect();
    assert!(texts.contains(&"x y".to_string()) && texts.contains(&"x zebra".to_string()));
    let cand = out.entries.iter().find(|e| e.text() == "x y").unwrap();
    assert_eq!((cand.features[OOV], cand.features[TRANSLIT]), (0.0, -0.1));
    assert_eq!(cand.segments[1].kind, OptionKind::Candidate);
}

#[test]
fn empty_input_gives_empty_translation() {
    let out = decode(&[], &PhraseTable::new(), &toy_lm(), &DecoderConfig::default(), &Passthrough).unwrap();
    assert_eq!(out.len(), 1);
    assert!(out.best().unwrap().tokens.is_empty());
}

#[test]
fn exact_search_on_random_small_inputs() {
    let lm = toy_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for round in 0..40 {
        let table = random_table(&mut rng, &["a", "b", "c"], &["x", "y", "z", "q"], 12);
        let len = rng.gen_range(1..=4);
        let sentence: Vec<String> = (0..len).map(|_| ["a", "b", "c", "d"][rng.gen_range(0..4)].to_string()).collect();
        let w = Weights::new((0..NUM_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let want = brute_force_best(&sentence, &table, &lm, &w);
        for recombine in [true, false] {
            let config = DecoderConfig {
                recombine,
                ..DecoderConfig::exhaustive(w.clone())
            };
            let out = decode(&sentence, &table, &lm, &config, &Passthrough).unwrap();
            let got = out.best().unwrap().total;
            assert!((got - want).abs() < 1e-9, "round {round} recombine {recombine}: {got} vs {want}");
        }
    }
}

#[test]
fn zero_distortion_is_monotone() {
    let lm = toy_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..30 {
        let table = random_table(&mut rng, &["a", "b", "c"], &["x", "y", "z"], 15);
        let len = rng.gen_range(1..=6);
        let sentence: Vec<String> = (0..len).map(|_| ["a", "b", "c"][rng.gen_range(0..3)].to_string()).collect();
        let config = DecoderConfig {
            distortion_limit: Some(0),
            ..DecoderConfig::default()
        };
        let out = decode(&sentence, &table, &lm, &config, &Passthrough).unwrap();
        assert!(!out.is_empty());
        for e in &out.entries {
            let mut pos = 0;
            for seg in &e.segments {
                assert_eq!(seg.source.0, pos);
                pos = seg.source.1;
            }
            assert_eq!(pos, len);
            assert_eq!(e.features[DISTORTION], 0.0);
        }
    }
}

#[test]
fn nbest_is_sorted_unique_and_consistent() {
    let lm = toy_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = random_table(&mut rng, &["a", "b", "c"], &["x", "y", "z", "q"], 25);
    let config = DecoderConfig {
        nbest_size: 50,
        ..DecoderConfig::default()
    };
    let out = decode(&s("a b c a b"), &table, &lm, &config, &Passthrough).unwrap();
    assert!(out.len() > 1);
    let mut seen = std::collections::HashSet::new();
    for pair in out.entries.windows(2) {
        assert!(pair[0].total >= pair[1].total);
    }
    for e in &out.entries {
        assert!(seen.insert(e.text()));
        assert!((e.total - config.weights.dot(&e.features)).abs() < 1e-9);
        let covered: usize = e.segments.iter().map(|g| g.source.1 - g.source.0).sum();
        assert_eq!(covered, 5);
    }
}

fn candidate(tokens: &str, features: Features, weights: &Weights) -> Translation {
    Translation {
        tokens: s(tokens),
        features,
        total: weights.dot(&features),
        segments: Vec::new(),
    }
}

fn five_candidates(rng: &mut ChaCha8Rng, weights: &Weights) -> NBestList {
    let mut list = NBestList {
        entries: ["p", "q r", "s t u", "v", "w x"]
            .iter()
            .map(|t| {
                let mut f = [0.0; NUM_FEATURES];
                for v in f.iter_mut() {
                    *v = -rng.gen_range(0.0..5.0);
                }
                candidate(t, f, weights)
            })
            .collect(),
    };
    list.normalize(usize::MAX);
    list
}

#[test]
fn rescoring_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = Weights::default();
    let list = five_candidates(&mut rng, &w);
    assert_eq!(rescore_nbest(&list, &w).unwrap(), list);

    let mut lm_only = Weights::new(vec![0.0; NUM_FEATURES]).unwrap();
    lm_only.set(LM, 1.0);
    let r = rescore_nbest(&list, &lm_only).unwrap();
    let best_lm = list.entries.iter().map(|e| e.features[LM]).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best().unwrap().features[LM], best_lm);

    for _ in 0..20 {
        let w = Weights::new((0..NUM_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let r = rescore_nbest(&list, &w).unwrap();
        let mut want: Vec<(f64, String)> = list
            .entries
            .iter()
            .map(|e| (e.features.iter().zip(w.values()).map(|(f, x)| f * x).sum(), e.text()))
            .collect();
        want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<String> = r.entries.iter().map(|e| e.text()).collect();
        assert_eq!(got, want.into_iter().map(|x| x.1).collect::<Vec<_>>());
    }
}

#[test]
fn rescoring_rejects_wrong_length() {
    let bad = Weights { values: vec![1.0; 3] };
    assert!(matches!(
        rescore_nbest(&NBestList::default(), &bad),
        Err(DecoderError::WeightCount { expected: 9, found: 3 })
    ));
}

#[test]
fn weights_and_nbest_files_round_trip() {
    let w = Weights::new((0..NUM_FEATURES).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();
    assert_eq!(Weights::parse(&w.to_text()).unwrap(), w);
    assert!(matches!(Weights::parse("lm = 1\nbogus = 2\n"), Err(DecoderError::Parse { line: 2, .. })));
    assert_eq!(Weights::parse("lm = 0.7\n").unwrap().by_name("lm"), Some(0.7));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lists = vec![five_candidates(&mut rng, &w), NBestList::default(), five_candidates(&mut rng, &w)];
    let back = parse_nbest(&nbest_to_text(&lists)).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back[1].len(), 0);
    for (a, b) in lists.iter().zip(&back) {
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!((&x.tokens, x.features, x.total), (&y.tokens, y.features, y.total));
        }
    }
}

#[test]
fn tuning_with_zero_rounds_is_identity() {
    let config = DecoderConfig::default();
    let calls = std::sync::atomic::AtomicUsize::new(0);
    let (out, _) = tune_weights(&[s("a")], &[s("x")], &config, 0, |_, _| {
        calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(Vec::new())
    })
    .unwrap();
    assert_eq!(out, config);
    assert_eq!(calls.into_inner(), 0);
    assert!(matches!(
        tune_weights(&[], &[], &config, 3, |_, _| Ok(Vec::new())),
        Err(DecoderError::EmptyDev)
    ));
}

/// Three sentences; the reference-equal candidate has the best `lm` and the
/// worst `tm_pts` value, so it wins only when lm outweighs tm_pts.
fn separable_pool() -> (Vec<Vec<String>>, Vec<NBestList>) {
    let refs = vec![s("a b c d e"), s("f g h i j"), s("k l m n o")];
    let zero = Weights::new(vec![0.0; NUM_FEATURES]).unwrap();
    let lists = refs
        .iter()
        .map(|r| {
            let mut good = [0.0; NUM_FEATURES];
            good[0] = -3.0;
            good[LM] = -1.0;
            let mut bad = [0.0; NUM_FEATURES];
            bad[0] = -1.0;
            bad[LM] = -3.0;
            let wrong = format!("{} zz", r[..4].join(" "));
            NBestList {
                entries: vec![candidate(&r.join(" "), good, &zero), candidate(&wrong, bad, &zero)],
            }
        })
        .collect();
    (refs, lists)
}

#[test]
fn line_search_reaches_perfect_pool_bleu() {
    let (refs, lists) = separable_pool();
    let mut pool = TuningPool::new(&refs);
    pool.merge(&lists);
    let mut start = Weights::new(vec![0.0; NUM_FEATURES]).unwrap();
    start.set(0, 1.0);
    start.set(LM, 0.2);
    assert!(pool.bleu(&start) < 100.0);
    // the grid contains a setting with BLEU 100
    let grid_best = weight_grid()
        .into_iter()
        .map(|v| {
            let mut w = start.clone();
            w.set(LM, v);
            pool.bleu(&w)
        })
        .fold(0.0, f64::max);
    assert_eq!(grid_best, 100.0);
    let tuned = line_search(&pool, &start);
    assert_eq!(pool.bleu(&tuned), 100.0);

    let config = DecoderConfig {
        weights: start,
        ..DecoderConfig::default()
    };
    let (out, report) = tune_weights(&refs, &refs, &config, 2, |_, _| Ok(lists.clone())).unwrap();
    assert_eq!(pool.bleu(&out.weights), 100.0);
    assert_eq!(report.final_pool_bleu[report.chosen], 100.0);
}

#[test]
fn tuning_never_loses_to_initial_weights() {
    let lm = toy_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let table = random_table(&mut rng, &["a", "b", "c"], &["x", "y", "z", "q"], 20);
        let dev: Vec<Vec<String>> = (0..4)
            .map(|_| (0..rng.gen_range(1..5)).map(|_| ["a", "b", "c"][rng.gen_range(0..3)].to_string()).collect())
            .collect();
        let refs: Vec<Vec<String>> = dev
            .iter()
            .map(|d| d.iter().map(|_| ["x", "y", "z", "q"][rng.gen_range(0..4)].to_string()).collect())
            .collect();
        let config = DecoderConfig {
            nbest_size: 20,
            ..DecoderConfig::default()
        };
        let decode_all = |d: &[Vec<String>], c: &DecoderConfig| decode_corpus(d, &table, &lm, c, &Passthrough);
        let (tuned, report) = tune_weights(&dev, &refs, &config, 3, decode_all).unwrap();
        assert!(report.final_pool_bleu[report.chosen] >= report.final_pool_bleu[0]);
        assert_eq!(tuned.weights, report.history[report.chosen]);
    }
}

#[test]
fn decoding_is_deterministic() {
    let lm = toy_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let table = random_table(&mut rng, &["a", "b", "c"], &["x", "y", "z", "q"], 30);
    let sentences: Vec<Vec<String>> = (0..20)
        .map(|_| (0..rng.gen_range(1..8)).map(|_| ["a", "b", "c"][rng.gen_range(0..3)].to_string()).collect())
        .collect();
    let config = DecoderConfig {
        beam_size: 5,
        ..DecoderConfig::default()
    };
    let a = decode_corpus(&sentences, &table, &lm, &config, &Passthrough).unwrap();
    let b = decode_corpus(&sentences, &table, &lm, &config, &Passthrough).unwrap();
    assert_eq!(nbest_to_text(&a), nbest_to_text(&b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beam_decoding_covers_every_word(seed in 0u64..10_000, len in 1usize..9, beam in 1usize..6, limit in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random_table(&mut rng, &["a", "b", "c"], &["x", "y", "z"], 12);
        let sentence: Vec<String> = (0..len).map(|_| ["a", "b", "c", "d"][rng.gen_range(0..4)].to_string()).collect();
        let config = DecoderConfig {
            beam_size: beam,
            distortion_limit: Some(limit),
            ..DecoderConfig::default()
        };
        let out = decode(&sentence, &table, &toy_lm(), &config, &Passthrough).unwrap();
        prop_assert!(!out.is_empty());
        for e in &out.entries {
            let mut covered = vec![false; len];
            for seg in &e.segments {
                for c in &mut covered[seg.source.0..seg.source.1] {
                    prop_assert!(!*c);
                    *c = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}

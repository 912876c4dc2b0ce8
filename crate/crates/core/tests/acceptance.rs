//! Acceptance checks. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smt_core::align::{symmetrize, train_model1, AlignmentMatrix, Heuristic, Provenance, NULL_TOKEN};
use smt_core::decoder::{
    decode, DecoderConfig, Passthrough, Weights, DISTORTION, LM, NUM_FEATURES, OOV, WORD_PENALTY,
};
use smt_core::fixture::{cipher_pairs, cipher_word, random_name, unrelated_pairs, Fixture, FixtureSpec};
use smt_core::kv::KvFile;
use smt_core::lm::{
    self, arpa_string, binarize, count_ngrams, estimate_mkn, load_binary, parse_arpa, predictable_words,
    DiscountFallback, LanguageModel, NgramModel, WordId,
};
use smt_core::metrics::{bleu, corpus_ter, nist, BLEU_ORDER, NIST_ORDER, TER_MAX_SHIFT};
use smt_core::phrase::{extract_spans, PhraseTable, SpanPair};
use smt_core::pipeline::{fixture_config_text, grid_configs, run_grid, GridOutcome};
use smt_core::translit::{mine_pairs, transliterate, CharModel, DEFAULT_EM_ROUNDS};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))?;
    Ok(t)
}

fn words(v: &[u32]) -> Vec<String> {
    v.iter().map(|x| format!("w{x}")).collect()
}

// ---------------------------------------------------------------- metrics

fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        m[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = m[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            m[i][j] = sub.min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
        }
    }
    m[a.len()][b.len()]
}

/// Clipped n-gram matches by marking reference positions as used.
fn matched_positions(h: &[String], r: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if h.len() < n {
        return out;
    }
    let mut used = vec![false; (r.len() + 1).saturating_sub(n)];
    for i in 0..=h.len() - n {
        for j in 0..used.len() {
            if !used[j] && r[j..j + n] == h[i..i + n] {
                used[j] = true;
                out.push(h[i..i + n].to_vec());
                break;
            }
        }
    }
    out
}

fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=BLEU_ORDER {
        let total: usize = hyps.iter().map(|h| (h.len() + 1).saturating_sub(n)).sum();
        let matched: usize = hyps.iter().zip(refs).map(|(h, r)| matched_positions(h, r, n).len()).sum();
        if matched == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (log_sum / BLEU_ORDER as f64).exp()
}

fn oracle_nist(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let ref_words: usize = refs.iter().map(Vec::len).sum();
    let count = |g: &[String]| -> usize {
        refs.iter()
            .map(|r| r.windows(g.len()).filter(|w| *w == g).count())
            .sum()
    };
    let mut score = 0.0;
    for n in 1..=NIST_ORDER {
        let total: usize = hyps.iter().map(|h| (h.len() + 1).saturating_sub(n)).sum();
        if total == 0 {
            continue;
        }
        let mut gain = 0.0;
        for (h, r) in hyps.iter().zip(refs) {
            for g in matched_positions(h, r, n) {
                let prefix = if n == 1 { ref_words } else { count(&g[..n - 1]) };
                gain += (prefix as f64 / count(&g) as f64).log2();
            }
        }
        score += gain / total as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let ratio = (c as f64 / ref_words as f64).min(1.0);
    let beta = 0.5f64.ln() / (2.0f64 / 3.0).ln().powi(2);
    let bp = if ratio == 0.0 { 0.0 } else { (beta * ratio.ln().powi(2)).exp() };
    score * bp
}

/// Edits plus shifts, trying every block move each round: moves of at most
/// `TER_MAX_SHIFT` words that put the block where it starts in the
/// reference (or at the end when the reference position lies past it).
fn oracle_ter_edits(hyp: &[String], reference: &[String]) -> usize {
    let mut cur = hyp.to_vec();
    let mut shifts = 0;
    loop {
        let base = levenshtein(&cur, reference);
        if base == 0 {
            return shifts;
        }
        let mut best: Option<(usize, (usize, usize, usize), Vec<String>)> = None;
        for start in 0..cur.len() {
            for len in 1..=TER_MAX_SHIFT.min(cur.len() - start) {
                let block = cur[start..start + len].to_vec();
                let last = cur.len() - len;
                for dest in 0..=last {
                    let lines_up = (0..(reference.len() + 1).saturating_sub(len))
                        .any(|r| reference[r..r + len] == block[..] && (r == dest || (r > last && dest == last)));
                    if !lines_up || dest == start {
                        continue;
                    }
                    let mut rest: Vec<String> = cur[..start].to_vec();
                    rest.extend_from_slice(&cur[start + len..]);
                    let mut moved = rest[..dest].to_vec();
                    moved.extend(block.iter().cloned());
                    moved.extend_from_slice(&rest[dest..]);
                    let d = levenshtein(&moved, reference);
                    if d >= base {
                        continue;
                    }
                    let key = (start, len, dest);
                    let take = match &best {
                        None => true,
                        Some((g, k, _)) => base - d > *g || (base - d == *g && key < *k),
                    };
                    if take {
                        best = Some((base - d, key, moved));
                    }
                }
            }
        }
        match best {
            Some((_, _, moved)) => {
                cur = moved;
                shifts += 1;
            }
            None => return base + shifts,
        }
    }
}

fn oracle_ter(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| oracle_ter_edits(h, r)).sum();
    let len: usize = refs.iter().map(Vec::len).sum();
    100.0 * edits as f64 / len as f64
}

fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let n = rng.gen_range(1..=10);
    let vocab = rng.gen_range(3..8);
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..n {
        let r: Vec<u32> = (0..rng.gen_range(1..=12)).map(|_| rng.gen_range(0..vocab)).collect();
        let mut h = r.clone();
        // perturb: substitutions, deletions, a swap of two halves
        for x in h.iter_mut() {
            if rng.gen_bool(0.25) {
                *x = rng.gen_range(0..vocab);
            }
        }
        if rng.gen_bool(0.3) && !h.is_empty() {
            h.remove(rng.gen_range(0..h.len()));
        }
        if rng.gen_bool(0.3) && h.len() > 2 {
            let k = rng.gen_range(1..h.len());
            h.rotate_left(k);
        }
        h.truncate(12);
        hyps.push(words(&h));
        refs.push(words(&r));
    }
    (hyps, refs)
}

fn criterion_metrics() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let (hyps, refs) = random_corpus(&mut rng);
        let pairs = [
            ("BLEU", bleu(&hyps, &refs, BLEU_ORDER).unwrap(), oracle_bleu(&hyps, &refs)),
            ("NIST", nist(&hyps, &refs, NIST_ORDER).unwrap(), oracle_nist(&hyps, &refs)),
            ("TER", corpus_ter(&hyps, &refs).unwrap(), oracle_ter(&hyps, &refs)),
        ];
        for (name, got, want) in pairs {
            let diff = (got - want).abs();
            worst = worst.max(diff);
            ensure(diff <= 1e-6, || format!("corpus {k} {name}: {got} vs oracle {want}"))?;
        }
    }
    for _ in 0..10 {
        let corpus: Vec<Vec<String>> = (0..rng.gen_range(1..=10))
            .map(|_| words(&(0..rng.gen_range(4..=12)).map(|_| rng.gen_range(0..6)).collect::<Vec<_>>()))
            .collect();
        let b = bleu(&corpus, &corpus, BLEU_ORDER).unwrap();
        let t = corpus_ter(&corpus, &corpus).unwrap();
        ensure(b == 100.0 && t == 0.0, || format!("identity corpus gave BLEU {b} TER {t}"))?;
    }
    let t = within(start, Duration::from_secs(30))?;
    Ok(format!("50 corpora, max |diff| {worst:.1e}, identity exact, {t:.1?}"))
}

// ---------------------------------------------------------------- LM

fn criterion_lm() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let lines: Vec<String> = (0..400)
        .map(|_| {
            let n = rng.gen_range(1..=9);
            (0..n).map(|_| format!("v{}", rng.gen_range(0..14))).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let model = lm::train(&lines, 5).map_err(|e| e.to_string())?;
    let v = model.vocab().len() as WordId;

    // normalization over every predictable word
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut state = if rng.gen_bool(0.8) { model.begin_state() } else { model.null_state() };
        for _ in 0..rng.gen_range(0..=6) {
            state = model.score(&state, rng.gen_range(0..v)).1;
        }
        let sum: f64 = predictable_words(&model)
            .into_iter()
            .map(|w| 10f64.powf(model.score(&state, w).0))
            .sum();
        worst = worst.max((sum - 1.0).abs());
    }
    ensure(worst <= 1e-6, || format!("context distribution off by {worst}"))?;

    // ARPA round trip
    let text = arpa_string(&model);
    let back = parse_arpa(&text).map_err(|e| e.to_string())?;
    for n in 1..=5 {
        ensure(back.count(n) == model.count(n), || format!("order {n} entry count changed"))?;
        for (ws, _, e) in model.sorted_entries(n) {
            let ids: Vec<WordId> = ws.iter().map(|w| back.word_id(w)).collect();
            let got = back.entry(&ids).ok_or_else(|| format!("{ws:?} lost in round trip"))?;
            ensure(
                (got.log10_prob - e.log10_prob).abs() <= 1e-4 && (got.log10_backoff - e.log10_backoff).abs() <= 1e-4,
                || format!("{ws:?} changed in round trip"),
            )?;
        }
    }
    ensure(arpa_string(&back) == text, || "second serialization differs".into())?;

    // binary and ARPA backends
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = dir.path().join("lm.bin");
    binarize(&back, &bin).map_err(|e| e.to_string())?;
    let binary = load_binary(&bin).map_err(|e| e.to_string())?;
    let mut state = back.begin_state();
    for i in 0..10_000 {
        if i % 10 == 0 {
            state = if rng.gen_bool(0.5) { back.begin_state() } else { back.null_state() };
        }
        let w = rng.gen_range(0..v);
        let a = back.score(&state, w);
        let b = binary.score(&state, w);
        ensure(a.0.to_bits() == b.0.to_bits() && a.1 == b.1, || format!("query {i} differs: {a:?} vs {b:?}"))?;
        state = a.1;
    }

    // discounts on a hand-counted fixture. Each line is one word, so every
    // word w repeated k times yields bigrams (<s> w) and (w </s>) with
    // count k. Counts a:4 b:3 c:2 d:2 e:1 f:1 g:1 h:1 give
    // n1 = 8, n2 = 4, n3 = 2, n4 = 2 at the bigram level.
    let mut fixture = Vec::new();
    for (w, k) in [("a", 4), ("b", 3), ("c", 2), ("d", 2), ("e", 1), ("f", 1), ("g", 1), ("h", 1)] {
        fixture.extend(std::iter::repeat(w).take(k));
    }
    let counts = count_ngrams(&fixture, 2).map_err(|e| e.to_string())?;
    ensure(counts.count_of_counts[1] == [8, 4, 2, 2], || {
        format!("bigram count-of-counts {:?}", counts.count_of_counts[1])
    })?;
    let (_, discounts) = estimate_mkn(&counts);
    // Y = 8 / (8 + 2*4) = 0.5
    let want = [1.0 - 2.0 * 0.5 * 4.0 / 8.0, 2.0 - 3.0 * 0.5 * 2.0 / 4.0, 3.0 - 4.0 * 0.5 * 2.0 / 2.0];
    ensure(want == [0.5, 1.25, 1.0], || "hand arithmetic".into())?;
    ensure(
        discounts[1].fallback == DiscountFallback::None
            && discounts[1].d.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12),
        || format!("bigram discounts {:?}", discounts[1]),
    )?;
    // continuation counts: a..h each follow only <s>, </s> follows 8 words
    ensure(counts.count_of_counts[0] == [8, 0, 0, 0], || {
        format!("unigram count-of-counts {:?}", counts.count_of_counts[0])
    })?;
    ensure(
        discounts[0].fallback == DiscountFallback::SingleKneserNey && discounts[0].d == [1.0; 3],
        || format!("unigram discounts {:?}", discounts[0]),
    )?;
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("max |sum-1| {worst:.1e}, ARPA stable, 10K binary queries identical, discounts exact, {t:.1?}"))
}

// ---------------------------------------------------------------- alignment

/// Grow-diag-final written directly over boolean matrices.
fn reference_gdf(n: usize, m: usize, fwd: &BTreeSet<(usize, usize)>, rev: &BTreeSet<(usize, usize)>) -> BTreeSet<(usize, usize)> {
    let mut a = vec![vec![false; m]; n];
    let in_union = |i: usize, j: usize| fwd.contains(&(i, j)) || rev.contains(&(i, j));
    for i in 0..n {
        for j in 0..m {
            a[i][j] = fwd.contains(&(i, j)) && rev.contains(&(i, j));
        }
    }
    let src_aligned = |a: &Vec<Vec<bool>>, i: usize| a[i].iter().any(|&x| x);
    let tgt_aligned = |a: &Vec<Vec<bool>>, j: usize| a.iter().any(|row| row[j]);
    let neighbours: [(isize, isize); 8] = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..m {
                if !a[i][j] {
                    continue;
                }
                for (di, dj) in neighbours {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= n as isize || nj >= m as isize {
                        continue;
                    }
                    let (ni, nj) = (ni as usize, nj as usize);
                    if a[ni][nj] || !in_union(ni, nj) {
                        continue;
                    }
                    if !src_aligned(&a, ni) || !tgt_aligned(&a, nj) {
                        a[ni][nj] = true;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    for directional in [fwd, rev] {
        for i in 0..n {
            for j in 0..m {
                if directional.contains(&(i, j)) && !a[i][j] && (!src_aligned(&a, i) || !tgt_aligned(&a, j)) {
                    a[i][j] = true;
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in 0..m {
            if a[i][j] {
                out.insert((i, j));
            }
        }
    }
    out
}

fn criterion_alignment() -> Check {
    let fixture = Fixture::generate(&FixtureSpec {
        train_pairs: 500,
        ..FixtureSpec::default()
    });
    let bitext: Vec<(Vec<String>, Vec<String>)> = fixture
        .train
        .iter()
        .map(|(s, t)| {
            (
                s.split(' ').map(str::to_string).collect(),
                t.split(' ').map(str::to_string).collect(),
            )
        })
        .collect();
    let (table, report) = train_model1(&bitext, 10, true).map_err(|e| e.to_string())?;
    let ll = &report.log_likelihoods;
    ensure(ll.len() == 11, || format!("{} log-likelihood entries", ll.len()))?;
    for (k, w) in ll.windows(2).enumerate() {
        ensure(w[1] >= w[0], || format!("log-likelihood fell at iteration {}: {} -> {}", k + 1, w[0], w[1]))?;
    }
    let targets = table.target_vocab();
    let mut sources: BTreeSet<&str> = bitext.iter().flat_map(|(s, _)| s.iter().map(String::as_str)).collect();
    sources.insert(NULL_TOKEN);
    let mut worst: f64 = 0.0;
    for s in &sources {
        let sum: f64 = (0..targets.len() as u32).map(|f| table.prob(s, targets.word(f))).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("t-table row off by {worst}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for k in 0..30 {
        let mut random_links = || -> BTreeSet<(usize, usize)> {
            (0..4)
                .flat_map(|i| (0..4).map(move |j| (i, j)))
                .filter(|_| rng.gen_bool(0.3))
                .collect()
        };
        let fwd = random_links();
        let rev = random_links();
        let f = AlignmentMatrix::new(fwd.clone(), 4, 4, Provenance::Forward).map_err(|e| e.to_string())?;
        let r = AlignmentMatrix::new(rev.clone(), 4, 4, Provenance::Reverse).map_err(|e| e.to_string())?;
        let got = symmetrize(&f, &r, Heuristic::GrowDiagFinal).map_err(|e| e.to_string())?.links;
        let want = reference_gdf(4, 4, &fwd, &rev);
        ensure(got == want, || format!("instance {k}: {got:?} vs reference {want:?}"))?;
        let inter: BTreeSet<_> = fwd.intersection(&rev).copied().collect();
        let union: BTreeSet<_> = fwd.union(&rev).copied().collect();
        ensure(inter.is_subset(&got) && got.is_subset(&union), || format!("instance {k} outside bounds"))?;
    }
    Ok(format!(
        "LL non-decreasing over 10 iterations, max row error {worst:.1e}, 30/30 grow-diag-final instances match"
    ))
}

// ---------------------------------------------------------------- phrases

fn brute_force_spans(links: &BTreeSet<(usize, usize)>, n: usize, m: usize, max_len: usize) -> Vec<SpanPair> {
    let mut out = Vec::new();
    for s1 in 0..n {
        for s2 in s1 + 1..=n {
            for t1 in 0..m {
                for t2 in t1 + 1..=m {
                    if s2 - s1 > max_len || t2 - t1 > max_len {
                        continue;
                    }
                    let inside = |&(s, t): &(usize, usize)| (s1..s2).contains(&s) && (t1..t2).contains(&t);
                    let crossing = |&(s, t): &(usize, usize)| (s1..s2).contains(&s) != (t1..t2).contains(&t);
                    if links.iter().any(inside) && !links.iter().any(crossing) {
                        out.push(SpanPair {
                            source: (s1, s2),
                            target: (t1, t2),
                        });
                    }
                }
            }
        }
    }
    out.sort();
    out
}

fn criterion_phrases() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut total = 0;
    for k in 0..100 {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        let density = rng.gen_range(0.1..0.5);
        let links: BTreeSet<(usize, usize)> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|_| rng.gen_bool(density))
            .collect();
        let a = AlignmentMatrix::new(links.clone(), n, m, Provenance::Symmetrized).map_err(|e| e.to_string())?;
        for max_len in [7, 3] {
            let got = extract_spans(&a, max_len);
            let want = brute_force_spans(&links, n, m, max_len);
            ensure(got == want, || format!("pair {k} max_len {max_len}: {got:?} vs {want:?}"))?;
            total += want.len();
        }
    }
    Ok(format!("100 pairs, {total} span pairs, identical to brute force"))
}

// ---------------------------------------------------------------- decoder

type Opt = (usize, usize, Vec<String>, [f64; 4], bool);

fn derivations(options: &[Opt], n: usize, monotone: bool) -> Vec<Vec<usize>> {
    fn walk(options: &[Opt], used: &mut [bool], path: &mut Vec<usize>, next: usize, monotone: bool, out: &mut Vec<Vec<usize>>) {
        if used.iter().all(|&u| u) {
            out.push(path.clone());
            return;
        }
        for (k, o) in options.iter().enumerate() {
            if (o.0..o.1).any(|i| used[i]) || (monotone && o.0 != next) {
                continue;
            }
            used[o.0..o.1].iter_mut().for_each(|u| *u = true);
            path.push(k);
            walk(options, used, path, o.1, monotone, out);
            path.pop();
            used[o.0..o.1].iter_mut().for_each(|u| *u = false);
        }
    }
    let mut out = Vec::new();
    walk(options, &mut vec![false; n], &mut Vec::new(), 0, monotone, &mut out);
    out
}

fn derivation_score(path: &[usize], options: &[Opt], model: &NgramModel, w: &Weights) -> f64 {
    let mut f = [0.0; NUM_FEATURES];
    let mut output = Vec::new();
    let mut last_end = 0usize;
    for &k in path {
        let (i, j, tgt, tm, oov) = &options[k];
        for x in 0..4 {
            f[x] += tm[x];
        }
        f[DISTORTION] -= i.abs_diff(last_end) as f64;
        last_end = *j;
        if *oov {
            f[OOV] -= 1.0;
        }
        output.extend(tgt.iter().cloned());
    }
    f[WORD_PENALTY] = -(output.len() as f64);
    f[LM] = model.sentence_log10(&output) * std::f64::consts::LN_10;
    w.dot(&f)
}

fn criterion_decoder() -> Check {
    let start = Instant::now();
    let model = lm::train(["x y z", "x z y", "y x", "z z x y", "q x y z", "x q", "y y q"], 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let src_vocab = ["a", "b", "c", "d"];
    let tgt_vocab = ["x", "y", "z", "q"];
    for k in 0..50 {
        let mut table = PhraseTable::new();
        for _ in 0..rng.gen_range(1..=8) {
            let src: Vec<String> = (0..rng.gen_range(1..=2)).map(|_| src_vocab[rng.gen_range(0..3)].to_string()).collect();
            let tgt: Vec<String> = (0..rng.gen_range(1..=2)).map(|_| tgt_vocab[rng.gen_range(0..4)].to_string()).collect();
            table.insert(src, tgt, [0; 4].map(|_| -rng.gen_range(0.0..3.0)));
        }
        let sentence: Vec<String> = (0..rng.gen_range(1..=4)).map(|_| src_vocab[rng.gen_range(0..4)].to_string()).collect();
        let w = Weights::new((0..NUM_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect()).map_err(|e| e.to_string())?;

        let n = sentence.len();
        let mut options: Vec<Opt> = Vec::new();
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
        for monotone in [false, true] {
            let want = derivations(&options, n, monotone)
                .iter()
                .map(|p| derivation_score(p, &options, &model, &w))
                .fold(f64::NEG_INFINITY, f64::max);
            let config = DecoderConfig {
                distortion_limit: monotone.then_some(0),
                ..DecoderConfig::exhaustive(w.clone())
            };
            let out = decode(&sentence, &table, &model, &config, &Passthrough).map_err(|e| e.to_string())?;
            let got = out.best().ok_or("empty n-best")?.total;
            ensure((got - want).abs() < 1e-9, || {
                format!("instance {k} monotone={monotone}: decoder {got} vs exhaustive {want}")
            })?;
            if monotone {
                for t in &out.entries {
                    let mut next = 0;
                    for seg in &t.segments {
                        ensure(seg.source.0 == next, || format!("instance {k}: non-monotone {:?}", t.segments))?;
                        next = seg.source.1;
                    }
                }
            }
        }
    }
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("50/50 instances exact, distortion 0 monotone, {t:.1?}"))
}

// ---------------------------------------------------------------- transliteration

fn criterion_translit() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let good = cipher_pairs(&mut rng, 400);
    let bad = unrelated_pairs(&mut rng, 400);
    let all: Vec<(String, String)> = good.iter().chain(&bad).cloned().collect();
    let mined = mine_pairs(&all, DEFAULT_EM_ROUNDS).map_err(|e| e.to_string())?;
    let accepted = mined.pairs[..400].iter().filter(|p| p.posterior >= 0.5).count();
    let rejected = mined.pairs[400..].iter().filter(|p| p.posterior < 0.5).count();
    let model = CharModel::from_mined(&mined).map_err(|e| e.to_string())?;
    let seen: BTreeSet<&String> = good.iter().map(|p| &p.0).collect();
    let mut tests = Vec::new();
    while tests.len() < 200 {
        let w = random_name(&mut rng, 3, 9);
        if !seen.contains(&w) {
            tests.push(w);
        }
    }
    let correct = tests
        .iter()
        .filter(|w| transliterate(w, &model, 1).map(|c| c[0].text == cipher_word(w)).unwrap_or(false))
        .count();
    let summary = format!("accepted {accepted}/400 true, rejected {rejected}/400 random, top-1 {correct}/200");
    ensure(accepted * 10 >= 400 * 9, || summary.clone())?;
    ensure(rejected * 10 >= 400 * 9, || summary.clone())?;
    ensure(correct * 100 >= 200 * 95, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- end to end

fn run_fixture_grid(dir: &Path) -> Result<GridOutcome, String> {
    let fixture = Fixture::generate(&FixtureSpec::default());
    let paths = fixture.write(&dir.join("data")).map_err(|e| e.to_string())?;
    let text = fixture_config_text(&paths, &dir.join("work"), 7);
    let configs = grid_configs(&KvFile::parse(&text).map_err(|e| e.to_string())?, dir).map_err(|e| e.to_string())?;
    let out = run_grid(&configs).map_err(|e| e.to_string())?;
    ensure(out.failures.is_empty(), || format!("failed runs: {:?}", out.failures))?;
    Ok(out)
}

fn criterion_grid(dir: &Path) -> Result<(String, GridOutcome), String> {
    let start = Instant::now();
    let out = run_fixture_grid(dir)?;
    let tsv = out.report_tsv();
    let mut lines = tsv.lines();
    ensure(lines.next() == Some("pair\tsystem\tBLEU\tNIST\tTER"), || format!("header of {tsv:?}"))?;
    let rows: HashMap<String, f64> = out.runs.iter().map(|r| (r.evaluation.system.clone(), r.evaluation.bleu)).collect();
    let untranslated: HashMap<String, usize> =
        out.runs.iter().map(|r| (r.evaluation.system.clone(), r.untranslated)).collect();
    ensure(rows.len() == 3 && lines.count() == 3, || format!("rows {rows:?}"))?;
    let (b1, b2, b3) = (rows["S1"], rows["S2"], rows["S3"]);
    let (u2, u3) = (untranslated["S2"], untranslated["S3"]);
    let summary = format!("BLEU S1 {b1:.2} S2 {b2:.2} S3 {b3:.2}; untranslated S2 {u2} S3 {u3}");
    ensure(b2 >= b1 + 1.0, || summary.clone())?;
    ensure(u3 < u2, || summary.clone())?;
    let t = within(start, Duration::from_secs(300)).map_err(|e| format!("{summary}; {e}"))?;
    Ok((format!("{summary}, {t:.1?}"), out))
}

fn criterion_determinism(first: &GridOutcome, dir: &Path) -> Check {
    let second = run_fixture_grid(dir)?;
    ensure(first.report_tsv() == second.report_tsv(), || "reports differ".into())?;
    let mut files = 0;
    for (a, b) in first.runs.iter().zip(&second.runs) {
        for ((name, pa), (_, pb)) in a.files().into_iter().zip(b.files()) {
            let (x, y) = (std::fs::read(pa).map_err(|e| e.to_string())?, std::fs::read(pb).map_err(|e| e.to_string())?);
            ensure(x == y, || format!("{} {name} differs", a.evaluation.system))?;
            files += 1;
        }
    }
    Ok(format!("report and {files} model/output files byte-identical"))
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut grid = None;
    let mut results: Vec<(&str, Check)> = vec![
        ("metric oracles", guarded(criterion_metrics)),
        ("LM soundness", guarded(criterion_lm)),
        ("alignment", guarded(criterion_alignment)),
        ("phrase extraction", guarded(criterion_phrases)),
        ("decoder exactness", guarded(criterion_decoder)),
        ("transliteration", guarded(criterion_translit)),
    ];
    results.push((
        "system grid",
        guarded(|| {
            let (msg, out) = criterion_grid(&dir.path().join("a"))?;
            grid = Some(out);
            Ok(msg)
        }),
    ));
    results.push((
        "determinism",
        match &grid {
            Some(first) => guarded(|| criterion_determinism(first, &dir.path().join("b"))),
            None => Err("needs a successful system grid run".into()),
        },
    ));

    let mut stdout = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (i, (name, r)) in results.iter().enumerate() {
        let line = match r {
            Ok(msg) => format!("criterion {} {name}: PASS ({msg})", i + 1),
            Err(msg) => {
                failed.push(i + 1);
                format!("criterion {} {name}: FAIL ({msg})", i + 1)
            }
        };
        writeln!(stdout, "{line}").unwrap();
    }
    drop(stdout);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

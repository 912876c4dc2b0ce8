use std::path::PathBuf;

use smt_core::morpho::{load_preorder_rules, preorder, separate_suffix, ClassLexicon, SuffixRuleSet, DEFAULT_MARKER};

fn rules_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../rules")
}

fn split(rules: &SuffixRuleSet, word: &str) -> Vec<String> {
    separate_suffix(word, rules).parts
}

#[test]
fn hindi_suffixes() {
    let rules = SuffixRuleSet::load(&rules_dir().join("hindi-suffixes.tsv"), "hi", DEFAULT_MARKER).unwrap();
    assert_eq!(split(&rules, "लड़कियों"), ["लड़क", "+ियों"]);
    assert_eq!(split(&rules, "किताबें"), ["किताब", "+ें"]);
    // stem too short for the rule
    assert_eq!(split(&rules, "ना"), ["ना"]);
}

#[test]
fn marathi_suffixes() {
    let rules = SuffixRuleSet::load(&rules_dir().join("marathi-suffixes.tsv"), "mr", DEFAULT_MARKER).unwrap();
    assert_eq!(split(&rules, "घरामध्ये"), ["घरा", "+मध्ये"]);
    assert_eq!(split(&rules, "मुलांना"), ["मुल", "+ांना"]);
    assert_eq!(split(&rules, "शाळेत"), ["शाळे", "+त"]);
}

#[test]
fn preorder_sample() {
    let rules = load_preorder_rules(&rules_dir().join("sov-preorder.rules")).unwrap();
    let lex = ClassLexicon::load(&rules_dir().join("sov-classes.tsv"), "N").unwrap();
    let s: Vec<String> = "john eats the apple in the garden".split(' ').map(str::to_string).collect();
    let out = preorder(&s, &lex.classify(&s), &rules);
    assert_eq!(out.join(" "), "john the apple eats the garden in");
}

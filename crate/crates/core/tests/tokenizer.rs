use std::collections::BTreeMap;

use defgen_core::tokenizer::{train_bpe, Symbol, SubwordTokenizer, Token, SEP_ID};
use defgen_core::Lang;
use proptest::prelude::*;

fn fixture_tokenizer() -> SubwordTokenizer {
    SubwordTokenizer::from_file_string(include_str!("fixtures/mini.tok")).unwrap()
}

#[test]
fn mixed_script_lines_match_golden_rule_walk() {
    let tok = fixture_tokenizer();
    let lines = include_str!("fixtures/mini.golden.txt").lines();
    let golden = include_str!("fixtures/mini.golden").lines();
    for (line, ids) in lines.zip(golden) {
        let expected: Vec<u32> = ids.split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(tok.encode(line), expected, "line {line:?}");
    }
}

#[test]
fn fixture_file_round_trips() {
    let text = include_str!("fixtures/mini.tok");
    assert_eq!(fixture_tokenizer().to_file_string(), text);
}

#[test]
fn first_merge_is_the_most_frequent_pair() {
    let corpus = ["low low low lower"];
    // Brute force: every adjacent pair of (char, ends-word) symbols, by count,
    // with the lexicographically smallest pair winning ties.
    type Pair = ((String, bool), (String, bool));
    let mut counts: BTreeMap<Pair, usize> = BTreeMap::new();
    for word in corpus[0].split(' ') {
        let chars: Vec<char> = word.chars().collect();
        for i in 0..chars.len() - 1 {
            let a = (chars[i].to_string(), false);
            let b = (chars[i + 1].to_string(), i + 1 == chars.len() - 1);
            *counts.entry((a, b)).or_default() += 1;
        }
    }
    let best_count = *counts.values().max().unwrap();
    let (best, _) = counts.iter().find(|(_, &c)| c == best_count).unwrap();

    let langs = [Lang::en()];
    let base = train_bpe(&corpus, defgen_core::tokenizer::minimum_vocab_size(&corpus, &langs), &langs).unwrap();
    let tok = train_bpe(&corpus, base.vocab_size() + 1, &langs).unwrap();
    assert_eq!(tok.merges().len(), 1);
    let (l, r) = tok.merges()[0];
    let sym = |id| match tok.vocab().token(id) {
        Some(Token::Piece(Symbol { text, end_of_word })) => (text.clone(), *end_of_word),
        other => panic!("not a piece: {other:?}"),
    };
    assert_eq!((sym(l), sym(r)), best.clone());
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop_oneof!["[a-e]{1,5}", "[月亮书河]{1,3}", "[a-c月书]{1,4}"], 1..6).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_inverts_encode(corpus in prop::collection::vec(text(), 1..6), extra in 0usize..30, probe in 0usize..6) {
        let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
        let langs = [Lang::en(), Lang::zh()];
        let min = defgen_core::tokenizer::minimum_vocab_size(&refs, &langs);
        let tok = train_bpe(&refs, min + extra, &langs).unwrap();
        let line = &corpus[probe % corpus.len()];
        let normalized = line.split_whitespace().collect::<Vec<_>>().join(" ");
        prop_assert_eq!(tok.decode(&tok.encode(line)).unwrap(), normalized);
        let again = train_bpe(&refs, min + extra, &langs).unwrap();
        prop_assert_eq!(tok.to_file_string(), again.to_file_string());
    }

    #[test]
    fn input_layout_invariants(word in "[a-e]{1,4}", ctx in text()) {
        let tok = fixture_tokenizer();
        let context = format!("{ctx} {word}");
        let en = tok.build_input_sequence(&word, &context, &Lang::en()).unwrap();
        let zh = tok.build_input_sequence(&word, &context, &Lang::zh()).unwrap();
        prop_assert_eq!(en.token_ids.len(), en.position_ids.len());
        prop_assert_eq!(en.token_ids.len(), en.segment_ids.len());
        prop_assert!(en.position_ids.iter().enumerate().all(|(i, &p)| p as usize == i));
        let steps: Vec<usize> = (1..en.len()).filter(|&i| en.segment_ids[i] != en.segment_ids[i - 1]).collect();
        prop_assert_eq!(steps.len(), 1);
        prop_assert_eq!(en.token_ids[steps[0]], SEP_ID);
        prop_assert!(en.segment_ids.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_ne!(en.token_ids[0], zh.token_ids[0]);
        prop_assert_eq!(&en.token_ids[1..], &zh.token_ids[1..]);
        prop_assert_eq!(&en.segment_ids, &zh.segment_ids);
    }
}

use proptest::prelude::*;
use rag_intrinsics_core::evalkit::{classification_report, ece, jafs_report, recall_at_k, JafsItem};
use rag_intrinsics_core::intrinsics::{rank_pairwise, RerankMethod};
use rag_intrinsics_core::parsing::{
    parse_answerability, parse_certainty, parse_citations, parse_hallucination, parse_preference, parse_relevance,
    parse_rewrite, snap_certainty, AnswerabilityLabel, CertaintyScore, ParseError, Preference, CERTAINTY_LEVELS,
};
use rag_intrinsics_core::segmenter::{split_sentences, strip_tags, tag_documents, tag_response, TagScheme};
use rag_intrinsics_core::Document;

fn piece() -> impl Strategy<Value = String> {
    prop_oneof![
        "[A-Z][a-z]{1,8}".prop_map(String::from),
        "[a-z]{1,8}".prop_map(String::from),
        Just("Dr.".to_string()),
        Just("e.g.".to_string()),
        Just("U.S.".to_string()),
        Just("3.14".to_string()),
        Just("\"Quoted.\"".to_string()),
        Just("(aside)".to_string()),
        Just("wait...".to_string()),
        Just("end.".to_string()),
        Just("Really?!".to_string()),
        Just("café".to_string()),
    ]
}

fn separator() -> impl Strategy<Value = String> {
    prop_oneof![Just(" "), Just("  "), Just("\n"), Just(" \t")].prop_map(String::from)
}

fn prose() -> impl Strategy<Value = String> {
    (separator(), prop::collection::vec((piece(), separator()), 1..20), separator()).prop_map(|(lead, parts, tail)| {
        let mut s = lead;
        for (p, sep) in parts {
            s.push_str(&p);
            s.push_str(&sep);
        }
        s.push_str(&tail);
        s
    })
}

/// Tag numbers in order of appearance.
fn tag_numbers(rendered: &str, letter: char) -> Vec<usize> {
    let open = format!("<{letter}");
    let mut out = Vec::new();
    let mut rest = rendered;
    while let Some(at) = rest.find(&open) {
        rest = &rest[at + open.len()..];
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        if !digits.is_empty() && rest[digits.len()..].starts_with("> ") {
            out.push(digits.parse().unwrap());
        }
    }
    out
}

proptest! {
    #[test]
    fn spans_are_trimmed_ordered_and_cover_text(text in prose()) {
        let spans = split_sentences(&text);
        let mut cursor = 0;
        for (i, s) in spans.iter().enumerate() {
            prop_assert_eq!(s.index, i);
            prop_assert!(s.start >= cursor && s.start < s.end && s.end <= text.len());
            let slice = s.slice(&text);
            prop_assert_eq!(slice.trim(), slice);
            prop_assert!(text[cursor..s.start].trim().is_empty());
            cursor = s.end;
        }
        prop_assert!(text[cursor..].trim().is_empty());
    }

    #[test]
    fn tagging_round_trips(text in prose()) {
        let tagged = tag_response(&text, TagScheme::R).unwrap();
        prop_assert_eq!(strip_tags(&tagged.rendered, TagScheme::R, 0), text);
        prop_assert_eq!(tag_numbers(&tagged.rendered, 'r'), (0..tagged.len()).collect::<Vec<_>>());
    }

    #[test]
    fn context_ids_continue_across_documents(texts in prop::collection::vec(prose(), 1..6)) {
        let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), t.clone())).collect();
        let index = tag_documents(&docs).unwrap();
        let mut next = 0;
        for (doc, tagged) in docs.iter().zip(&index.documents) {
            prop_assert_eq!(tagged.tagged.first_id, next);
            let ids = tag_numbers(&tagged.tagged.rendered, 'c');
            prop_assert_eq!(ids, (next..next + tagged.tagged.len()).collect::<Vec<_>>());
            prop_assert_eq!(strip_tags(&tagged.tagged.rendered, TagScheme::C, next), doc.text.clone());
            next += tagged.tagged.len();
        }
        prop_assert_eq!(index.len(), next);
        for id in 0..next {
            let (ordinal, span) = index.entry(id).unwrap();
            prop_assert!(span.end <= docs[ordinal].text.len());
        }
    }

    #[test]
    fn parsers_never_panic(text in any::<String>(), bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        for input in [text.as_str(), &String::from_utf8_lossy(&bytes)] {
            let _ = parse_rewrite(input, "q");
            let _ = parse_relevance(input);
            let _ = parse_answerability(input);
            let _ = parse_certainty(input);
            let _ = parse_hallucination(input, 3);
            let _ = parse_citations(input, 3, 5);
            let _ = parse_preference(input);
        }
    }

    #[test]
    fn hallucination_requires_every_id(n in 1usize..8, missing in any::<prop::sample::Index>()) {
        let gap = missing.index(n);
        let items: Vec<String> = (0..n)
            .filter(|&i| i != gap)
            .map(|i| format!(r#"{{"i": {i}, "f": "faithful", "r": ""}}"#))
            .collect();
        let text = format!("[{}]", items.join(", "));
        prop_assert_eq!(parse_hallucination(&text, n), Err(ParseError::MissingSentenceIds(vec![gap])));
    }

    #[test]
    fn citations_reject_out_of_range(n_ctx in 1usize..20, extra in 0usize..5) {
        let bad = n_ctx + extra;
        let text = format!(r#"[{{"r": 0, "c": [{bad}]}}]"#);
        let is_range_error = matches!(parse_citations(&text, 1, n_ctx), Err(ParseError::IdOutOfRange { .. }));
        prop_assert!(is_range_error);
    }

    #[test]
    fn certainty_snaps_onto_grid(v in 0u64..1000) {
        let snapped = snap_certainty(v);
        prop_assert!(CERTAINTY_LEVELS.contains(&snapped));
        let best = CERTAINTY_LEVELS.iter().map(|&l| (l as i64 - v as i64).abs()).min().unwrap();
        prop_assert_eq!((snapped as i64 - v as i64).abs(), best);
    }

    #[test]
    fn round_robin_follows_strength(strengths in prop::collection::hash_set(0u32..1000, 2..10)) {
        let strengths: Vec<u32> = strengths.into_iter().collect();
        let n = strengths.len();
        let r = rank_pairwise(n, |pairs| {
            pairs.iter().map(|&(a, b)| Ok(if strengths[a] > strengths[b] { Preference::A } else { Preference::B })).collect()
        });
        let mut expected: Vec<usize> = (0..n).collect();
        expected.sort_by(|&x, &y| strengths[y].cmp(&strengths[x]));
        prop_assert_eq!(r.order, expected);
        prop_assert_eq!(r.comparisons_used, n * (n - 1) / 2);
        prop_assert_eq!(r.method, RerankMethod::RoundRobin);
    }

    #[test]
    fn tournament_keeps_every_passage(n in 10usize..40, seed in any::<u64>()) {
        let strength = |i: usize| (i as u64).wrapping_mul(seed | 1).rotate_left(17);
        let r = rank_pairwise(n, |pairs| {
            pairs.iter().map(|&(a, b)| Ok(if strength(a) >= strength(b) { Preference::A } else { Preference::B })).collect()
        });
        let mut all: Vec<usize> = r.order.iter().chain(&r.dropped).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(r.comparisons_used < n);
        let mut alive: Vec<usize> = (0..n).collect();
        while alive.len() > 1 {
            alive.truncate(alive.len() / 2 * 2);
            alive = alive.chunks(2).map(|p| if strength(p[0]) >= strength(p[1]) { p[0] } else { p[1] }).collect();
        }
        prop_assert_eq!(r.order[0], alive[0]);
        let strongest = (0..n).max_by_key(|&i| (strength(i), std::cmp::Reverse(i))).unwrap();
        if !r.dropped.contains(&strongest) {
            prop_assert_eq!(r.order[0], strongest);
        }
    }

    #[test]
    fn recall_is_monotone_in_k(ranked in prop::collection::vec(0u8..30, 0..30), gold in prop::collection::btree_set(0u8..30, 1..8), k in 0usize..30) {
        let a = recall_at_k(&ranked, &gold, k).unwrap();
        let b = recall_at_k(&ranked, &gold, k + 1).unwrap();
        prop_assert!(a <= b && (0.0..=1.0).contains(&a));
    }

    #[test]
    fn classification_matches_brute_force(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..200)) {
        let (preds, golds): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let report = classification_report(&preds, &golds).unwrap();
        for class in &report.classes {
            let l = class.label;
            let tp = pairs.iter().filter(|&&(p, g)| p == l && g == l).count();
            let fp = pairs.iter().filter(|&&(p, g)| p == l && g != l).count();
            let fn_ = pairs.iter().filter(|&&(p, g)| p != l && g == l).count();
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            prop_assert_eq!(class.precision, precision);
            prop_assert_eq!(class.recall, recall);
            prop_assert_eq!(class.support, tp + fn_);
        }
        let f1s: Vec<f64> = report.classes.iter().map(|c| c.f1).collect();
        let (lo, hi) = f1s.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &f| (lo.min(f), hi.max(f)));
        prop_assert!(report.weighted_f1 >= lo - 1e-12 && report.weighted_f1 <= hi + 1e-12);
    }

    #[test]
    fn single_bin_ece_is_the_gap(level in prop::sample::select(CERTAINTY_LEVELS.to_vec()), correct in prop::collection::vec(any::<bool>(), 1..50)) {
        let scores = vec![CertaintyScore::from_level(level).unwrap(); correct.len()];
        let accuracy = correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64;
        let report = ece(&scores, &correct).unwrap();
        prop_assert!((report.ece - (accuracy - level as f64 / 100.0).abs()).abs() < 1e-12);
    }

    #[test]
    fn always_abstaining_scores_the_unanswerable_fraction(truths in prop::collection::vec(any::<bool>(), 1..100)) {
        let items: Vec<JafsItem> = truths
            .iter()
            .map(|&answerable| JafsItem {
                abstained: true,
                truth: if answerable { AnswerabilityLabel::Answerable } else { AnswerabilityLabel::Unanswerable },
                faithfulness: None,
            })
            .collect();
        let fraction = truths.iter().filter(|a| !**a).count() as f64 / truths.len() as f64;
        prop_assert!((jafs_report(&items).unwrap().mean - fraction).abs() < 1e-12);
    }
}

#[test]
fn abbreviation_and_decimal_cases() {
    let text = "Dr. Smith paid 3.14 dollars. See Fig. 2 for details. Done!";
    let sentences: Vec<&str> = split_sentences(text).iter().map(|s| s.slice(text)).collect();
    assert_eq!(sentences, ["Dr. Smith paid 3.14 dollars.", "See Fig. 2 for details.", "Done!"]);
}

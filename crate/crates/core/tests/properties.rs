use std::collections::HashSet;

use proptest::prelude::*;

use fever_core::aggregation::{aggregate_concatenated, build_features, AggregationMode, ScoredEvidence};
use fever_core::corpus::{Corpus, Label, SentenceRef};
use fever_core::fuzzy::{edit_distance, edit_distance_within, extract_query_terms, TitleDictionary};
use fever_core::gbdt::{assign_folds, softmax, GbdtConfig, GbdtModel};
use fever_core::retrieval::{reretrieve_documents, DocCandidateSet, DocSource};
use fever_core::selection::{relevance_from_probs, sort_candidates, EvidenceCandidate, Provenance, ScorerMode, SoftmaxTriple};
use fever_core::tfidf::{TfIdfConfig, TfIdfIndex};

fn triple() -> impl Strategy<Value = SoftmaxTriple> {
    (0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b)| {
        let b = b * (1.0 - a);
        SoftmaxTriple::new(a, b, 1.0 - a - b).unwrap()
    })
}

proptest! {
    #[test]
    fn top_k_is_sorted_positive_and_bounded(
        docs in prop::collection::vec("[a-cA-C ]{0,20}", 1..20),
        query in "[a-c ]{0,10}",
        k in 0usize..25,
        cfg_idx in 0usize..32,
    ) {
        let cfg = TfIdfConfig::grid()[cfg_idx];
        let texts: Vec<(String, String)> = docs.iter().enumerate().map(|(i, d)| (i.to_string(), d.clone())).collect();
        let index = TfIdfIndex::build(&texts, cfg).unwrap();
        let hits = index.top_k(&query, k);
        prop_assert!(hits.len() <= k.min(docs.len()));
        prop_assert!(hits.iter().all(|(_, s)| *s > 0.0));
        prop_assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
        let keys: HashSet<&String> = hits.iter().map(|(key, _)| key).collect();
        prop_assert_eq!(keys.len(), hits.len());
        let restored = TfIdfIndex::from_bytes(&index.to_bytes()).unwrap();
        prop_assert_eq!(restored.top_k(&query, k), hits);
    }

    #[test]
    fn bounded_distance_agrees_with_full(a in "[ab_é]{0,10}", b in "[ab_é]{0,10}", max in 0usize..4) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(edit_distance_within(&a, &b, max), (d <= max).then_some(d));
        prop_assert!(d <= a.chars().count().max(b.chars().count()));
    }

    #[test]
    fn exact_title_is_always_found(titles in prop::collection::vec("[A-Za-z_]{1,8}", 1..50), pick in any::<prop::sample::Index>()) {
        let dict = TitleDictionary::from_page_ids(titles.clone());
        let t = pick.get(&titles);
        let hits = dict.lookup(t, 0);
        prop_assert!(hits.iter().any(|(p, d)| p == t && *d == 0));
    }

    #[test]
    fn query_terms_are_unique_ignoring_case(text in "[A-Za-z' ,.]{0,60}") {
        let terms = extract_query_terms(&text);
        let lower: HashSet<String> = terms.terms().iter().map(|t| t.to_lowercase()).collect();
        prop_assert_eq!(lower.len(), terms.terms().len());
        prop_assert!(terms.terms().iter().all(|t| !t.trim().is_empty()));
    }

    #[test]
    fn candidate_sort_is_total_and_stable_under_shuffle(
        scores in prop::collection::vec((0.0f64..1.0, 0usize..3, 0usize..5), 0..20),
        seed in any::<u64>(),
    ) {
        let mut seen = HashSet::new();
        let cands: Vec<EvidenceCandidate> = scores
            .into_iter()
            .filter(|(_, p, l)| seen.insert((*p, *l)))
            .map(|(r, p, l)| EvidenceCandidate {
                sentence: SentenceRef::new(&format!("P{p}"), l),
                relevance: r,
                provenance: Provenance::Initial,
                probs: None,
            })
            .collect();
        let mut a = cands.clone();
        sort_candidates(&mut a);
        let mut b = cands;
        use rand::{seq::SliceRandom, SeedableRng};
        b.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        sort_candidates(&mut b);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.windows(2).all(|w| w[0].relevance > w[1].relevance
            || (w[0].relevance == w[1].relevance && w[0].sentence < w[1].sentence)));
    }

    #[test]
    fn relevance_matches_mode(t in triple(), p in 0.0f64..1.0) {
        let [r, n, s] = t.to_array();
        prop_assert!((relevance_from_probs(&[r, n, s], ScorerMode::Ternary).unwrap() - (1.0 - n)).abs() < 1e-15);
        prop_assert_eq!(relevance_from_probs(&[1.0 - p, p], ScorerMode::Binary).unwrap(), p);
        prop_assert!(relevance_from_probs(&[r, n, s], ScorerMode::Binary).is_err());
    }

    #[test]
    fn concatenated_vote_is_an_argmax(t in triple()) {
        let label = aggregate_concatenated(t);
        let p = |l: Label| t.to_array()[l.class_index()];
        prop_assert!([Label::Supports, Label::Refutes, Label::NotEnoughInfo].iter().all(|&l| p(label) >= p(l)));
    }

    #[test]
    fn features_never_exceed_five_rows(n in 6usize..10, t in triple()) {
        let ev = vec![ScoredEvidence { claim_probs: t, retrieval_score: 1.0 }; n];
        prop_assert!(build_features(&ev, Some(t), AggregationMode::Mixed).is_err());
        prop_assert!(build_features(&ev[..5], None, AggregationMode::Mixed).is_err());
    }

    #[test]
    fn softmax_is_a_distribution(raw in prop::collection::vec(-50.0f64..50.0, 1..6)) {
        let p = softmax(&raw);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn folds_partition_and_stratify(y in prop::collection::vec(0usize..3, 8..60), seed in any::<u64>()) {
        let a = assign_folds(&y, 4, seed);
        prop_assert_eq!(&a, &assign_folds(&y, 4, seed));
        prop_assert_eq!(a.folds.len(), y.len());
        prop_assert!(a.folds.iter().all(|&f| f < 4));
        if a.stratified {
            for class in 0..3 {
                let per_fold: Vec<usize> =
                    (0..4).map(|f| (0..y.len()).filter(|&i| y[i] == class && a.folds[i] == f).count()).collect();
                prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn model_json_round_trips(seed in any::<u64>(), n in 6usize..30) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let cfg = GbdtConfig { n_estimators: 5, ..GbdtConfig::default() };
        let m = GbdtModel::fit(&x, &y, 3, &cfg).unwrap();
        let back = GbdtModel::from_json(&m.to_json().unwrap()).unwrap();
        for row in &x {
            prop_assert_eq!(m.predict_proba(row).unwrap(), back.predict_proba(row).unwrap());
        }
    }
}

#[test]
fn reretrieval_keeps_the_best_parent_and_skips_known_pages() {
    let src = [
        r#"{"id": "A", "lines": "0\tlow\tB\tB\n1\thigh\tB\tB\tC\tC\n2\tdangling\tNowhere\tNowhere"}"#,
        r#"{"id": "B", "lines": "0\tb"}"#,
        r#"{"id": "C", "lines": "0\tc"}"#,
    ]
    .join("\n");
    let (corpus, _) = Corpus::ingest(src.as_bytes()).unwrap();
    let seeds = vec![
        (SentenceRef::new("A", 0), 0.2),
        (SentenceRef::new("A", 1), 0.7),
        (SentenceRef::new("A", 2), 0.9),
    ];
    let mut already = DocCandidateSet::new(1);
    already.push("A", DocSource::TitleTfidf, 1.0);
    let known: HashSet<String> = already.pages().map(str::to_string).collect();
    let docs = reretrieve_documents(&seeds, &corpus, &known);
    let pages: Vec<&str> = docs.iter().map(|d| d.page_id.as_str()).collect();
    assert_eq!(pages.len(), 2);
    assert!(pages.contains(&"B") && pages.contains(&"C"));
    let b = docs.iter().find(|d| d.page_id == "B").unwrap();
    assert_eq!(b.parent, SentenceRef::new("A", 1));
    assert_eq!(b.parent_score, 0.7);

    let known: HashSet<String> = ["A", "B"].map(String::from).into();
    let docs = reretrieve_documents(&seeds, &corpus, &known);
    assert_eq!(docs.iter().map(|d| d.page_id.as_str()).collect::<Vec<_>>(), ["C"]);
}

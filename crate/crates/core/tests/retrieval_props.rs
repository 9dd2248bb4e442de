use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use equirag::corpus::{ingest_documents, Document};
use equirag::embedding::HashEmbedder;
use equirag::retrieval::{fuse_rrf, RetrievalConfig, RetrieverKind};
use equirag::tokenize::tokenize;
use equirag::{Bm25Index, ChunkConfig, RankedEntry, RankedList, RetrievalEngine, Snippet, SnippetStore, Source};
use proptest::prelude::*;

const VOCAB: [&str; 10] = ["fever", "cough", "insulin", "renal", "asthma", "pain", "dose", "the", "of", "acute"];

fn store_of(texts: &[String]) -> SnippetStore {
    let snippets = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Snippet {
            id: format!("pubmed:d{i:02}:0"),
            source: Source::Pubmed,
            start_token: 0,
            token_count: tokenize(t).len(),
            text: t.clone(),
        })
        .collect();
    SnippetStore::new("t", ChunkConfig::default(), snippets).unwrap()
}

/// Direct Okapi BM25 over every (snippet, distinct query term).
fn brute_bm25(texts: &[String], query: &str, k: usize) -> Vec<(String, f64)> {
    let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
    let mut out = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        let mut score = 0.0;
        let mut hit = false;
        for t in &terms {
            let tf = d.iter().filter(|x| *x == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            hit = true;
            let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * d.len() as f64 / avg));
        }
        if hit {
            out.push((format!("pubmed:d{i:02}:0"), score));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(k);
    out
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCAB.to_vec()), 1..15).prop_map(|w| w.join(" "))
}

fn ranked(ids: &[usize]) -> RankedList {
    RankedList {
        query_key: "q".into(),
        retriever_id: "r".into(),
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, id)| RankedEntry {
                snippet_id: format!("s{id:02}"),
                score: -(i as f64),
            })
            .collect(),
    }
}

fn rank_lists() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::sample::subsequence((0..25).collect::<Vec<_>>(), 0..=12).prop_shuffle(), 1..=4)
}

proptest! {
    #[test]
    fn bm25_matches_brute_force(texts in prop::collection::vec(text(), 1..12), query in text(), k in 1usize..15) {
        let idx = Bm25Index::build(&store_of(&texts), 1.2, 0.75).unwrap();
        let got = idx.query("q", &query, k);
        let want = brute_bm25(&texts, &query, k);
        prop_assert_eq!(got.ids().collect::<Vec<_>>(), want.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>());
        for (e, (_, s)) in got.entries.iter().zip(&want) {
            prop_assert!((e.score - s).abs() < 1e-9);
        }
        prop_assert!(got.check_invariants(k).is_ok());
    }

    #[test]
    fn bm25_index_survives_serialization(texts in prop::collection::vec(text(), 1..8), query in text()) {
        let idx = Bm25Index::build(&store_of(&texts), 1.2, 0.75).unwrap();
        let back = Bm25Index::from_json(&idx.to_json()).unwrap();
        prop_assert_eq!(idx.query("q", &query, 10), back.query("q", &query, 10));
    }

    #[test]
    fn rrf_ignores_list_order(lists in rank_lists(), k in 1usize..30) {
        let ranked_lists: Vec<RankedList> = lists.iter().map(|l| ranked(l)).collect();
        let mut reversed = ranked_lists.clone();
        reversed.reverse();
        prop_assert_eq!(fuse_rrf(&ranked_lists, 60, k), fuse_rrf(&reversed, 60, k));
    }

    #[test]
    fn rrf_smaller_k_is_a_prefix(lists in rank_lists(), k in 1usize..30) {
        let ranked_lists: Vec<RankedList> = lists.iter().map(|l| ranked(l)).collect();
        let small = fuse_rrf(&ranked_lists, 60, k);
        let big = fuse_rrf(&ranked_lists, 60, 100);
        prop_assert!(small.check_invariants(k).is_ok());
        prop_assert_eq!(&big.entries[..small.len()], &small.entries[..]);
        let distinct: BTreeSet<usize> = lists.iter().flatten().copied().collect();
        prop_assert_eq!(big.len(), distinct.len());
    }

    #[test]
    fn hybrid_engine_lists_are_well_formed(texts in prop::collection::vec(text(), 1..10), query in text(), k in 1usize..8) {
        let store = store_of(&texts);
        let config = RetrievalConfig {
            k,
            retrievers: [RetrieverKind::Bm25, RetrieverKind::Dense].into(),
            ..RetrievalConfig::default()
        };
        let engine = RetrievalEngine::build(config, &store, None, Some(Arc::new(HashEmbedder::new(32)))).unwrap();
        let list = engine.retrieve("q", &query).unwrap();
        prop_assert!(list.check_invariants(k).is_ok());
        prop_assert!(list.ids().all(|id| store.get(id).is_some()));
        prop_assert_eq!(list, engine.retrieve("q", &query).unwrap());
    }

    #[test]
    fn chunks_cover_every_token(n in 0usize..400, window in 1usize..64, stride_frac in 1usize..=100) {
        let stride = (window * stride_frac).div_ceil(100);
        let cfg = ChunkConfig::new(window, stride).unwrap();
        let spans = cfg.spans(n);
        let mut covered = vec![false; n];
        for &(s, e) in &spans {
            prop_assert!(s < e && e <= n && e - s <= window);
            covered[s..e].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.into_iter().all(|c| c));
        if n > 0 {
            prop_assert_eq!(spans.last().unwrap().1, n);
        }
    }

    #[test]
    fn ingestion_is_deterministic(words in prop::collection::vec(prop::sample::select(VOCAB.to_vec()), 1..200), window in 2usize..40) {
        let docs = vec![
            Document { source: Source::Textbook, doc_id: "a".into(), text: words.join(" ") },
            Document { source: Source::Wikipedia, doc_id: "b".into(), text: words.join("  ") },
        ];
        let cfg = ChunkConfig::new(window, window).unwrap();
        let first = ingest_documents(&docs, &cfg).unwrap();
        prop_assert_eq!(&first, &ingest_documents(&docs, &cfg).unwrap());
        // Non-overlapping windows reproduce the token stream exactly.
        let per_doc: BTreeMap<Source, Vec<String>> = first.iter().fold(BTreeMap::new(), |mut m, s| {
            m.entry(s.source).or_insert_with(Vec::new).extend(tokenize(&s.text));
            m
        });
        for toks in per_doc.values() {
            prop_assert_eq!(toks, &words);
        }
    }
}

//! Flat cosine-similarity index over the train split.
//!
//! Exact search only: train splits in the 10-shot regime stay under a few
//! thousand rows, so every query scores every row and sorts. Similarities
//! come from the one public `cosine` so that any external recomputation is
//! bit-identical and orderings never disagree on near-ties.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{cosine, EmbedError, EmbeddingProvider, EmbeddingVector};
use crate::corpus::{SplitDataset, Utterance};

/// One retrieved train example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub utterance_id: usize,
    pub similarity: f64,
}

/// A query with its ranked neighbors, sorted by similarity non-increasing;
/// exact ties break by ascending utterance id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub query: Utterance,
    pub neighbors: Vec<Neighbor>,
    pub k: usize,
}

/// Neighbors of one retrieval partitioned by original intent. Groups are
/// ordered by their best member's similarity, descending; members within a
/// group keep retrieval order (similarity descending).
#[derive(Debug, Clone, PartialEq)]
pub struct IntentGroupSet {
    pub groups: Vec<IntentGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentGroup {
    pub intent: String,
    pub members: Vec<Utterance>,
    pub best_similarity: f64,
}

impl IntentGroupSet {
    pub fn intents(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.intent.clone()).collect()
    }
}

/// Immutable flat index: one embedding per train utterance.
pub struct VectorIndex {
    provider: Arc<dyn EmbeddingProvider>,
    ids: Vec<usize>,
    vectors: Vec<EmbeddingVector>,
}

impl std::fmt::Debug for VectorIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorIndex")
            .field("rows", &self.ids.len())
            .field("provider", &self.provider.describe())
            .finish()
    }
}

/// Embed every train utterance and freeze the index.
pub fn build_index(
    train: &[Utterance],
    provider: Arc<dyn EmbeddingProvider>,
) -> Result<VectorIndex, EmbedError> {
    if train.is_empty() {
        return Err(EmbedError::EmptyTrain);
    }
    let texts: Vec<&str> = train.iter().map(|u| u.text.as_str()).collect();
    let vectors = provider.embed(&texts)?;
    Ok(VectorIndex {
        provider,
        ids: train.iter().map(|u| u.id).collect(),
        vectors,
    })
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    /// Rank all train rows against the query and keep the top `k`.
    pub fn retrieve_topk(&self, query: &Utterance, k: usize) -> Result<RetrievalSet, EmbedError> {
        assert!(k >= 1, "retrieval k must be at least 1");
        let mut embedded = self.provider.embed(&[query.text.as_str()])?;
        let query_vec = embedded.remove(0);

        let mut scored = Vec::with_capacity(self.ids.len());
        for (&utterance_id, vector) in self.ids.iter().zip(&self.vectors) {
            scored.push(Neighbor {
                utterance_id,
                similarity: cosine(&query_vec, vector)?,
            });
        }
        scored.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(a.utterance_id.cmp(&b.utterance_id))
        });
        scored.truncate(k);
        Ok(RetrievalSet {
            query: query.clone(),
            neighbors: scored,
            k,
        })
    }
}

/// Partition a retrieval's neighbors by original intent.
///
/// Because neighbors arrive sorted (similarity desc, id asc), first-seen
/// group order already equals best-similarity order with the id tie-break.
pub fn group_by_intent(
    rs: &RetrievalSet,
    train: &SplitDataset,
) -> Result<IntentGroupSet, EmbedError> {
    let mut groups: Vec<IntentGroup> = Vec::new();
    for neighbor in &rs.neighbors {
        let utterance = train
            .train_by_id(neighbor.utterance_id)
            .ok_or(EmbedError::UnknownId(neighbor.utterance_id))?;
        match groups.iter_mut().find(|g| g.intent == utterance.intent) {
            Some(group) => group.members.push(utterance.clone()),
            None => groups.push(IntentGroup {
                intent: utterance.intent.clone(),
                members: vec![utterance.clone()],
                best_similarity: neighbor.similarity,
            }),
        }
    }
    Ok(IntentGroupSet { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{cosine, EmbeddingVector, HashEmbedder};
    use std::collections::HashMap;

    /// Fixed-vector provider for handcrafted geometry.
    struct StaticProvider(HashMap<String, Vec<f64>>);

    impl StaticProvider {
        fn new(entries: &[(&str, &[f64])]) -> Self {
            Self(
                entries
                    .iter()
                    .map(|(t, v)| (t.to_string(), v.to_vec()))
                    .collect(),
            )
        }
    }

    impl EmbeddingProvider for StaticProvider {
        fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
            texts
                .iter()
                .map(|t| {
                    EmbeddingVector::new(
                        self.0
                            .get(*t)
                            .cloned()
                            .ok_or_else(|| EmbedError::MissingEmbedding(t.to_string()))?,
                    )
                })
                .collect()
        }
        fn describe(&self) -> String {
            "static".into()
        }
    }

    fn utt(id: usize, text: &str, intent: &str) -> Utterance {
        Utterance {
            id,
            text: text.to_string(),
            intent: intent.to_string(),
        }
    }

    fn dataset(train: Vec<Utterance>) -> SplitDataset {
        let intents = train.iter().map(|u| u.intent.clone()).collect();
        SplitDataset {
            name: "t".into(),
            train,
            test: vec![],
            intents,
        }
    }

    fn word_pool_text(rng: &mut impl rand::Rng) -> String {
        const POOL: [&str; 12] = [
            "card", "pan", "verify", "account", "bank", "delete", "pincode", "order", "refund",
            "balance", "transfer", "check",
        ];
        let n = rng.random_range(2..6);
        (0..n)
            .map(|_| POOL[rng.random_range(0..POOL.len())])
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn single_row_index_always_returns_it() {
        let train = vec![utt(0, "verify pan", "verify_pan")];
        let index = build_index(&train, Arc::new(HashEmbedder::default())).unwrap();
        let rs = index
            .retrieve_topk(&utt(0, "anything at all", "x"), 5)
            .unwrap();
        assert_eq!(rs.neighbors.len(), 1);
        assert_eq!(rs.neighbors[0].utterance_id, 0);
    }

    #[test]
    fn empty_train_is_an_error() {
        match build_index(&[], Arc::new(HashEmbedder::default())) {
            Err(EmbedError::EmptyTrain) => {}
            other => panic!("expected EmptyTrain, got {other:?}"),
        }
    }

    #[test]
    fn k_larger_than_train_returns_everything_ranked() {
        let train: Vec<Utterance> = (0..4)
            .map(|i| utt(i, &format!("example text {i}"), "a"))
            .collect();
        let index = build_index(&train, Arc::new(HashEmbedder::default())).unwrap();
        let rs = index.retrieve_topk(&utt(0, "example text 2", "a"), 50).unwrap();
        assert_eq!(rs.neighbors.len(), 4);
        for pair in rs.neighbors.windows(2) {
            assert!(pair[0].similarity >= pair[1].similarity);
        }
    }

    #[test]
    fn orthogonal_vectors_have_zero_similarity() {
        let provider = StaticProvider::new(&[
            ("q", &[1.0, 0.0, 0.0]),
            ("east", &[0.0, 1.0, 0.0]),
            ("north", &[0.0, 0.0, 1.0]),
        ]);
        let train = vec![utt(0, "east", "a"), utt(1, "north", "b")];
        let index = build_index(&train, Arc::new(provider)).unwrap();
        let rs = index.retrieve_topk(&utt(0, "q", "x"), 2).unwrap();
        assert_eq!(rs.neighbors[0].similarity, 0.0);
        assert_eq!(rs.neighbors[1].similarity, 0.0);
        // exact tie: ascending id order
        assert_eq!(rs.neighbors[0].utterance_id, 0);
        assert_eq!(rs.neighbors[1].utterance_id, 1);
    }

    #[test]
    fn retrieval_matches_brute_force_for_random_queries() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let embedder = HashEmbedder::default();

        let mut train = Vec::new();
        for i in 0..200 {
            // repeat some texts to force exact ties
            let text = if i % 9 == 0 {
                "verify pan card".to_string()
            } else {
                word_pool_text(&mut rng)
            };
            train.push(utt(i, &text, "a"));
        }
        let index = build_index(&train, Arc::new(embedder.clone())).unwrap();

        for _ in 0..50 {
            let query = utt(0, &word_pool_text(&mut rng), "x");
            let got = index.retrieve_topk(&query, 20).unwrap();

            let query_vec = embedder.embed(&[query.text.as_str()]).unwrap().remove(0);
            let mut brute: Vec<(usize, f64)> = train
                .iter()
                .map(|u| {
                    let v = embedder.embed(&[u.text.as_str()]).unwrap().remove(0);
                    (u.id, cosine(&query_vec, &v).unwrap())
                })
                .collect();
            brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            brute.truncate(20);

            let got_ids: Vec<usize> = got.neighbors.iter().map(|n| n.utterance_id).collect();
            let want_ids: Vec<usize> = brute.iter().map(|(id, _)| *id).collect();
            assert_eq!(got_ids, want_ids);
            for (n, (_, sim)) in got.neighbors.iter().zip(&brute) {
                assert!((n.similarity - sim).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grouping_partitions_neighbors() {
        let mut train = Vec::new();
        for i in 0..20 {
            let intent = ["alpha", "beta", "gamma"][i % 3];
            train.push(utt(i, &format!("text {i} about {intent}"), intent));
        }
        let ds = dataset(train.clone());
        let index = build_index(&train, Arc::new(HashEmbedder::default())).unwrap();
        let rs = index.retrieve_topk(&utt(0, "text about alpha", "q"), 20).unwrap();
        let groups = group_by_intent(&rs, &ds).unwrap();

        assert_eq!(groups.groups.len(), 3);
        let total: usize = groups.groups.iter().map(|g| g.members.len()).sum();
        assert_eq!(total, 20);

        // multiset equality with the retrieval
        let mut from_groups: Vec<usize> = groups
            .groups
            .iter()
            .flat_map(|g| g.members.iter().map(|m| m.id))
            .collect();
        from_groups.sort_unstable();
        let mut from_rs: Vec<usize> = rs.neighbors.iter().map(|n| n.utterance_id).collect();
        from_rs.sort_unstable();
        assert_eq!(from_groups, from_rs);

        // groups ordered by best similarity descending
        for pair in groups.groups.windows(2) {
            assert!(pair[0].best_similarity >= pair[1].best_similarity);
        }
    }

    #[test]
    fn single_intent_retrieval_yields_one_group() {
        let train: Vec<Utterance> = (0..5)
            .map(|i| utt(i, &format!("pay bill {i}"), "pay_bill"))
            .collect();
        let ds = dataset(train.clone());
        let index = build_index(&train, Arc::new(HashEmbedder::default())).unwrap();
        let rs = index.retrieve_topk(&utt(0, "pay bill", "q"), 5).unwrap();
        let groups = group_by_intent(&rs, &ds).unwrap();
        assert_eq!(groups.intents(), vec!["pay_bill".to_string()]);
    }

    #[test]
    fn tied_group_leaders_order_by_lower_id() {
        // identical embeddings for the two leading texts => exact tie;
        // the group containing the lower utterance id must come first.
        let provider = StaticProvider::new(&[
            ("q", &[1.0, 1.0]),
            ("tie", &[1.0, 0.9]),
            ("far", &[0.0, 1.0]),
        ]);
        let train = vec![
            utt(0, "tie", "intent_b"),
            utt(1, "tie", "intent_a"),
            utt(2, "far", "intent_c"),
        ];
        let ds = dataset(train.clone());
        let index = build_index(&train, Arc::new(provider)).unwrap();
        let rs = index.retrieve_topk(&utt(0, "q", "x"), 3).unwrap();
        assert_eq!(rs.neighbors[0].utterance_id, 0);
        assert_eq!(rs.neighbors[1].utterance_id, 1);
        assert_eq!(rs.neighbors[0].similarity, rs.neighbors[1].similarity);

        let groups = group_by_intent(&rs, &ds).unwrap();
        assert_eq!(groups.groups[0].intent, "intent_b");
        assert_eq!(groups.groups[1].intent, "intent_a");
    }

    #[test]
    fn grouping_rejects_unknown_ids() {
        let train = vec![utt(0, "a b", "x")];
        let ds = dataset(train);
        let rs = RetrievalSet {
            query: utt(0, "q", "x"),
            neighbors: vec![Neighbor {
                utterance_id: 99,
                similarity: 0.5,
            }],
            k: 1,
        };
        assert!(matches!(
            group_by_intent(&rs, &ds),
            Err(EmbedError::UnknownId(99))
        ));
    }
}

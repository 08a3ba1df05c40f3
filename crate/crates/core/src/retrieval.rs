//! Hybrid retrieval over the memory graph.
//!
//! Stage I of the pipeline: semantic candidates are scored by a weighted sum
//! of dense cosine similarity, a squashed Okapi BM25 score, and a verifier
//! gate; episodic recall is pure cosine; procedural skills are inherited
//! along distill edges rather than scored.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::adapters::{AdapterError, Verifier};
use crate::embedding::{cosine, embed, tokenize, EmbeddingVector};
use crate::graph::{Direction, EdgeKind, GraphError, LayerTag, MemoryGraph, NodeId};

/// Okapi BM25 parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Term statistics for a fixed document collection. Documents are keyed by
/// node id; rebuilding the stats after any graph change is the caller's job.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    doc_count: usize,
    avg_len: f64,
    doc_lens: BTreeMap<NodeId, usize>,
    term_freqs: BTreeMap<NodeId, BTreeMap<String, usize>>,
    doc_freqs: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn from_docs<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = (NodeId, &'a str)>,
    {
        let mut doc_lens = BTreeMap::new();
        let mut term_freqs: BTreeMap<NodeId, BTreeMap<String, usize>> = BTreeMap::new();
        let mut doc_freqs: BTreeMap<String, usize> = BTreeMap::new();
        for (id, text) in docs {
            let tokens = tokenize(text);
            doc_lens.insert(id, tokens.len());
            let mut freqs: BTreeMap<String, usize> = BTreeMap::new();
            for t in tokens {
                *freqs.entry(t).or_insert(0) += 1;
            }
            for term in freqs.keys() {
                *doc_freqs.entry(term.clone()).or_insert(0) += 1;
            }
            term_freqs.insert(id, freqs);
        }
        let doc_count = doc_lens.len();
        let total: usize = doc_lens.values().sum();
        let avg_len = if doc_count == 0 { 0.0 } else { total as f64 / doc_count as f64 };
        CorpusStats { doc_count, avg_len, doc_lens, term_freqs, doc_freqs }
    }

    /// Stats over every semantic node in the graph.
    pub fn from_semantic_layer(graph: &MemoryGraph) -> Self {
        Self::from_docs(
            graph
                .nodes()
                .filter(|n| n.layer == LayerTag::Semantic)
                .map(|n| (n.id, n.content.as_str())),
        )
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.doc_lens.contains_key(&id)
    }
}

/// Okapi BM25 with the +1-inside-the-log idf variant, so scores are never
/// negative. Query terms are tokenized the same way as documents; terms
/// absent from a document contribute nothing.
pub fn bm25_score(stats: &CorpusStats, query: &str, doc: NodeId, params: Bm25Params) -> f64 {
    let Some(freqs) = stats.term_freqs.get(&doc) else {
        return 0.0;
    };
    let dl = stats.doc_lens[&doc] as f64;
    let n = stats.doc_count as f64;
    let mut score = 0.0;
    for term in tokenize(query) {
        let tf = *freqs.get(&term).unwrap_or(&0) as f64;
        if tf == 0.0 {
            continue;
        }
        let df = *stats.doc_freqs.get(&term).unwrap_or(&0) as f64;
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        let denom = tf + params.k1 * (1.0 - params.b + params.b * dl / stats.avg_len);
        score += idf * tf * (params.k1 + 1.0) / denom;
    }
    score
}

/// Monotone squash of a non-negative sparse score into [0, 1).
pub fn normalize_sparse(s: f64) -> f64 {
    s / (s + 1.0)
}

/// Per-candidate score decomposition, kept on activated subgraphs so later
/// refinement can prune by stored score.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreBreakdown {
    pub dense: f64,
    pub sparse_norm: f64,
    pub verifier: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RetrievalConfig {
    pub k_sem: usize,
    pub k_epi: usize,
    pub w_dense: f64,
    pub w_sparse: f64,
    pub w_verifier: f64,
    pub bm25: Bm25Params,
    /// When false the raw BM25 score enters the sum unsquashed.
    pub squash_sparse: bool,
    /// Nodes added per link-expansion round during refinement.
    pub expand_budget: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k_sem: 5,
            k_epi: 3,
            w_dense: 1.0,
            w_sparse: 1.0,
            w_verifier: 1.0,
            bm25: Bm25Params::default(),
            squash_sparse: true,
            expand_budget: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("node {node} is {actual}, expected {expected}")]
    LayerMismatch {
        node: NodeId,
        expected: LayerTag,
        actual: LayerTag,
    },
    #[error("adapter error: {0}")]
    Adapter(#[from] AdapterError),
}

/// One scored semantic candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredNode {
    pub id: NodeId,
    pub score: ScoreBreakdown,
}

/// Joins query and observation into the step's scoring text, dropping empty
/// parts so no stray separators appear.
pub fn scoring_text(query: &str, observation: &str) -> String {
    let mut parts = Vec::new();
    if !query.is_empty() {
        parts.push(query);
    }
    if !observation.is_empty() {
        parts.push(observation);
    }
    parts.join(" ")
}

/// Scores every semantic node and returns the top `k_sem` by total score,
/// ties broken by ascending node id. The verifier runs once per candidate
/// per call, memoized by (id, version).
pub fn retrieve_semantic(
    graph: &MemoryGraph,
    stats: &CorpusStats,
    query: &str,
    observation: &str,
    query_embedding: &EmbeddingVector,
    verifier: &dyn Verifier,
    cfg: &RetrievalConfig,
) -> Result<Vec<ScoredNode>, RetrievalError> {
    let text = scoring_text(query, observation);
    let mut verdicts: BTreeMap<(NodeId, u64), f64> = BTreeMap::new();
    let mut scored = Vec::new();
    for node in graph.nodes().filter(|n| n.layer == LayerTag::Semantic) {
        let dense = cosine(query_embedding, &node.embedding).map_err(|_| {
            RetrievalError::Graph(GraphError::DimensionMismatch {
                expected: query_embedding.dim(),
                got: node.embedding.dim(),
            })
        })?;
        let raw_sparse = bm25_score(stats, &text, node.id, cfg.bm25);
        let sparse_norm = if cfg.squash_sparse { normalize_sparse(raw_sparse) } else { raw_sparse };
        let key = (node.id, node.version);
        let verifier_score = match verdicts.get(&key) {
            Some(v) => *v,
            None => {
                let v = if verifier.verify(&text, &node.content)? { 1.0 } else { 0.0 };
                verdicts.insert(key, v);
                v
            }
        };
        let total =
            cfg.w_dense * dense + cfg.w_sparse * sparse_norm + cfg.w_verifier * verifier_score;
        scored.push(ScoredNode {
            id: node.id,
            score: ScoreBreakdown { dense, sparse_norm, verifier: verifier_score, total },
        });
    }
    scored.sort_by(|a, b| {
        b.score
            .total
            .partial_cmp(&a.score.total)
            .expect("scores are finite")
            .then(a.id.cmp(&b.id))
    });
    scored.truncate(cfg.k_sem);
    Ok(scored)
}

/// Top `k_epi` episodic nodes by cosine similarity, ascending-id ties.
/// Episodes whose `task_id` meta equals `exclude_task` are skipped, so a
/// task never retrieves its own episode.
pub fn retrieve_episodic(
    graph: &MemoryGraph,
    query_embedding: &EmbeddingVector,
    exclude_task: Option<&str>,
    cfg: &RetrievalConfig,
) -> Result<Vec<(NodeId, f64)>, RetrievalError> {
    let mut scored = Vec::new();
    for node in graph.nodes().filter(|n| n.layer == LayerTag::Episodic) {
        if let Some(task) = exclude_task {
            if node.meta.get("task_id").map(String::as_str) == Some(task) {
                continue;
            }
        }
        let sim = cosine(query_embedding, &node.embedding).map_err(|_| {
            RetrievalError::Graph(GraphError::DimensionMismatch {
                expected: query_embedding.dim(),
                got: node.embedding.dim(),
            })
        })?;
        scored.push((node.id, sim));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite").then(a.0.cmp(&b.0)));
    scored.truncate(cfg.k_epi);
    Ok(scored)
}

/// Skills reachable from the given episodes along distill edges: the union
/// of out-neighbors, ascending id, no scores. Errors if any input node is
/// not episodic.
pub fn inherit_procedural(
    graph: &MemoryGraph,
    episodes: &[NodeId],
) -> Result<Vec<NodeId>, RetrievalError> {
    let mut out = std::collections::BTreeSet::new();
    for &id in episodes {
        let node = graph.node(id).ok_or(GraphError::UnknownNode(id))?;
        if node.layer != LayerTag::Episodic {
            return Err(RetrievalError::LayerMismatch {
                node: id,
                expected: LayerTag::Episodic,
                actual: node.layer,
            });
        }
        for n in graph.neighbors(id, EdgeKind::Distill, Direction::Out)? {
            out.insert(n);
        }
    }
    Ok(out.into_iter().collect())
}

/// Embeds the scoring text for a step: query and observation joined by a
/// single space, empty parts dropped.
pub fn embed_step(query: &str, observation: &str, dimension: usize) -> EmbeddingVector {
    embed(&scoring_text(query, observation), dimension)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::reference::TokenOverlapVerifier;
    use crate::graph::MemoryGraph;

    const EPS: f64 = 1e-9;

    fn tiny_corpus() -> (MemoryGraph, CorpusStats, Vec<NodeId>) {
        let mut graph = MemoryGraph::new(16);
        let ids = vec![
            graph.add_node(LayerTag::Semantic, "red fox", embed("red fox", 16)).unwrap(),
            graph.add_node(LayerTag::Semantic, "red dog", embed("red dog", 16)).unwrap(),
            graph.add_node(LayerTag::Semantic, "blue cat", embed("blue cat", 16)).unwrap(),
        ];
        let stats = CorpusStats::from_semantic_layer(&graph);
        (graph, stats, ids)
    }

    #[test]
    fn bm25_matches_hand_computed_values() {
        let (_, stats, ids) = tiny_corpus();
        let p = Bm25Params::default();
        // All documents have length 2 = avg, so the length penalty cancels.
        // idf("fox") = ln((3-1+0.5)/(1+0.5)+1) = ln(8/3)
        // term = idf * 1 * 2.2 / (1 + 1.2) = idf
        let fox_d1 = bm25_score(&stats, "fox", ids[0], p);
        assert!((fox_d1 - (8.0f64 / 3.0).ln()).abs() < EPS, "got {fox_d1}");

        // idf("red") = ln((3-2+0.5)/(2+0.5)+1) = ln(1.6)
        let red_d1 = bm25_score(&stats, "red", ids[0], p);
        assert!((red_d1 - 1.6f64.ln()).abs() < EPS, "got {red_d1}");

        // Term absent from the document.
        assert_eq!(bm25_score(&stats, "fox", ids[2], p), 0.0);

        // Multi-term queries sum per-term contributions.
        let both = bm25_score(&stats, "red fox", ids[0], p);
        assert!((both - (fox_d1 + red_d1)).abs() < EPS);

        // Repeated query terms count once per occurrence in the query.
        let doubled = bm25_score(&stats, "fox fox", ids[0], p);
        assert!((doubled - 2.0 * fox_d1).abs() < EPS);
    }

    #[test]
    fn bm25_length_penalty_applies_off_average() {
        let mut graph = MemoryGraph::new(16);
        let short = graph.add_node(LayerTag::Semantic, "fox", embed("fox", 16)).unwrap();
        let long = graph
            .add_node(LayerTag::Semantic, "fox dog cat bird", embed("fox dog cat bird", 16))
            .unwrap();
        let stats = CorpusStats::from_semantic_layer(&graph);
        let p = Bm25Params::default();
        // avgdl = 2.5; idf("fox") = ln((2-2+0.5)/(2+0.5)+1) = ln(1.2)
        let idf = 1.2f64.ln();
        let short_expect = idf * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 1.0 / 2.5));
        let long_expect = idf * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 4.0 / 2.5));
        assert!((bm25_score(&stats, "fox", short, p) - short_expect).abs() < EPS);
        assert!((bm25_score(&stats, "fox", long, p) - long_expect).abs() < EPS);
        assert!(short_expect > long_expect);
    }

    #[test]
    fn normalize_sparse_squashes_into_unit_interval() {
        assert_eq!(normalize_sparse(0.0), 0.0);
        assert!((normalize_sparse(1.0) - 0.5).abs() < EPS);
        assert!((normalize_sparse(3.0) - 0.75).abs() < EPS);
        assert!(normalize_sparse(1e9) < 1.0);
    }

    #[test]
    fn retrieve_semantic_ranks_by_total_with_id_ties() {
        let (graph, stats, ids) = tiny_corpus();
        let verifier = TokenOverlapVerifier::default();
        let cfg = RetrievalConfig { k_sem: 2, ..RetrievalConfig::default() };
        let q = embed("red fox", 16);
        let top = retrieve_semantic(&graph, &stats, "red fox", "", &q, &verifier, &cfg).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].id, ids[0]);
        assert!(top[0].score.total > top[1].score.total);
        assert_eq!(top[1].id, ids[1]);
        // Breakdown fields recombine into the total under unit weights.
        let b = top[0].score;
        assert!((b.dense + b.sparse_norm + b.verifier - b.total).abs() < EPS);
        assert!((b.dense - 1.0).abs() < EPS);
        assert_eq!(b.verifier, 1.0);
    }

    #[test]
    fn retrieve_semantic_identical_scores_tie_break_ascending() {
        let mut graph = MemoryGraph::new(16);
        let a = graph.add_node(LayerTag::Semantic, "same text", embed("same text", 16)).unwrap();
        let b = graph.add_node(LayerTag::Semantic, "same text", embed("same text", 16)).unwrap();
        let stats = CorpusStats::from_semantic_layer(&graph);
        let verifier = TokenOverlapVerifier::default();
        let cfg = RetrievalConfig::default();
        let q = embed("same text", 16);
        let top = retrieve_semantic(&graph, &stats, "same text", "", &q, &verifier, &cfg).unwrap();
        assert_eq!(top.iter().map(|s| s.id).collect::<Vec<_>>(), vec![a, b]);
    }

    #[test]
    fn observation_joins_query_in_scoring_text() {
        let (graph, stats, ids) = tiny_corpus();
        let verifier = TokenOverlapVerifier::default();
        let cfg = RetrievalConfig::default();
        // Query alone has no overlap with "blue cat"; the observation adds it.
        let q = embed_step("fox", "blue cat", 16);
        let top = retrieve_semantic(&graph, &stats, "fox", "blue cat", &q, &verifier, &cfg).unwrap();
        let cat = top.iter().find(|s| s.id == ids[2]).unwrap();
        assert!(cat.score.sparse_norm > 0.0);
        assert_eq!(cat.score.verifier, 1.0);
    }

    #[test]
    fn retrieve_episodic_cosine_ordering_and_exclusion() {
        let mut graph = MemoryGraph::new(16);
        let e1 = graph
            .add_node(LayerTag::Episodic, "fox hunt trace", embed("fox hunt trace", 16))
            .unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("task_id".to_owned(), "t7".to_owned());
        let e2 = graph
            .add_node_with_meta(LayerTag::Episodic, "fox hunt", embed("fox hunt", 16), meta)
            .unwrap();
        graph.add_node(LayerTag::Semantic, "fox", embed("fox", 16)).unwrap();

        let q = embed("fox hunt", 16);
        let cfg = RetrievalConfig::default();
        let hits = retrieve_episodic(&graph, &q, None, &cfg).unwrap();
        assert_eq!(hits[0].0, e2);
        assert!((hits[0].1 - 1.0).abs() < EPS);
        assert_eq!(hits.len(), 2);

        let hits = retrieve_episodic(&graph, &q, Some("t7"), &cfg).unwrap();
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![e1]);
    }

    #[test]
    fn inherit_procedural_unions_distill_targets() {
        let mut graph = MemoryGraph::new(16);
        let e1 = graph.add_node(LayerTag::Episodic, "ep one", embed("ep one", 16)).unwrap();
        let e2 = graph.add_node(LayerTag::Episodic, "ep two", embed("ep two", 16)).unwrap();
        let p1 = graph.add_node(LayerTag::Procedural, "skill a", embed("skill a", 16)).unwrap();
        let p2 = graph.add_node(LayerTag::Procedural, "skill b", embed("skill b", 16)).unwrap();
        graph.add_edge(e1, p1, EdgeKind::Distill).unwrap();
        graph.add_edge(e2, p1, EdgeKind::Distill).unwrap();
        graph.add_edge(e2, p2, EdgeKind::Distill).unwrap();

        assert_eq!(inherit_procedural(&graph, &[e1, e2]).unwrap(), vec![p1, p2]);
        assert_eq!(inherit_procedural(&graph, &[e2, e1]).unwrap(), vec![p1, p2]);
        assert!(inherit_procedural(&graph, &[]).unwrap().is_empty());

        let s = graph.add_node(LayerTag::Semantic, "fact", embed("fact", 16)).unwrap();
        let err = inherit_procedural(&graph, &[s]).unwrap_err();
        assert!(matches!(err, RetrievalError::LayerMismatch { .. }));
    }

    #[test]
    fn sparse_squash_toggle() {
        let (graph, stats, ids) = tiny_corpus();
        let verifier = TokenOverlapVerifier::default();
        let mut cfg = RetrievalConfig::default();
        cfg.squash_sparse = false;
        let q = embed("fox", 16);
        let top = retrieve_semantic(&graph, &stats, "fox", "", &q, &verifier, &cfg).unwrap();
        let d1 = top.iter().find(|s| s.id == ids[0]).unwrap();
        let raw = bm25_score(&stats, "fox", ids[0], cfg.bm25);
        assert!((d1.score.sparse_norm - raw).abs() < EPS);

        cfg.squash_sparse = true;
        let top = retrieve_semantic(&graph, &stats, "fox", "", &q, &verifier, &cfg).unwrap();
        let d1_squashed = top.iter().find(|s| s.id == ids[0]).unwrap();
        assert!((d1_squashed.score.sparse_norm - raw / (raw + 1.0)).abs() < EPS);
        assert!(d1_squashed.score.sparse_norm < d1.score.sparse_norm);
    }
}

//! Feedback-driven refinement of activated subgraphs.
//!
//! After each execution attempt the executor reports success or a failure
//! cause; the attributor maps the cause to one of four edits (expand, prune,
//! reshape, bypass) and the loop applies it, re-serializes, and tries again,
//! up to a fixed round budget. Edits touch the step-local subgraph; only
//! content reshaping writes through to the persistent graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, AdapterSuite};
use crate::context::{
    serialize_context, ActivatedSubgraph, ContextError, ContextString, StepAnchor, SubgraphEdge,
};
use crate::graph::{GraphError, GraphWrite, LayerTag, NodeId};
use crate::retrieval::{
    bm25_score, normalize_sparse, scoring_text, CorpusStats, RetrievalConfig, RetrievalError,
    ScoreBreakdown,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReshapeDirection {
    /// Compress the unit to its core.
    Abstract,
    /// Narrow the unit to its operative detail.
    Refine,
}

/// Why an execution attempt failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum FailureCause {
    /// Needed knowledge was not activated; hints describe what is missing.
    UnderConnection { hints: Vec<String> },
    /// Irrelevant nodes crowd the context. Explicit distractor ids are
    /// optional; absent means "something here is noise".
    OverConnection { distractors: Option<Vec<NodeId>> },
    /// One activated unit is at the wrong level of detail.
    GranularityMismatch { direction: ReshapeDirection, target: NodeId },
    /// The environment gave no usable signal.
    Unattributed { note: String },
}

/// Execution outcome for one attempt. Success carries no cause by type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum Feedback {
    Success,
    Failure { cause: FailureCause },
}

impl Feedback {
    pub fn is_success(&self) -> bool {
        matches!(self, Feedback::Success)
    }
}

/// What the attributor decided to do, before the edit computes its payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "lowercase")]
pub enum EditDecision {
    Expand { hints: Vec<String> },
    Prune { distractors: Option<Vec<NodeId>> },
    Reshape { direction: ReshapeDirection, target: NodeId },
    Bypass,
}

/// The applied edit, with the payload the application actually produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum EditAction {
    Expand { added: Vec<NodeId> },
    Prune { removed: Vec<SubgraphEdge> },
    Reshape { target: NodeId, new_content: String },
    Bypass,
}

#[derive(Debug, Clone)]
pub struct RefinementConfig {
    /// Maximum number of edit rounds (T). Zero means a single attempt.
    pub max_rounds: usize,
    /// Hide memory on the very first attempt; an Expand edit restores it.
    pub bypass_first: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig { max_rounds: 5, bypass_first: false }
    }
}

/// One loop round: the context that was executed, the feedback it drew, and
/// the edit applied in response (none on the terminal round).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRound {
    pub round: usize,
    pub feedback: Feedback,
    pub action: Option<EditAction>,
    pub context: ContextString,
}

pub type RefinementTrace = Vec<RefinementRound>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskOutcome {
    Success,
    Failure,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub subgraph: ActivatedSubgraph,
    pub trace: RefinementTrace,
    pub outcome: TaskOutcome,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("reshape target {0} is not in the activated subgraph")]
    UnknownTarget(NodeId),
    #[error("nothing to prune in the activated subgraph")]
    EmptySubgraph,
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// A refine loop that died mid-flight still hands back the rounds it ran.
#[derive(Debug)]
pub struct RefineAbort {
    pub trace: RefinementTrace,
    pub error: RefineError,
}

/// The deterministic feedback-to-edit mapping: under-connection expands,
/// over-connection prunes, granularity mismatch reshapes, and an
/// unattributed failure bypasses memory unless memory is already invisible,
/// in which case expanding is the only move left.
pub fn default_attribution(cause: &FailureCause, sub: &ActivatedSubgraph) -> EditDecision {
    match cause {
        FailureCause::UnderConnection { hints } => EditDecision::Expand { hints: hints.clone() },
        FailureCause::OverConnection { distractors } => {
            EditDecision::Prune { distractors: distractors.clone() }
        }
        FailureCause::GranularityMismatch { direction, target } => {
            EditDecision::Reshape { direction: *direction, target: *target }
        }
        FailureCause::Unattributed { .. } => {
            if sub.visibly_empty() {
                EditDecision::Expand { hints: Vec::new() }
            } else {
                EditDecision::Bypass
            }
        }
    }
}

/// Scores every unactivated semantic and procedural node against the step
/// text (plus any hint terms) and activates the best `budget` of them.
/// Procedural candidates are scored by the dense term alone. Returns the
/// added ids in activation order.
pub fn expand_links(
    sub: &mut ActivatedSubgraph,
    store: &impl GraphWrite,
    hints: &[String],
    budget: usize,
    cfg: &RetrievalConfig,
    suite: &AdapterSuite,
) -> Result<Vec<NodeId>, RefineError> {
    let graph = store.graph();
    let mut text = scoring_text(&sub.anchor.query, &sub.anchor.observation);
    if !hints.is_empty() {
        let joined = hints.join(" ");
        text = scoring_text(&text, &joined);
    }
    let stats = CorpusStats::from_semantic_layer(graph);
    let text_embedding = suite.embedder.embed(&text)?;

    let mut candidates: Vec<(NodeId, ScoreBreakdown)> = Vec::new();
    for node in graph.nodes() {
        if node.layer == LayerTag::Episodic || sub.contains(node.id) {
            continue;
        }
        let dense = crate::embedding::cosine(&text_embedding, &node.embedding)
            .map_err(|_| GraphError::DimensionMismatch {
                expected: text_embedding.dim(),
                got: node.embedding.dim(),
            })?;
        let breakdown = if node.layer == LayerTag::Semantic {
            let raw = bm25_score(&stats, &text, node.id, cfg.bm25);
            let sparse_norm = if cfg.squash_sparse { normalize_sparse(raw) } else { raw };
            let verifier = if suite.verifier.verify(&text, &node.content)? { 1.0 } else { 0.0 };
            ScoreBreakdown {
                dense,
                sparse_norm,
                verifier,
                total: cfg.w_dense * dense + cfg.w_sparse * sparse_norm + cfg.w_verifier * verifier,
            }
        } else {
            ScoreBreakdown { dense, sparse_norm: 0.0, verifier: 0.0, total: cfg.w_dense * dense }
        };
        candidates.push((node.id, breakdown));
    }
    candidates.sort_by(|a, b| {
        b.1.total.partial_cmp(&a.1.total).expect("scores are finite").then(a.0.cmp(&b.0))
    });
    candidates.truncate(budget);

    let mut added = Vec::new();
    for (id, score) in candidates {
        let layer = graph.node(id).expect("candidate came from the graph").layer;
        match layer {
            LayerTag::Semantic => sub.sem.push(id),
            LayerTag::Procedural => sub.proc.push(id),
            LayerTag::Episodic => unreachable!("episodic nodes are filtered out"),
        }
        sub.scores.insert(id, score);
        sub.edges.insert(SubgraphEdge::Activation { node: id });
        added.push(id);
    }
    Ok(added)
}

fn detach(sub: &mut ActivatedSubgraph, id: NodeId, removed: &mut Vec<SubgraphEdge>) -> bool {
    let was_present = sub.contains(id);
    sub.sem.retain(|&n| n != id);
    sub.epi.retain(|&n| n != id);
    sub.proc.retain(|&n| n != id);
    let stale: Vec<SubgraphEdge> = sub
        .edges
        .iter()
        .filter(|e| match e {
            SubgraphEdge::Activation { node } => *node == id,
            SubgraphEdge::Ground { src, dst } | SubgraphEdge::Distill { src, dst } => {
                *src == id || *dst == id
            }
        })
        .copied()
        .collect();
    for e in stale {
        sub.edges.remove(&e);
        removed.push(e);
    }
    was_present
}

/// Severs noise from the subgraph. With explicit distractors, every listed
/// node is dropped along with its incident subgraph edges; without, the
/// single lowest-scoring activated semantic node goes (ascending id on
/// ties). Removed edges are returned in ascending order.
pub fn prune_links(
    sub: &mut ActivatedSubgraph,
    distractors: Option<&[NodeId]>,
) -> Result<Vec<SubgraphEdge>, RefineError> {
    let mut removed = Vec::new();
    match distractors {
        Some(ids) => {
            let unique: std::collections::BTreeSet<NodeId> = ids.iter().copied().collect();
            let mut any = false;
            for id in unique {
                any |= detach(sub, id, &mut removed);
            }
            if !any {
                return Err(RefineError::EmptySubgraph);
            }
        }
        None => {
            let victim = sub
                .sem
                .iter()
                .copied()
                .min_by(|a, b| {
                    let sa = sub.scores.get(a).map(|s| s.total).unwrap_or(f64::NEG_INFINITY);
                    let sb = sub.scores.get(b).map(|s| s.total).unwrap_or(f64::NEG_INFINITY);
                    sa.partial_cmp(&sb).expect("scores are finite").then(a.cmp(b))
                })
                .ok_or(RefineError::EmptySubgraph)?;
            detach(sub, victim, &mut removed);
        }
    }
    removed.sort();
    Ok(removed)
}

/// Rewrites one activated node's content in the persistent graph via the
/// reshaper, bumping its version and recomputing its embedding. Edges are
/// untouched by construction.
pub fn reshape_unit(
    sub: &ActivatedSubgraph,
    store: &mut impl GraphWrite,
    target: NodeId,
    direction: ReshapeDirection,
    suite: &AdapterSuite,
) -> Result<String, RefineError> {
    if !sub.contains(target) {
        return Err(RefineError::UnknownTarget(target));
    }
    let content = store
        .graph()
        .node(target)
        .ok_or(RefineError::Context(ContextError::StaleNodeRef(target)))?
        .content
        .clone();
    let new_content = suite.reshaper.reshape(&content, direction)?;
    let embedding = suite.embedder.embed(&new_content)?;
    store.rewrite_content(target, &new_content, embedding)?;
    Ok(new_content)
}

fn apply_decision(
    sub: &mut ActivatedSubgraph,
    store: &mut impl GraphWrite,
    decision: EditDecision,
    cfg: &RetrievalConfig,
    suite: &AdapterSuite,
) -> Result<EditAction, RefineError> {
    match decision {
        EditDecision::Expand { hints } => {
            // Expansion is pointless while memory is hidden.
            sub.restore();
            let added = expand_links(sub, store, &hints, cfg.expand_budget, cfg, suite)?;
            Ok(EditAction::Expand { added })
        }
        EditDecision::Prune { distractors } => {
            let removed = prune_links(sub, distractors.as_deref())?;
            Ok(EditAction::Prune { removed })
        }
        EditDecision::Reshape { direction, target } => {
            let new_content = reshape_unit(sub, store, target, direction, suite)?;
            Ok(EditAction::Reshape { target, new_content })
        }
        EditDecision::Bypass => {
            sub.bypass();
            Ok(EditAction::Bypass)
        }
    }
}

/// Runs the execute/attribute/edit loop for one step: retrieve, serialize,
/// execute, and on failure apply one edit per round until success or the
/// round budget runs out. The trace records every attempt; adapter or
/// engine errors abort with the partial trace attached.
pub fn refine_loop(
    store: &mut impl GraphWrite,
    anchor: &StepAnchor,
    cfg: &RefinementConfig,
    rcfg: &RetrievalConfig,
    suite: &AdapterSuite,
) -> Result<RefineResult, Box<RefineAbort>> {
    let mut trace: RefinementTrace = Vec::new();
    let abort = |trace: RefinementTrace, error: RefineError| {
        Box::new(RefineAbort { trace, error })
    };

    let mut sub = match crate::context::form_initial_subgraph(
        store.graph(),
        anchor,
        rcfg,
        suite.embedder.as_ref(),
        suite.verifier.as_ref(),
    ) {
        Ok(s) => s,
        Err(e) => return Err(abort(trace, e.into())),
    };
    if cfg.bypass_first {
        sub.bypass();
    }

    for round in 0..=cfg.max_rounds {
        let context = match serialize_context(&sub, store.graph()) {
            Ok(c) => c,
            Err(e) => return Err(abort(trace, e.into())),
        };
        let feedback = match suite.executor.execute(&anchor.task_id, &context) {
            Ok(f) => f,
            Err(e) => return Err(abort(trace, e.into())),
        };
        match feedback {
            Feedback::Success => {
                trace.push(RefinementRound { round, feedback: Feedback::Success, action: None, context });
                return Ok(RefineResult { subgraph: sub, trace, outcome: TaskOutcome::Success });
            }
            Feedback::Failure { .. } => {
                if round == cfg.max_rounds {
                    trace.push(RefinementRound { round, feedback, action: None, context });
                    return Ok(RefineResult { subgraph: sub, trace, outcome: TaskOutcome::Failure });
                }
                let decision = match suite.attributor.attribute(&feedback, &sub) {
                    Ok(d) => d,
                    Err(e) => {
                        trace.push(RefinementRound { round, feedback, action: None, context });
                        return Err(abort(trace, e.into()));
                    }
                };
                let action = match apply_decision(&mut sub, store, decision, rcfg, suite) {
                    Ok(a) => a,
                    Err(e) => {
                        trace.push(RefinementRound { round, feedback, action: None, context });
                        return Err(abort(trace, e));
                    }
                };
                trace.push(RefinementRound { round, feedback, action: Some(action), context });
            }
        }
    }
    unreachable!("loop returns from within its final round");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::reference::reference_suite_with_dimension;
    use crate::adapters::Executor;
    use crate::context::form_initial_subgraph;
    use crate::embedding::embed;
    use crate::graph::{EdgeKind, MemoryGraph};
    use std::sync::Arc;

    const DIM: usize = 64;

    fn suite() -> AdapterSuite {
        reference_suite_with_dimension(7, DIM)
    }

    fn anchor(query: &str) -> StepAnchor {
        StepAnchor::new("task-x", 0, query, "")
    }

    fn graph_with_docs(docs: &[&str]) -> (MemoryGraph, Vec<NodeId>) {
        let mut g = MemoryGraph::new(DIM);
        let ids = docs
            .iter()
            .map(|d| g.add_node(LayerTag::Semantic, d, embed(d, DIM)).unwrap())
            .collect();
        (g, ids)
    }

    /// Executor scripted to return a fixed feedback sequence.
    struct ScriptedExecutor {
        script: std::sync::Mutex<Vec<Feedback>>,
    }

    impl ScriptedExecutor {
        fn new(mut script: Vec<Feedback>) -> Self {
            script.reverse();
            ScriptedExecutor { script: std::sync::Mutex::new(script) }
        }
    }

    impl Executor for ScriptedExecutor {
        fn execute(&self, _task: &str, _context: &ContextString) -> Result<Feedback, AdapterError> {
            Ok(self
                .script
                .lock()
                .unwrap()
                .pop()
                .unwrap_or(Feedback::Failure { cause: FailureCause::Unattributed { note: "script exhausted".into() } }))
        }
    }

    fn suite_with_executor(script: Vec<Feedback>) -> AdapterSuite {
        let mut s = suite();
        s.executor = Arc::new(ScriptedExecutor::new(script));
        s
    }

    #[test]
    fn attribution_mapping_table() {
        let sub = {
            let mut s = ActivatedSubgraph::empty(anchor("q"));
            s.sem.push(NodeId(0));
            s
        };
        assert_eq!(
            default_attribution(
                &FailureCause::UnderConnection { hints: vec!["athlete".into()] },
                &sub
            ),
            EditDecision::Expand { hints: vec!["athlete".into()] }
        );
        assert_eq!(
            default_attribution(&FailureCause::OverConnection { distractors: Some(vec![NodeId(7)]) }, &sub),
            EditDecision::Prune { distractors: Some(vec![NodeId(7)]) }
        );
        assert_eq!(
            default_attribution(
                &FailureCause::GranularityMismatch { direction: ReshapeDirection::Refine, target: NodeId(3) },
                &sub
            ),
            EditDecision::Reshape { direction: ReshapeDirection::Refine, target: NodeId(3) }
        );
        assert_eq!(
            default_attribution(&FailureCause::Unattributed { note: "??".into() }, &sub),
            EditDecision::Bypass
        );
        let mut bypassed = sub.clone();
        bypassed.bypass();
        assert_eq!(
            default_attribution(&FailureCause::Unattributed { note: "??".into() }, &bypassed),
            EditDecision::Expand { hints: vec![] }
        );
        let empty = ActivatedSubgraph::empty(anchor("q"));
        assert_eq!(
            default_attribution(&FailureCause::Unattributed { note: "??".into() }, &empty),
            EditDecision::Expand { hints: vec![] }
        );
    }

    #[test]
    fn reference_attributor_follows_default_mapping() {
        let s = suite();
        let sub = ActivatedSubgraph::empty(anchor("q"));
        let decision = s
            .attributor
            .attribute(
                &Feedback::Failure {
                    cause: FailureCause::UnderConnection { hints: vec!["x".into()] },
                },
                &sub,
            )
            .unwrap();
        assert_eq!(decision, EditDecision::Expand { hints: vec!["x".into()] });
        // Success carries nothing to attribute.
        let err = s.attributor.attribute(&Feedback::Success, &sub).unwrap_err();
        assert!(matches!(err, AdapterError::BadResponse(_)));
    }

    #[test]
    fn expand_no_candidates_is_identity() {
        let (mut g, ids) = graph_with_docs(&["only doc"]);
        let s = suite();
        let mut sub = ActivatedSubgraph::empty(anchor("only doc"));
        sub.sem = ids.clone();
        sub.edges.insert(SubgraphEdge::Activation { node: ids[0] });
        let before = sub.clone();
        let added =
            expand_links(&mut sub, &mut g, &[], 2, &RetrievalConfig::default(), &s).unwrap();
        assert!(added.is_empty());
        assert_eq!(sub, before);
    }

    #[test]
    fn expand_single_candidate_activates_it() {
        let (mut g, ids) = graph_with_docs(&["red fox", "blue cat"]);
        let s = suite();
        let mut sub = ActivatedSubgraph::empty(anchor("red fox"));
        sub.sem = vec![ids[0]];
        let added =
            expand_links(&mut sub, &mut g, &[], 2, &RetrievalConfig::default(), &s).unwrap();
        assert_eq!(added, vec![ids[1]]);
        assert!(sub.edges.contains(&SubgraphEdge::Activation { node: ids[1] }));
        assert!(sub.scores.contains_key(&ids[1]));
    }

    #[test]
    fn expand_matches_brute_force_top_budget() {
        let docs: Vec<String> = (0..50).map(|i| format!("doc{i} token{} token{}", i % 7, i % 11)).collect();
        let doc_refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        let (mut g, ids) = graph_with_docs(&doc_refs);
        let s = suite();
        let cfg = RetrievalConfig::default();
        let query = "token3 token5";
        let mut sub = ActivatedSubgraph::empty(anchor(query));
        sub.sem = vec![ids[0], ids[1]];

        // Brute force: score all unactivated nodes identically and take 2.
        let stats = CorpusStats::from_semantic_layer(&g);
        let qe = embed(query, DIM);
        let mut expect: Vec<(f64, NodeId)> = ids[2..]
            .iter()
            .map(|&id| {
                let n = g.node(id).unwrap();
                let dense = crate::embedding::cosine(&qe, &n.embedding).unwrap();
                let sp = normalize_sparse(bm25_score(&stats, query, id, cfg.bm25));
                let v = if s.verifier.verify(query, &n.content).unwrap() { 1.0 } else { 0.0 };
                (dense + sp + v, id)
            })
            .collect();
        expect.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<NodeId> = expect.into_iter().take(2).map(|(_, id)| id).collect();

        let added = expand_links(&mut sub, &mut g, &[], 2, &cfg, &s).unwrap();
        assert_eq!(added, expect);
    }

    #[test]
    fn expand_hints_steer_scoring() {
        let (mut g, ids) = graph_with_docs(&["zebra stripes", "fox den"]);
        let s = suite();
        let mut sub = ActivatedSubgraph::empty(anchor("unrelated query"));
        let added = expand_links(
            &mut sub,
            &mut g,
            &["zebra".into(), "stripes".into()],
            1,
            &RetrievalConfig::default(),
            &s,
        )
        .unwrap();
        assert_eq!(added, vec![ids[0]]);
    }

    #[test]
    fn prune_explicit_distractor() {
        let (g, ids) = graph_with_docs(&["keep me", "drop me"]);
        let s = suite();
        let mut sub = form_initial_subgraph(
            store_graph(&g),
            &anchor("keep me drop me"),
            &RetrievalConfig::default(),
            s.embedder.as_ref(),
            s.verifier.as_ref(),
        )
        .unwrap();
        assert_eq!(sub.sem.len(), 2);
        let removed = prune_links(&mut sub, Some(&[ids[1]])).unwrap();
        assert_eq!(removed, vec![SubgraphEdge::Activation { node: ids[1] }]);
        assert_eq!(sub.sem, vec![ids[0]]);
        let _ = g;
    }

    fn store_graph(g: &MemoryGraph) -> &MemoryGraph {
        g
    }

    #[test]
    fn prune_default_takes_lowest_stored_score() {
        let mut sub = ActivatedSubgraph::empty(anchor("q"));
        sub.sem = vec![NodeId(0), NodeId(1)];
        sub.scores.insert(
            NodeId(0),
            ScoreBreakdown { dense: 1.0, sparse_norm: 0.5, verifier: 1.0, total: 2.5 },
        );
        sub.scores.insert(
            NodeId(1),
            ScoreBreakdown { dense: 0.2, sparse_norm: 0.0, verifier: 0.0, total: 0.2 },
        );
        sub.edges.insert(SubgraphEdge::Activation { node: NodeId(0) });
        sub.edges.insert(SubgraphEdge::Activation { node: NodeId(1) });
        let removed = prune_links(&mut sub, None).unwrap();
        assert_eq!(removed, vec![SubgraphEdge::Activation { node: NodeId(1) }]);
        assert_eq!(sub.sem, vec![NodeId(0)]);
    }

    #[test]
    fn prune_tie_breaks_ascending_id() {
        let mut sub = ActivatedSubgraph::empty(anchor("q"));
        sub.sem = vec![NodeId(4), NodeId(2)];
        for id in [NodeId(4), NodeId(2)] {
            sub.scores.insert(id, ScoreBreakdown { dense: 0.5, sparse_norm: 0.0, verifier: 0.0, total: 0.5 });
            sub.edges.insert(SubgraphEdge::Activation { node: id });
        }
        let removed = prune_links(&mut sub, None).unwrap();
        assert_eq!(removed, vec![SubgraphEdge::Activation { node: NodeId(2) }]);
    }

    #[test]
    fn prune_nothing_prunable_errors() {
        let mut sub = ActivatedSubgraph::empty(anchor("q"));
        assert!(matches!(prune_links(&mut sub, None), Err(RefineError::EmptySubgraph)));
        assert!(matches!(
            prune_links(&mut sub, Some(&[NodeId(9)])),
            Err(RefineError::EmptySubgraph)
        ));
    }

    #[test]
    fn expand_then_prune_restores_edge_set() {
        let (mut g, ids) = graph_with_docs(&["red fox", "blue cat", "green owl"]);
        let s = suite();
        let cfg = RetrievalConfig { k_sem: 1, ..RetrievalConfig::default() };
        let mut sub = form_initial_subgraph(
            &g,
            &anchor("red fox"),
            &cfg,
            s.embedder.as_ref(),
            s.verifier.as_ref(),
        )
        .unwrap();
        assert_eq!(sub.sem, vec![ids[0]]);
        let edges_before = sub.edges.clone();
        let sem_before = sub.sem.clone();
        let added = expand_links(&mut sub, &mut g, &[], 1, &cfg, &s).unwrap();
        assert_eq!(added.len(), 1);
        prune_links(&mut sub, Some(&added)).unwrap();
        assert_eq!(sub.edges, edges_before);
        assert_eq!(sub.sem, sem_before);
    }

    #[test]
    fn reshape_rewrites_in_place_and_preserves_edges() {
        let mut g = MemoryGraph::new(DIM);
        let s = g.add_node(LayerTag::Semantic, "a b c d", embed("a b c d", DIM)).unwrap();
        let e = g.add_node(LayerTag::Episodic, "trace", embed("trace", DIM)).unwrap();
        g.add_edge(s, e, EdgeKind::Ground).unwrap();
        let su = suite();
        let mut sub = ActivatedSubgraph::empty(anchor("q"));
        sub.sem.push(s);

        let edges_before: Vec<_> = g.edges().copied().collect();
        let new_content =
            reshape_unit(&sub, &mut g, s, ReshapeDirection::Abstract, &su).unwrap();
        assert_eq!(new_content, "a b");
        let node = g.node(s).unwrap();
        assert_eq!(node.content, "a b");
        assert_eq!(node.version, 1);
        assert_eq!(node.embedding, embed("a b", DIM).quantized());
        let edges_after: Vec<_> = g.edges().copied().collect();
        assert_eq!(edges_before, edges_after);

        let err = reshape_unit(&sub, &mut g, NodeId(99), ReshapeDirection::Refine, &su).unwrap_err();
        assert!(matches!(err, RefineError::UnknownTarget(NodeId(99))));
    }

    #[test]
    fn loop_success_first_try_has_single_round() {
        let (mut g, _) = graph_with_docs(&["doc"]);
        let s = suite_with_executor(vec![Feedback::Success]);
        let res = refine_loop(
            &mut g,
            &anchor("doc"),
            &RefinementConfig::default(),
            &RetrievalConfig::default(),
            &s,
        )
        .unwrap();
        assert_eq!(res.outcome, TaskOutcome::Success);
        assert_eq!(res.trace.len(), 1);
        assert_eq!(res.trace[0].round, 0);
        assert!(res.trace[0].action.is_none());
    }

    #[test]
    fn loop_never_succeeding_runs_exactly_max_rounds_edits() {
        let (mut g, _) = graph_with_docs(&["doc a", "doc b", "doc c"]);
        let fail = Feedback::Failure { cause: FailureCause::Unattributed { note: "no".into() } };
        let s = suite_with_executor(vec![fail.clone(); 10]);
        let cfg = RefinementConfig { max_rounds: 5, ..RefinementConfig::default() };
        let res = refine_loop(&mut g, &anchor("doc"), &cfg, &RetrievalConfig::default(), &s).unwrap();
        assert_eq!(res.outcome, TaskOutcome::Failure);
        assert_eq!(res.trace.len(), 6);
        let edits = res.trace.iter().filter(|r| r.action.is_some()).count();
        assert_eq!(edits, 5);
        assert!(res.trace.last().unwrap().action.is_none());
    }

    #[test]
    fn loop_zero_rounds_is_single_attempt() {
        let (mut g, _) = graph_with_docs(&["doc"]);
        let fail = Feedback::Failure { cause: FailureCause::Unattributed { note: "no".into() } };
        let s = suite_with_executor(vec![fail]);
        let cfg = RefinementConfig { max_rounds: 0, ..RefinementConfig::default() };
        let res = refine_loop(&mut g, &anchor("doc"), &cfg, &RetrievalConfig::default(), &s).unwrap();
        assert_eq!(res.outcome, TaskOutcome::Failure);
        assert_eq!(res.trace.len(), 1);
        assert!(res.trace[0].action.is_none());
    }

    #[test]
    fn loop_expand_recovers_missing_fact() {
        // The executor demands the token "hidden" in the context; round 0
        // misses it, the hint-driven expansion pulls the right doc in.
        struct NeedsToken;
        impl Executor for NeedsToken {
            fn execute(&self, _t: &str, ctx: &ContextString) -> Result<Feedback, AdapterError> {
                if crate::embedding::tokenize(&ctx.text).iter().any(|t| t == "hidden") {
                    Ok(Feedback::Success)
                } else {
                    Ok(Feedback::Failure {
                        cause: FailureCause::UnderConnection { hints: vec!["hidden".into(), "cavern".into()] },
                    })
                }
            }
        }
        let (mut g, ids) = graph_with_docs(&["surface fact", "hidden cavern fact"]);
        let mut s = suite();
        s.executor = Arc::new(NeedsToken);
        let cfg = RetrievalConfig { k_sem: 1, ..RetrievalConfig::default() };
        let res = refine_loop(
            &mut g,
            &anchor("surface fact"),
            &RefinementConfig::default(),
            &cfg,
            &s,
        )
        .unwrap();
        assert_eq!(res.outcome, TaskOutcome::Success);
        assert_eq!(res.trace.len(), 2);
        match res.trace[0].action.as_ref().unwrap() {
            EditAction::Expand { added } => assert!(added.contains(&ids[1])),
            other => panic!("expected expand, got {other:?}"),
        }
    }

    #[test]
    fn loop_bypass_then_expand_restores_memory() {
        let (mut g, _) = graph_with_docs(&["doc one", "doc two"]);
        let unattributed = Feedback::Failure { cause: FailureCause::Unattributed { note: "?".into() } };
        // Round 0 fails unattributed (subgraph visible -> bypass); round 1
        // fails unattributed again (bypassed -> expand restores); round 2
        // succeeds.
        let s = suite_with_executor(vec![unattributed.clone(), unattributed, Feedback::Success]);
        let res = refine_loop(
            &mut g,
            &anchor("doc"),
            &RefinementConfig::default(),
            &RetrievalConfig::default(),
            &s,
        )
        .unwrap();
        assert_eq!(res.outcome, TaskOutcome::Success);
        assert_eq!(res.trace.len(), 3);
        assert_eq!(res.trace[0].action, Some(EditAction::Bypass));
        // The bypassed round serializes without memory sections.
        assert!(!res.trace[1].context.text.contains("[SEMANTIC]"));
        assert!(matches!(res.trace[1].action, Some(EditAction::Expand { .. })));
        assert!(res.trace[2].context.text.contains("[SEMANTIC]"));
        assert!(!res.subgraph.bypassed);
    }

    #[test]
    fn loop_bypass_first_hides_round_zero() {
        let (mut g, _) = graph_with_docs(&["doc one"]);
        let s = suite_with_executor(vec![Feedback::Success]);
        let cfg = RefinementConfig { bypass_first: true, ..RefinementConfig::default() };
        let res = refine_loop(&mut g, &anchor("doc one"), &cfg, &RetrievalConfig::default(), &s).unwrap();
        assert!(!res.trace[0].context.text.contains("[SEMANTIC]"));
        assert_eq!(res.trace[0].context.text, "[QUERY]\ndoc one\n[OBSERVATION]\n\n");
    }

    #[test]
    fn adapter_error_aborts_with_partial_trace() {
        struct Flaky {
            calls: std::sync::Mutex<usize>,
        }
        impl Executor for Flaky {
            fn execute(&self, _t: &str, _c: &ContextString) -> Result<Feedback, AdapterError> {
                let mut calls = self.calls.lock().unwrap();
                *calls += 1;
                if *calls == 1 {
                    Ok(Feedback::Failure { cause: FailureCause::Unattributed { note: "x".into() } })
                } else {
                    Err(AdapterError::Timeout { millis: 10 })
                }
            }
        }
        let (mut g, _) = graph_with_docs(&["doc"]);
        let mut s = suite();
        s.executor = Arc::new(Flaky { calls: std::sync::Mutex::new(0) });
        let abort = refine_loop(
            &mut g,
            &anchor("doc"),
            &RefinementConfig::default(),
            &RetrievalConfig::default(),
            &s,
        )
        .unwrap_err();
        assert_eq!(abort.trace.len(), 1);
        assert!(matches!(abort.error, RefineError::Adapter(AdapterError::Timeout { .. })));
    }

    #[test]
    fn graph_validates_after_every_loop() {
        let (mut g, ids) = graph_with_docs(&["a b c d", "x y"]);
        let fail = Feedback::Failure {
            cause: FailureCause::GranularityMismatch {
                direction: ReshapeDirection::Abstract,
                target: ids[0],
            },
        };
        let s = suite_with_executor(vec![fail, Feedback::Success]);
        let res = refine_loop(
            &mut g,
            &anchor("a b c d"),
            &RefinementConfig::default(),
            &RetrievalConfig::default(),
            &s,
        )
        .unwrap();
        assert_eq!(res.outcome, TaskOutcome::Success);
        assert!(g.validate().is_empty());
        assert_eq!(g.node(ids[0]).unwrap().content, "a b");
    }
}

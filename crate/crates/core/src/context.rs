//! Step-local activated subgraphs and their context serialization.
//!
//! Each reasoning step assembles a subgraph of retrieved nodes around a step
//! anchor and flattens it into a prompt string. The string format is fixed
//! and escaped so that distinct visible subgraph states always serialize to
//! distinct bytes, which downstream tests and the synthetic executor rely on.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{Embedder, Verifier};
use crate::graph::{Direction, EdgeKind, LayerTag, MemoryGraph, NodeId};
use crate::retrieval::{
    retrieve_episodic, retrieve_semantic, scoring_text, CorpusStats, RetrievalConfig,
    RetrievalError, ScoreBreakdown,
};

/// Identity of one reasoning step: which task, which step, and the step's
/// query and observation texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAnchor {
    pub task_id: String,
    pub step: u64,
    pub query: String,
    pub observation: String,
}

impl StepAnchor {
    pub fn new(task_id: &str, step: u64, query: &str, observation: &str) -> Self {
        StepAnchor {
            task_id: task_id.to_owned(),
            step,
            query: query.to_owned(),
            observation: observation.to_owned(),
        }
    }
}

/// Edges held by an activated subgraph. Activation edges connect the step
/// anchor (not a graph node) to an activated node, so they carry only the
/// target id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SubgraphEdge {
    Activation { node: NodeId },
    Ground { src: NodeId, dst: NodeId },
    Distill { src: NodeId, dst: NodeId },
}

#[derive(Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("subgraph references node {0}, which is no longer in the graph")]
    StaleNodeRef(NodeId),
}

/// The step-local subgraph: ordered layer lists, the edge set, stored
/// retrieval scores, and the bypass flag. Bypassing hides all three node
/// lists from serialization without discarding them, so a later round can
/// restore memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivatedSubgraph {
    pub anchor: StepAnchor,
    pub sem: Vec<NodeId>,
    pub epi: Vec<NodeId>,
    pub proc: Vec<NodeId>,
    pub edges: BTreeSet<SubgraphEdge>,
    pub bypassed: bool,
    /// Hybrid score breakdown for every semantic (and expansion-added
    /// procedural) node, kept so pruning can drop the weakest member.
    pub scores: BTreeMap<NodeId, ScoreBreakdown>,
    /// Cosine similarity of each activated episode to the step text.
    pub epi_sim: BTreeMap<NodeId, f64>,
}

impl ActivatedSubgraph {
    pub fn empty(anchor: StepAnchor) -> Self {
        ActivatedSubgraph {
            anchor,
            sem: Vec::new(),
            epi: Vec::new(),
            proc: Vec::new(),
            edges: BTreeSet::new(),
            bypassed: false,
            scores: BTreeMap::new(),
            epi_sim: BTreeMap::new(),
        }
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.sem.contains(&id) || self.epi.contains(&id) || self.proc.contains(&id)
    }

    /// True when serialization would show no memory sections: either the
    /// subgraph is bypassed or all three lists are empty.
    pub fn visibly_empty(&self) -> bool {
        self.bypassed || (self.sem.is_empty() && self.epi.is_empty() && self.proc.is_empty())
    }

    /// Hides memory from serialization. Idempotent.
    pub fn bypass(&mut self) {
        self.bypassed = true;
    }

    /// Makes memory visible again. Idempotent.
    pub fn restore(&mut self) {
        self.bypassed = false;
    }
}

/// Builds the initial subgraph for a step: top semantic nodes by hybrid
/// score, top episodes by cosine (the task's own episodes excluded), and
/// the skills those episodes distill into. Every selected node gets an
/// activation edge; traversed distill edges are recorded as well.
pub fn form_initial_subgraph(
    graph: &MemoryGraph,
    anchor: &StepAnchor,
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
    verifier: &dyn Verifier,
) -> Result<ActivatedSubgraph, RetrievalError> {
    let stats = CorpusStats::from_semantic_layer(graph);
    let step_embedding = embedder.embed(&scoring_text(&anchor.query, &anchor.observation))?;

    let mut sub = ActivatedSubgraph::empty(anchor.clone());
    for hit in retrieve_semantic(
        graph,
        &stats,
        &anchor.query,
        &anchor.observation,
        &step_embedding,
        verifier,
        cfg,
    )? {
        sub.sem.push(hit.id);
        sub.scores.insert(hit.id, hit.score);
        sub.edges.insert(SubgraphEdge::Activation { node: hit.id });
    }
    for (id, sim) in retrieve_episodic(graph, &step_embedding, Some(&anchor.task_id), cfg)? {
        sub.epi.push(id);
        sub.epi_sim.insert(id, sim);
        sub.edges.insert(SubgraphEdge::Activation { node: id });
    }
    for id in crate::retrieval::inherit_procedural(graph, &sub.epi)? {
        sub.proc.push(id);
        sub.edges.insert(SubgraphEdge::Activation { node: id });
    }
    // Record which distill edges were traversed to reach each skill.
    for &e in &sub.epi {
        for p in graph.neighbors(e, EdgeKind::Distill, Direction::Out)? {
            if sub.proc.contains(&p) {
                sub.edges.insert(SubgraphEdge::Distill { src: e, dst: p });
            }
        }
    }
    Ok(sub)
}

/// The serialized prompt plus an ordered record of which node produced each
/// serialized line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextString {
    pub text: String,
    pub provenance: Vec<(LayerTag, NodeId)>,
}

/// Escapes text for single-line embedding: backslashes first, then
/// newlines, so the mapping is injective and reversible.
pub fn escape_line(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\n', "\\n")
}

/// Inverse of `escape_line`.
pub fn unescape_line(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

const SECTION_QUERY: &str = "[QUERY]";
const SECTION_OBSERVATION: &str = "[OBSERVATION]";
const SECTION_SEMANTIC: &str = "[SEMANTIC]";
const SECTION_EPISODIC: &str = "[EPISODIC]";
const SECTION_PROCEDURAL: &str = "[PROCEDURAL]";

/// Flattens a subgraph into the fixed five-section prompt: query,
/// observation, then one section per layer with one `- #id content` line
/// per node in stored order. A bypassed subgraph emits only the query and
/// observation sections.
pub fn serialize_context(
    sub: &ActivatedSubgraph,
    graph: &MemoryGraph,
) -> Result<ContextString, ContextError> {
    let mut text = String::new();
    let mut provenance = Vec::new();
    text.push_str(SECTION_QUERY);
    text.push('\n');
    text.push_str(&escape_line(&sub.anchor.query));
    text.push('\n');
    text.push_str(SECTION_OBSERVATION);
    text.push('\n');
    text.push_str(&escape_line(&sub.anchor.observation));
    text.push('\n');
    if !sub.bypassed {
        for (header, layer, ids) in [
            (SECTION_SEMANTIC, LayerTag::Semantic, &sub.sem),
            (SECTION_EPISODIC, LayerTag::Episodic, &sub.epi),
            (SECTION_PROCEDURAL, LayerTag::Procedural, &sub.proc),
        ] {
            text.push_str(header);
            text.push('\n');
            for &id in ids {
                let node = graph.node(id).ok_or(ContextError::StaleNodeRef(id))?;
                text.push_str(&format!("- #{id} {}\n", escape_line(&node.content)));
                provenance.push((layer, id));
            }
        }
    }
    Ok(ContextString { text, provenance })
}

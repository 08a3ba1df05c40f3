//! Typed three-layer memory graph.
//!
//! Layers: semantic facts, episodic trajectories, procedural skills.
//! Edge kinds are total: Ground is semantic -> episodic, Distill is
//! episodic -> procedural, Activation (a committed step anchor) must leave an
//! episodic node. Node ids are assigned monotonically and never reused, which
//! keeps every downstream tie-break deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Semantic,
    Episodic,
    Procedural,
}

impl LayerTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::Semantic => "semantic",
            LayerTag::Episodic => "episodic",
            LayerTag::Procedural => "procedural",
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Ground,
    Distill,
    Activation,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Ground => "ground",
            EdgeKind::Distill => "distill",
            EdgeKind::Activation => "activation",
        }
    }

    /// Edge-kind typing table. Activation edges live in activated subgraphs;
    /// when committed into the persistent graph their source is the task's
    /// episode node, hence the episodic-source rule.
    pub fn permits(self, src: LayerTag, dst: LayerTag) -> bool {
        match self {
            EdgeKind::Ground => src == LayerTag::Semantic && dst == LayerTag::Episodic,
            EdgeKind::Distill => src == LayerTag::Episodic && dst == LayerTag::Procedural,
            EdgeKind::Activation => src == LayerTag::Episodic,
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryNode {
    pub id: NodeId,
    pub layer: LayerTag,
    pub content: String,
    pub embedding: EmbeddingVector,
    /// Rewrite counter; starts at 0, bumped by every content rewrite.
    pub version: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("{layer} nodes require non-empty content")]
    EmptyContent { layer: LayerTag },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("edge {src} -> {dst} ({kind}) already exists")]
    DuplicateEdge { src: NodeId, dst: NodeId, kind: EdgeKind },
    #[error("edge {src} -> {dst} ({kind}) does not exist")]
    UnknownEdge { src: NodeId, dst: NodeId, kind: EdgeKind },
    #[error("{kind} edge not allowed from {src_layer} to {dst_layer}")]
    KindViolation {
        kind: EdgeKind,
        src_layer: LayerTag,
        dst_layer: LayerTag,
    },
}

/// A structural invariant broken inside the graph, as reported by `validate`.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingEndpoint { src: NodeId, dst: NodeId, kind: EdgeKind },
    KindViolation { src: NodeId, dst: NodeId, kind: EdgeKind },
    WrongDimension { node: NodeId, expected: usize, got: usize },
    EmptyContent { node: NodeId, layer: LayerTag },
    NotNormalized { node: NodeId, norm: f64 },
    IdAboveCounter { node: NodeId, next_id: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingEndpoint { src, dst, kind } => {
                write!(f, "edge {src} -> {dst} ({kind}) references a missing node")
            }
            Violation::KindViolation { src, dst, kind } => {
                write!(f, "edge {src} -> {dst} breaks the {kind} typing rule")
            }
            Violation::WrongDimension { node, expected, got } => {
                write!(f, "node {node} embedding has dim {got}, graph expects {expected}")
            }
            Violation::EmptyContent { node, layer } => {
                write!(f, "{layer} node {node} has empty content")
            }
            Violation::NotNormalized { node, norm } => {
                write!(f, "node {node} embedding norm {norm} is neither 0 nor 1")
            }
            Violation::IdAboveCounter { node, next_id } => {
                write!(f, "node {node} is not below the id counter {next_id}")
            }
        }
    }
}

/// Mutation surface shared by the bare graph and the event-logged store, so
/// refinement and consolidation can run against either.
pub trait GraphWrite {
    fn graph(&self) -> &MemoryGraph;
    fn add_node(
        &mut self,
        layer: LayerTag,
        content: &str,
        embedding: EmbeddingVector,
    ) -> Result<NodeId, GraphError>;
    fn add_node_with_meta(
        &mut self,
        layer: LayerTag,
        content: &str,
        embedding: EmbeddingVector,
        meta: BTreeMap<String, String>,
    ) -> Result<NodeId, GraphError>;
    fn add_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind) -> Result<(), GraphError>;
    fn remove_node(&mut self, id: NodeId) -> Result<(), GraphError>;
    fn remove_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind)
        -> Result<(), GraphError>;
    fn rewrite_content(
        &mut self,
        id: NodeId,
        content: &str,
        embedding: EmbeddingVector,
    ) -> Result<(), GraphError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGraph {
    dimension: usize,
    next_id: u64,
    nodes: BTreeMap<NodeId, MemoryNode>,
    edges: BTreeSet<(NodeId, NodeId, EdgeKind)>,
}

impl MemoryGraph {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "graph dimension must be positive");
        MemoryGraph {
            dimension,
            next_id: 0,
            nodes: BTreeMap::new(),
            edges: BTreeSet::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn node(&self, id: NodeId) -> Option<&MemoryNode> {
        self.nodes.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &MemoryNode> {
        self.nodes.values()
    }

    /// Ids of one layer, ascending.
    pub fn layer_ids(&self, layer: LayerTag) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.layer == layer)
            .map(|n| n.id)
            .collect()
    }

    /// Edges as (src, dst, kind) in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = &(NodeId, NodeId, EdgeKind)> {
        self.edges.iter()
    }

    pub fn has_edge(&self, src: NodeId, dst: NodeId, kind: EdgeKind) -> bool {
        self.edges.contains(&(src, dst, kind))
    }

    fn check_content(layer: LayerTag, content: &str) -> Result<(), GraphError> {
        // Episodic content may be empty (an empty trajectory); facts and
        // skills may not.
        if content.is_empty() && layer != LayerTag::Episodic {
            return Err(GraphError::EmptyContent { layer });
        }
        Ok(())
    }

    fn check_dimension(&self, embedding: &EmbeddingVector) -> Result<(), GraphError> {
        if embedding.dim() != self.dimension {
            return Err(GraphError::DimensionMismatch {
                expected: self.dimension,
                got: embedding.dim(),
            });
        }
        Ok(())
    }

    pub fn add_node(
        &mut self,
        layer: LayerTag,
        content: &str,
        embedding: EmbeddingVector,
    ) -> Result<NodeId, GraphError> {
        self.add_node_with_meta(layer, content, embedding, BTreeMap::new())
    }

    pub fn add_node_with_meta(
        &mut self,
        layer: LayerTag,
        content: &str,
        embedding: EmbeddingVector,
        meta: BTreeMap<String, String>,
    ) -> Result<NodeId, GraphError> {
        Self::check_content(layer, content)?;
        self.check_dimension(&embedding)?;
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(
            id,
            MemoryNode {
                id,
                layer,
                content: content.to_owned(),
                embedding: embedding.quantized(),
                version: 0,
                meta,
            },
        );
        Ok(id)
    }

    pub fn add_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind) -> Result<(), GraphError> {
        let src_layer = self.node(src).ok_or(GraphError::UnknownNode(src))?.layer;
        let dst_layer = self.node(dst).ok_or(GraphError::UnknownNode(dst))?.layer;
        if !kind.permits(src_layer, dst_layer) {
            return Err(GraphError::KindViolation { kind, src_layer, dst_layer });
        }
        if !self.edges.insert((src, dst, kind)) {
            return Err(GraphError::DuplicateEdge { src, dst, kind });
        }
        Ok(())
    }

    /// Removes the node and every incident edge.
    pub fn remove_node(&mut self, id: NodeId) -> Result<(), GraphError> {
        if self.nodes.remove(&id).is_none() {
            return Err(GraphError::UnknownNode(id));
        }
        self.edges.retain(|(s, d, _)| *s != id && *d != id);
        Ok(())
    }

    pub fn remove_edge(
        &mut self,
        src: NodeId,
        dst: NodeId,
        kind: EdgeKind,
    ) -> Result<(), GraphError> {
        if !self.edges.remove(&(src, dst, kind)) {
            return Err(GraphError::UnknownEdge { src, dst, kind });
        }
        Ok(())
    }

    /// Replaces a node's content and embedding, bumping its version.
    pub fn rewrite_content(
        &mut self,
        id: NodeId,
        content: &str,
        embedding: EmbeddingVector,
    ) -> Result<(), GraphError> {
        let layer = self.node(id).ok_or(GraphError::UnknownNode(id))?.layer;
        Self::check_content(layer, content)?;
        self.check_dimension(&embedding)?;
        let node = self.nodes.get_mut(&id).expect("checked above");
        node.content = content.to_owned();
        node.embedding = embedding.quantized();
        node.version += 1;
        Ok(())
    }

    /// Neighbor ids along edges of one kind, ascending.
    pub fn neighbors(
        &self,
        id: NodeId,
        kind: EdgeKind,
        direction: Direction,
    ) -> Result<Vec<NodeId>, GraphError> {
        if !self.contains(id) {
            return Err(GraphError::UnknownNode(id));
        }
        let out: BTreeSet<NodeId> = match direction {
            Direction::Out => self
                .edges
                .range((id, NodeId(0), EdgeKind::Ground)..=(id, NodeId(u64::MAX), EdgeKind::Activation))
                .filter(|(_, _, k)| *k == kind)
                .map(|(_, d, _)| *d)
                .collect(),
            Direction::In => self
                .edges
                .iter()
                .filter(|(_, d, k)| *d == id && *k == kind)
                .map(|(s, _, _)| *s)
                .collect(),
        };
        Ok(out.into_iter().collect())
    }

    /// Full structural audit; an empty result means every invariant holds.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for node in self.nodes.values() {
            if node.id.0 >= self.next_id {
                out.push(Violation::IdAboveCounter { node: node.id, next_id: self.next_id });
            }
            if node.embedding.dim() != self.dimension {
                out.push(Violation::WrongDimension {
                    node: node.id,
                    expected: self.dimension,
                    got: node.embedding.dim(),
                });
            } else {
                let norm = node.embedding.l2_norm();
                if norm != 0.0 && (norm - 1.0).abs() > 1e-6 {
                    out.push(Violation::NotNormalized { node: node.id, norm });
                }
            }
            if node.content.is_empty() && node.layer != LayerTag::Episodic {
                out.push(Violation::EmptyContent { node: node.id, layer: node.layer });
            }
        }
        for (src, dst, kind) in &self.edges {
            match (self.node(*src), self.node(*dst)) {
                (Some(s), Some(d)) => {
                    if !kind.permits(s.layer, d.layer) {
                        out.push(Violation::KindViolation { src: *src, dst: *dst, kind: *kind });
                    }
                }
                _ => out.push(Violation::MissingEndpoint { src: *src, dst: *dst, kind: *kind }),
            }
        }
        out
    }

    /// Rebuilds a graph from raw parts, e.g. a decoded snapshot. Callers are
    /// expected to `validate` afterwards.
    pub fn from_parts(
        dimension: usize,
        next_id: u64,
        nodes: Vec<MemoryNode>,
        edges: Vec<(NodeId, NodeId, EdgeKind)>,
    ) -> Self {
        MemoryGraph {
            dimension,
            next_id,
            nodes: nodes.into_iter().map(|n| (n.id, n)).collect(),
            edges: edges.into_iter().collect(),
        }
    }
}

impl GraphWrite for MemoryGraph {
    fn graph(&self) -> &MemoryGraph {
        self
    }

    fn add_node(
        &mut self,
        layer: LayerTag,
        content: &str,
        embedding: EmbeddingVector,
    ) -> Result<NodeId, GraphError> {
        MemoryGraph::add_node(self, layer, content, embedding)
    }

    fn add_node_with_meta(
        &mut self,
        layer: LayerTag,
        content: &str,
        embedding: EmbeddingVector,
        meta: BTreeMap<String, String>,
    ) -> Result<NodeId, GraphError> {
        MemoryGraph::add_node_with_meta(self, layer, content, embedding, meta)
    }

    fn add_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind) -> Result<(), GraphError> {
        MemoryGraph::add_edge(self, src, dst, kind)
    }

    fn remove_node(&mut self, id: NodeId) -> Result<(), GraphError> {
        MemoryGraph::remove_node(self, id)
    }

    fn remove_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind) -> Result<(), GraphError> {
        MemoryGraph::remove_edge(self, src, dst, kind)
    }

    fn rewrite_content(
        &mut self,
        id: NodeId,
        content: &str,
        embedding: EmbeddingVector,
    ) -> Result<(), GraphError> {
        MemoryGraph::rewrite_content(self, id, content, embedding)
    }
}

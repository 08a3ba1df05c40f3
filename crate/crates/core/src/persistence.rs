//! Durable storage: canonical snapshots plus an append-only event log.
//!
//! Two file formats, both JSON:
//!
//! `*.fxm.log` — one event per line, `{"seq": <n>, "kind": <op>, ...}` with
//! seq gap-free from its first record. Events carry the exact (quantized)
//! embeddings that entered the graph, so replay rebuilds identical state no
//! matter which embedder produced them.
//!
//! `*.fxm.json` — a full snapshot on a single line with a fixed field
//! order, so identical graphs serialize to identical bytes. A snapshot
//! written by a store remembers the log position it covers
//! (`last_event_seq`); opening a store loads the snapshot and applies only
//! the log tail past it. A log that starts at seq 1 is always sufficient by
//! itself, and `replay` is the independent read path used to cross-check
//! snapshots.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::graph::{EdgeKind, GraphError, GraphWrite, LayerTag, MemoryGraph, MemoryNode, NodeId, Violation};

pub const FORMAT_VERSION: u32 = 1;
pub const SNAPSHOT_SUFFIX: &str = ".fxm.json";
pub const LOG_SUFFIX: &str = ".fxm.log";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event seq {got} after {last}; the log must be gap-free")]
    SeqGap { last: u64, got: u64 },
    #[error("snapshot has format version {got}, this build reads {want}")]
    FormatVersionMismatch { want: u32, got: u32 },
    #[error("snapshot failed validation: {}", format_violations(.0))]
    ValidateFailed(Vec<Violation>),
    #[error("store holds dimension {got}, caller expected {want}")]
    Dimension { want: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn format_violations(violations: &[Violation]) -> String {
    violations.iter().map(Violation::to_string).collect::<Vec<_>>().join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io { path: path.to_path_buf(), source }
}

/// One graph mutation, tagged for the log. Payloads mirror the write-trait
/// arguments, plus the id the graph assigned, so replay can cross-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphOp {
    AddNode {
        id: NodeId,
        layer: LayerTag,
        content: String,
        embedding: EmbeddingVector,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        meta: BTreeMap<String, String>,
    },
    RemoveNode {
        id: NodeId,
    },
    AddEdge {
        src: NodeId,
        dst: NodeId,
        edge: EdgeKind,
    },
    RemoveEdge {
        src: NodeId,
        dst: NodeId,
        edge: EdgeKind,
    },
    RewriteContent {
        id: NodeId,
        content: String,
        embedding: EmbeddingVector,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub op: GraphOp,
}

fn apply_op(graph: &mut MemoryGraph, op: &GraphOp, seq: u64) -> Result<(), PersistError> {
    match op {
        GraphOp::AddNode { id, layer, content, embedding, meta } => {
            let assigned =
                graph.add_node_with_meta(*layer, content, embedding.clone(), meta.clone())?;
            if assigned != *id {
                return Err(PersistError::Parse {
                    line: seq as usize,
                    message: format!("event {seq} expected node {id}, graph assigned {assigned}"),
                });
            }
            Ok(())
        }
        GraphOp::RemoveNode { id } => Ok(graph.remove_node(*id)?),
        GraphOp::AddEdge { src, dst, edge } => Ok(graph.add_edge(*src, *dst, *edge)?),
        GraphOp::RemoveEdge { src, dst, edge } => Ok(graph.remove_edge(*src, *dst, *edge)?),
        GraphOp::RewriteContent { id, content, embedding } => {
            Ok(graph.rewrite_content(*id, content, embedding.clone())?)
        }
    }
}

/// Append handle over a `*.fxm.log` file. Writes are flushed before
/// `append` returns; one writer per store.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    last_seq: u64,
}

impl EventLog {
    /// Opens (or creates) the file for appending, continuing after
    /// `last_seq`. The caller is responsible for having read the existing
    /// records first; `Store::open` does.
    fn open_append(path: &Path, last_seq: u64) -> Result<EventLog, PersistError> {
        let file = OpenOptions::new()
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(EventLog { path: path.to_path_buf(), file, last_seq })
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one line-delimited JSON record and flushes it.
    pub fn append(&mut self, record: &EventRecord) -> Result<(), PersistError> {
        if record.seq != self.last_seq + 1 {
            return Err(PersistError::SeqGap { last: self.last_seq, got: record.seq });
        }
        let line = serde_json::to_string(record).expect("event records always serialize");
        writeln!(self.file, "{line}").map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.last_seq = record.seq;
        Ok(())
    }
}

/// Reads and parses every record, reporting the 1-based line of the first
/// malformed one, and insisting the sequence is gap-free.
pub fn read_events(path: &Path) -> Result<Vec<EventRecord>, PersistError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line)
            .map_err(|e| PersistError::Parse { line: i + 1, message: e.to_string() })?;
        if let Some(prev) = events.last() {
            let prev: &EventRecord = prev;
            if record.seq != prev.seq + 1 {
                return Err(PersistError::SeqGap { last: prev.seq, got: record.seq });
            }
        }
        events.push(record);
    }
    Ok(events)
}

/// Rebuilds a graph from a genesis log (first seq must be 1) by applying
/// every event in order to an empty graph of the given dimension.
pub fn replay(path: &Path, dimension: usize) -> Result<MemoryGraph, PersistError> {
    let events = read_events(path)?;
    if let Some(first) = events.first() {
        if first.seq != 1 {
            return Err(PersistError::SeqGap { last: 0, got: first.seq });
        }
    }
    let mut graph = MemoryGraph::new(dimension);
    for record in &events {
        apply_op(&mut graph, &record.op, record.seq)?;
    }
    Ok(graph)
}

/// The snapshot document. Field order is fixed and maps are sorted, so
/// serialization is canonical: equal states give equal bytes.
#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    format_version: u32,
    dimension: usize,
    next_id: u64,
    /// Highest event seq the snapshot covers; 0 for bare-graph saves.
    last_event_seq: u64,
    nodes: Vec<MemoryNode>,
    edges: Vec<(NodeId, NodeId, EdgeKind)>,
}

fn snapshot_bytes(graph: &MemoryGraph, last_event_seq: u64) -> Vec<u8> {
    let snapshot = Snapshot {
        format_version: FORMAT_VERSION,
        dimension: graph.dimension(),
        next_id: graph.next_id(),
        last_event_seq,
        nodes: graph.nodes().cloned().collect(),
        edges: graph.edges().copied().collect(),
    };
    let mut bytes = serde_json::to_vec(&snapshot).expect("snapshots always serialize");
    bytes.push(b'\n');
    bytes
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

fn save_snapshot_with_seq(
    graph: &MemoryGraph,
    path: &Path,
    last_event_seq: u64,
) -> Result<(), PersistError> {
    write_atomically(path, &snapshot_bytes(graph, last_event_seq))
}

/// Writes the graph as canonical JSON; identical graphs produce
/// byte-identical files.
pub fn save_snapshot(graph: &MemoryGraph, path: &Path) -> Result<(), PersistError> {
    save_snapshot_with_seq(graph, path, 0)
}

fn load_snapshot_full(path: &Path) -> Result<(MemoryGraph, u64), PersistError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let snapshot: Snapshot = serde_json::from_slice(&bytes)
        .map_err(|e| PersistError::Parse { line: 1, message: e.to_string() })?;
    if snapshot.format_version != FORMAT_VERSION {
        return Err(PersistError::FormatVersionMismatch {
            want: FORMAT_VERSION,
            got: snapshot.format_version,
        });
    }
    let graph = MemoryGraph::from_parts(
        snapshot.dimension,
        snapshot.next_id,
        snapshot.nodes,
        snapshot.edges,
    );
    let violations = graph.validate();
    if !violations.is_empty() {
        return Err(PersistError::ValidateFailed(violations));
    }
    Ok((graph, snapshot.last_event_seq))
}

/// Loads and validates a snapshot; any structural violation in the decoded
/// graph is a load error, not a warning.
pub fn load_snapshot(path: &Path) -> Result<MemoryGraph, PersistError> {
    load_snapshot_full(path).map(|(graph, _)| graph)
}

/// Derives the two store file paths from a base: `{base}.fxm.json` and
/// `{base}.fxm.log`. Passing an existing store file works too; its store
/// suffix is stripped first.
pub fn store_paths(base: &Path) -> (PathBuf, PathBuf) {
    let name = base.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name
        .strip_suffix(SNAPSHOT_SUFFIX)
        .or_else(|| name.strip_suffix(LOG_SUFFIX))
        .or_else(|| name.strip_suffix(".fxm"))
        .unwrap_or(name);
    let snapshot = base.with_file_name(format!("{stem}{SNAPSHOT_SUFFIX}"));
    let log = base.with_file_name(format!("{stem}{LOG_SUFFIX}"));
    (snapshot, log)
}

/// An event-logged graph: every mutation appends to the log before the call
/// returns, and `save` writes a snapshot covering the log position.
#[derive(Debug)]
pub struct Store {
    graph: MemoryGraph,
    log: EventLog,
    snapshot_path: PathBuf,
}

impl Store {
    /// Opens or creates the store at `base`. State comes from the snapshot
    /// (if any) plus the log tail past it; with no snapshot the log is
    /// replayed from genesis; with neither the store starts empty.
    pub fn open(base: &Path, dimension: usize) -> Result<Store, PersistError> {
        let (snapshot_path, log_path) = store_paths(base);
        let (mut graph, base_seq) = if snapshot_path.exists() {
            load_snapshot_full(&snapshot_path)?
        } else {
            (MemoryGraph::new(dimension), 0)
        };
        if graph.dimension() != dimension {
            return Err(PersistError::Dimension { want: dimension, got: graph.dimension() });
        }
        let mut last_seq = base_seq;
        if log_path.exists() {
            let events = read_events(&log_path)?;
            if let Some(first) = events.first() {
                if first.seq > base_seq + 1 {
                    return Err(PersistError::SeqGap { last: base_seq, got: first.seq });
                }
            }
            for record in &events {
                if record.seq > base_seq {
                    apply_op(&mut graph, &record.op, record.seq)?;
                }
                last_seq = last_seq.max(record.seq);
            }
        }
        let log = EventLog::open_append(&log_path, last_seq)?;
        Ok(Store { graph, log, snapshot_path })
    }

    pub fn last_seq(&self) -> u64 {
        self.log.last_seq()
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    pub fn snapshot_path(&self) -> &Path {
        &self.snapshot_path
    }

    /// Snapshots the current graph, stamped with the covered log position.
    pub fn save(&self) -> Result<(), PersistError> {
        save_snapshot_with_seq(&self.graph, &self.snapshot_path, self.log.last_seq())
    }

    fn log_op(&mut self, op: GraphOp) -> Result<(), GraphError> {
        let record = EventRecord { seq: self.log.last_seq() + 1, op };
        // The graph mutation already succeeded; a log failure here means
        // durable state is behind memory, which is fatal for the store's
        // contract, so surface it loudly rather than diverging silently.
        self.log
            .append(&record)
            .unwrap_or_else(|e| panic!("event log append failed: {e}"));
        Ok(())
    }
}

impl GraphWrite for Store {
    fn graph(&self) -> &MemoryGraph {
        &self.graph
    }

    fn add_node(
        &mut self,
        layer: LayerTag,
        content: &str,
        embedding: EmbeddingVector,
    ) -> Result<NodeId, GraphError> {
        self.add_node_with_meta(layer, content, embedding, BTreeMap::new())
    }

    fn add_node_with_meta(
        &mut self,
        layer: LayerTag,
        content: &str,
        embedding: EmbeddingVector,
        meta: BTreeMap<String, String>,
    ) -> Result<NodeId, GraphError> {
        let id = self.graph.add_node_with_meta(layer, content, embedding.clone(), meta.clone())?;
        self.log_op(GraphOp::AddNode {
            id,
            layer,
            content: content.to_string(),
            embedding: self.graph.node(id).expect("just added").embedding.clone(),
            meta,
        })?;
        Ok(id)
    }

    fn add_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind) -> Result<(), GraphError> {
        self.graph.add_edge(src, dst, kind)?;
        self.log_op(GraphOp::AddEdge { src, dst, edge: kind })
    }

    fn remove_node(&mut self, id: NodeId) -> Result<(), GraphError> {
        self.graph.remove_node(id)?;
        self.log_op(GraphOp::RemoveNode { id })
    }

    fn remove_edge(&mut self, src: NodeId, dst: NodeId, kind: EdgeKind) -> Result<(), GraphError> {
        self.graph.remove_edge(src, dst, kind)?;
        self.log_op(GraphOp::RemoveEdge { src, dst, edge: kind })
    }

    fn rewrite_content(
        &mut self,
        id: NodeId,
        content: &str,
        embedding: EmbeddingVector,
    ) -> Result<(), GraphError> {
        self.graph.rewrite_content(id, content, embedding.clone())?;
        self.log_op(GraphOp::RewriteContent {
            id,
            content: content.to_string(),
            embedding: self.graph.node(id).expect("just rewritten").embedding.clone(),
        })
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

/// Graphviz rendering: nodes colored by layer, edges labeled by kind.
pub fn export_dot(graph: &MemoryGraph) -> String {
    let mut out = String::from("digraph fluxmem {\n  rankdir=LR;\n  node [style=filled];\n");
    for node in graph.nodes() {
        let color = match node.layer {
            LayerTag::Semantic => "lightblue",
            LayerTag::Episodic => "khaki",
            LayerTag::Procedural => "palegreen",
        };
        let mut label: String = node.content.chars().take(24).collect();
        if node.content.chars().count() > 24 {
            label.push('…');
        }
        out.push_str(&format!(
            "  n{} [label=\"#{} {}\", fillcolor={color}];\n",
            node.id.0,
            node.id.0,
            dot_escape(&label)
        ));
    }
    for (src, dst, kind) in graph.edges() {
        out.push_str(&format!("  n{} -> n{} [label=\"{kind}\"];\n", src.0, dst.0));
    }
    out.push_str("}\n");
    out
}

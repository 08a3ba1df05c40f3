//! Offline consolidation: trajectories become episodes, episodes cluster,
//! clusters induce procedural skills, and each skill evolves under a
//! test-score-rewrite cycle until its maturity score converges.
//!
//! Maturity is scored as `eta / ln(ell) * (1 - delta)`: re-run success rate,
//! discounted by skill length, damped by how far the latest rewrite moved
//! the skill's embedding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterError, AdapterSuite, Embedder};
use crate::context::{serialize_context, ActivatedSubgraph, ContextError, StepAnchor, SubgraphEdge};
use crate::embedding::{self, EmbeddingVector, VectorError};
use crate::graph::{EdgeKind, GraphError, GraphWrite, LayerTag, MemoryGraph, NodeId};

/// One task attempt as the executor experienced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    /// Ordered (observation, action) pairs; must be non-empty to commit.
    pub steps: Vec<(String, String)>,
    pub outcome: TrajectoryOutcome,
    /// Semantic nodes the attempt actually drew on.
    pub used_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryOutcome {
    Success,
    Failure,
}

impl TrajectoryOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryOutcome::Success => "success",
            TrajectoryOutcome::Failure => "failure",
        }
    }
}

/// A group of episodes judged to share a trajectory pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCluster {
    /// Ascending episodic node ids; never empty.
    pub members: Vec<NodeId>,
    /// L2-normalized mean of the member embeddings.
    pub centroid: EmbeddingVector,
}

/// A procedural skill plus its full version history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRecord {
    pub node: NodeId,
    /// Version texts, index = version; append-only.
    pub texts: Vec<String>,
    pub source_cluster: EpisodeCluster,
    pub current_version: usize,
}

impl SkillRecord {
    pub fn current_text(&self) -> &str {
        &self.texts[self.current_version]
    }
}

/// One scoring pass over one skill version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PemsReport {
    pub version: usize,
    pub eta: f64,
    pub ell: usize,
    pub delta: f64,
    pub score: f64,
    /// Score movement against the previous version; absent at version 0.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "halt", rename_all = "snake_case")]
pub enum HaltReason {
    /// Evolution settled: the score cleared the rewrite threshold, the
    /// rewriter had nothing left to change, or the last score step fell
    /// inside epsilon (carried as `delta`).
    Converged { delta: f64 },
    /// The scoring-pass budget ran out first.
    MaxIters,
}

/// A skill's complete evolution: one report per version, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillEvolution {
    pub skill: SkillRecord,
    pub reports: Vec<PemsReport>,
    /// None only inside an abort, where evolution stopped mid-flight.
    pub halt: Option<HaltReason>,
}

#[derive(Debug, Clone)]
pub struct ConsolidationConfig {
    /// Leader-clustering cosine threshold, in (0, 1).
    pub cluster_threshold: f64,
    /// Convergence band for the score delta.
    pub epsilon: f64,
    /// Maximum scoring passes per skill.
    pub max_iters: usize,
    /// Skills scoring at or above this are left alone.
    pub rewrite_threshold: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            cluster_threshold: 0.80,
            epsilon: 0.002,
            max_iters: 5,
            rewrite_threshold: 0.15,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConsolidationError {
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("episode cluster is empty")]
    EmptyCluster,
    #[error("node {0} is not in the graph")]
    UnknownNode(NodeId),
    #[error("skill text has {tokens} token(s); at least 2 are required")]
    SkillTooShort { tokens: usize },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

impl From<VectorError> for ConsolidationError {
    fn from(e: VectorError) -> Self {
        let VectorError::DimensionMismatch { expected, got } = e;
        ConsolidationError::DimensionMismatch { expected, got }
    }
}

/// A consolidation run that failed partway keeps everything it finished;
/// the in-flight skill (if any) is last, with `halt: None`.
#[derive(Debug)]
pub struct ConsolidationAbort {
    pub evolutions: Vec<SkillEvolution>,
    pub error: ConsolidationError,
}

/// Records a finished trajectory as an episodic node: content is the step
/// text (observation and action joined per step, steps joined by newlines),
/// meta carries the task id and outcome, and every used semantic node gets
/// a Ground edge into the new episode.
pub fn commit_episode(
    store: &mut impl GraphWrite,
    trajectory: &Trajectory,
    embedder: &dyn Embedder,
) -> Result<NodeId, ConsolidationError> {
    if trajectory.steps.is_empty() {
        return Err(ConsolidationError::EmptyTrajectory);
    }
    let content = trajectory
        .steps
        .iter()
        .map(|(obs, act)| {
            [obs.as_str(), act.as_str()]
                .into_iter()
                .filter(|part| !part.is_empty())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n");

    // Validate sources before creating anything; only semantic nodes can
    // ground an episode.
    let mut grounds: BTreeSet<NodeId> = BTreeSet::new();
    for &used in &trajectory.used_nodes {
        let node = store.graph().node(used).ok_or(ConsolidationError::UnknownNode(used))?;
        if node.layer == LayerTag::Semantic {
            grounds.insert(used);
        }
    }

    let embedding = embedder.embed(&content)?;
    let mut meta = BTreeMap::new();
    meta.insert("task_id".to_string(), trajectory.task_id.clone());
    meta.insert("outcome".to_string(), trajectory.outcome.as_str().to_string());
    let episode = store.add_node_with_meta(LayerTag::Episodic, &content, embedding, meta)?;
    for ground in grounds {
        store.add_edge(ground, episode, EdgeKind::Ground)?;
    }
    Ok(episode)
}

/// Leader clustering over successful episodes, ascending by id: each
/// episode joins the first cluster whose centroid it matches at `theta`,
/// else founds its own. Episodes explicitly marked as failures stay out;
/// unlabeled episodes participate.
pub fn cluster_episodes(graph: &MemoryGraph, theta: f64) -> Vec<EpisodeCluster> {
    assert!(theta > 0.0 && theta < 1.0, "cluster threshold must lie in (0, 1)");
    struct Acc {
        members: Vec<NodeId>,
        sum: Vec<f64>,
    }
    let mut accs: Vec<(Acc, EmbeddingVector)> = Vec::new();
    for id in graph.layer_ids(LayerTag::Episodic) {
        let node = graph.node(id).expect("layer listing is consistent");
        if node.meta.get("outcome").is_some_and(|o| o == "failure") {
            continue;
        }
        let mut placed = false;
        for (acc, centroid) in accs.iter_mut() {
            let cos = embedding::cosine(&node.embedding, centroid)
                .expect("one graph, one dimension");
            if cos >= theta {
                acc.members.push(id);
                for (s, x) in acc.sum.iter_mut().zip(node.embedding.as_slice()) {
                    *s += x;
                }
                *centroid = EmbeddingVector::normalized(acc.sum.clone());
                placed = true;
                break;
            }
        }
        if !placed {
            let sum = node.embedding.as_slice().to_vec();
            let centroid = EmbeddingVector::normalized(sum.clone());
            accs.push((Acc { members: vec![id], sum }, centroid));
        }
    }
    accs.into_iter()
        .map(|(acc, centroid)| EpisodeCluster { members: acc.members, centroid })
        .collect()
}

fn member_text(graph: &MemoryGraph, id: NodeId) -> Result<String, ConsolidationError> {
    Ok(graph.node(id).ok_or(ConsolidationError::UnknownNode(id))?.content.clone())
}

/// Extracts the cluster's shared pattern into a new procedural node with a
/// Distill edge from every member. Skills thinner than two tokens are
/// rejected before anything is created.
pub fn induce_skill(
    store: &mut impl GraphWrite,
    cluster: &EpisodeCluster,
    suite: &AdapterSuite,
) -> Result<SkillRecord, ConsolidationError> {
    if cluster.members.is_empty() {
        return Err(ConsolidationError::EmptyCluster);
    }
    let texts = cluster
        .members
        .iter()
        .map(|&m| member_text(store.graph(), m))
        .collect::<Result<Vec<_>, _>>()?;
    let text = suite.inductor.induce(&texts)?;
    let tokens = embedding::token_length(&text);
    if tokens < 2 {
        return Err(ConsolidationError::SkillTooShort { tokens });
    }
    let vector = suite.embedder.embed(&text)?;
    let node = store.add_node(LayerTag::Procedural, &text, vector)?;
    for &member in &cluster.members {
        store.add_edge(member, node, EdgeKind::Distill)?;
    }
    Ok(SkillRecord {
        node,
        texts: vec![text],
        source_cluster: cluster.clone(),
        current_version: 0,
    })
}

/// Re-runs every source episode's task with the current skill injected as
/// the procedural section; returns the success rate and the per-member
/// outcomes (needed to pick rewrite evidence).
pub fn eta_detail(
    graph: &MemoryGraph,
    skill: &SkillRecord,
    suite: &AdapterSuite,
) -> Result<(f64, Vec<(NodeId, bool)>), ConsolidationError> {
    if skill.source_cluster.members.is_empty() {
        return Err(ConsolidationError::EmptyCluster);
    }
    let mut detail = Vec::with_capacity(skill.source_cluster.members.len());
    let mut wins = 0usize;
    for &member in &skill.source_cluster.members {
        let node = graph.node(member).ok_or(ConsolidationError::UnknownNode(member))?;
        let task_id = node.meta.get("task_id").cloned().unwrap_or_default();
        let mut sub = ActivatedSubgraph::empty(StepAnchor::new(&task_id, 0, "", ""));
        sub.epi.push(member);
        sub.proc.push(skill.node);
        sub.edges.insert(SubgraphEdge::Activation { node: member });
        sub.edges.insert(SubgraphEdge::Activation { node: skill.node });
        sub.edges.insert(SubgraphEdge::Distill { src: member, dst: skill.node });
        let context = serialize_context(&sub, graph)?;
        let ok = suite.executor.execute(&task_id, &context)?.is_success();
        wins += usize::from(ok);
        detail.push((member, ok));
    }
    Ok((wins as f64 / detail.len() as f64, detail))
}

/// Success rate of the skill's source episodes under re-run.
pub fn eta(
    graph: &MemoryGraph,
    skill: &SkillRecord,
    suite: &AdapterSuite,
) -> Result<f64, ConsolidationError> {
    eta_detail(graph, skill, suite).map(|(rate, _)| rate)
}

/// Embedding movement between consecutive skill versions: (1 - cosine) / 2,
/// clamped into [0, 1]. Version 0 has no predecessor and scores 0 upstream.
pub fn delta(
    current: &EmbeddingVector,
    previous: &EmbeddingVector,
) -> Result<f64, ConsolidationError> {
    let cos = embedding::cosine(current, previous)?;
    Ok(((1.0 - cos) / 2.0).clamp(0.0, 1.0))
}

/// The maturity score itself. Natural log; `ell` below 2 is rejected
/// because the formula is singular at 1.
pub fn pems(eta: f64, ell: usize, delta: f64) -> Result<f64, ConsolidationError> {
    if ell < 2 {
        return Err(ConsolidationError::SkillTooShort { tokens: ell });
    }
    Ok(eta / (ell as f64).ln() * (1.0 - delta))
}

/// Two-column (version, score) text for quick plotting.
pub fn plateau_table(reports: &[PemsReport]) -> String {
    let mut out = String::from("version\tscore\n");
    for r in reports {
        out.push_str(&format!("{}\t{:.6}\n", r.version, r.score));
    }
    out
}

struct EvolveAbort {
    partial: Option<SkillEvolution>,
    error: ConsolidationError,
}

fn evolve_skill(
    store: &mut impl GraphWrite,
    cluster: &EpisodeCluster,
    suite: &AdapterSuite,
    cfg: &ConsolidationConfig,
) -> Result<Option<SkillEvolution>, EvolveAbort> {
    let mut skill = match induce_skill(store, cluster, suite) {
        Ok(s) => s,
        // Too little shared structure to name a skill; not an error.
        Err(ConsolidationError::SkillTooShort { .. }) => return Ok(None),
        Err(error) => return Err(EvolveAbort { partial: None, error }),
    };
    let mut reports: Vec<PemsReport> = Vec::new();

    macro_rules! try_or_abort {
        ($expr:expr) => {
            match $expr {
                Ok(v) => v,
                Err(e) => {
                    return Err(EvolveAbort {
                        partial: Some(SkillEvolution {
                            skill: skill.clone(),
                            reports: reports.clone(),
                            halt: None,
                        }),
                        error: e.into(),
                    })
                }
            }
        };
    }

    let (eta0, mut last_detail) = try_or_abort!(eta_detail(store.graph(), &skill, suite));
    let ell0 = embedding::token_length(&skill.texts[0]);
    let score0 = try_or_abort!(pems(eta0, ell0, 0.0));
    reports.push(PemsReport {
        version: 0,
        eta: eta0,
        ell: ell0,
        delta: 0.0,
        score: score0,
        delta_score: None,
    });

    let halt = loop {
        let last_score = reports.last().expect("initial pass exists").score;
        if last_score >= cfg.rewrite_threshold {
            break HaltReason::Converged { delta: 0.0 };
        }
        if reports.len() >= cfg.max_iters {
            break HaltReason::MaxIters;
        }

        let successful: Vec<String> = {
            let mut texts = Vec::new();
            for &(member, ok) in &last_detail {
                if ok {
                    texts.push(try_or_abort!(member_text(store.graph(), member)));
                }
            }
            texts
        };
        let current = skill.current_text().to_string();
        let next = try_or_abort!(suite.inductor.rewrite(&current, &successful));
        if next == current || embedding::token_length(&next) < 2 {
            // The rewriter has nothing more to give; the skill is settled.
            break HaltReason::Converged { delta: 0.0 };
        }

        let next_vector = try_or_abort!(suite.embedder.embed(&next));
        try_or_abort!(store.rewrite_content(skill.node, &next, next_vector.clone()));
        skill.texts.push(next.clone());
        skill.current_version += 1;

        let previous_vector = try_or_abort!(suite.embedder.embed(&current));
        let d = try_or_abort!(delta(&next_vector, &previous_vector));
        let (eta_k, detail_k) = try_or_abort!(eta_detail(store.graph(), &skill, suite));
        last_detail = detail_k;
        let ell_k = embedding::token_length(&next);
        let score_k = try_or_abort!(pems(eta_k, ell_k, d));
        let delta_score = score_k - last_score;
        reports.push(PemsReport {
            version: skill.current_version,
            eta: eta_k,
            ell: ell_k,
            delta: d,
            score: score_k,
            delta_score: Some(delta_score),
        });
        if delta_score.abs() < cfg.epsilon {
            break HaltReason::Converged { delta: delta_score };
        }
    };

    Ok(Some(SkillEvolution { skill, reports, halt: Some(halt) }))
}

/// The full offline pass: cluster successful episodes, induce one skill per
/// cluster, and evolve each skill until it converges or exhausts its
/// scoring budget. Clusters whose shared pattern is thinner than two tokens
/// are skipped without creating nodes. Adapter failures abort with
/// everything finished so far.
pub fn consolidate_loop(
    store: &mut impl GraphWrite,
    suite: &AdapterSuite,
    cfg: &ConsolidationConfig,
) -> Result<Vec<SkillEvolution>, Box<ConsolidationAbort>> {
    let clusters = cluster_episodes(store.graph(), cfg.cluster_threshold);
    let mut evolutions: Vec<SkillEvolution> = Vec::new();
    for cluster in clusters {
        match evolve_skill(store, &cluster, suite, cfg) {
            Ok(Some(evolution)) => evolutions.push(evolution),
            Ok(None) => {}
            Err(EvolveAbort { partial, error }) => {
                if let Some(p) = partial {
                    evolutions.push(p);
                }
                return Err(Box::new(ConsolidationAbort { evolutions, error }));
            }
        }
    }
    Ok(evolutions)
}

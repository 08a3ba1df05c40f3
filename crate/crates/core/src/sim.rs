//! Deterministic synthetic environment with known ground truth.
//!
//! Worlds are built from disjoint per-topic vocabularies, so every retrieval,
//! edit, and clustering outcome is checkable by token containment alone.
//! Each fact is one semantic document carrying a unique marker token; tasks
//! are planted so that a known fraction need exactly one expand, prune, or
//! reshape edit to succeed, and the benchmark counts how success rate moves
//! as the refinement round budget T grows.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::reference::{
    HalvingReshaper, HashedEmbedder, IntersectionInductor, RuleAttributor, TokenOverlapVerifier,
};
use crate::adapters::{AdapterError, AdapterSuite, Executor};
use crate::consolidation::{
    commit_episode, consolidate_loop, ConsolidationConfig, SkillEvolution, Trajectory,
    TrajectoryOutcome,
};
use crate::context::{ContextString, StepAnchor};
use crate::embedding::tokenize;
use crate::graph::{GraphWrite, LayerTag, MemoryGraph, NodeId};
use crate::refinement::{
    refine_loop, Feedback, FailureCause, RefinementConfig, RefinementTrace, ReshapeDirection,
    TaskOutcome,
};
use crate::retrieval::RetrievalConfig;

/// Words per topic; the first `VISIBLE_WORDS` appear in plain/trap documents
/// and queries, the rest only in hidden documents, which is what guarantees
/// hidden facts cannot be retrieved lexically.
const TOPIC_WORDS: usize = 24;
const VISIBLE_WORDS: usize = 18;
/// Doc words per fact and chaff tokens per trap document.
const FACT_WORDS: usize = 3;
const CHAFF_WORDS: usize = 4;
/// Stem repetitions in every episode action; the stems are what survives
/// cluster-wide intersection during consolidation.
const STEM_REPEATS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_topics: usize,
    pub n_facts: usize,
    pub n_tasks: usize,
    /// Fraction of tasks whose required fact is hidden (needs one Expand).
    pub frac_expand: f64,
    /// Fraction of tasks with a zero distractor budget (needs one Prune).
    pub frac_prune: f64,
    /// Fraction of tasks whose fact is bundled with chaff (needs one Reshape).
    pub frac_reshape: f64,
    pub dimension: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            n_topics: 3,
            n_facts: 60,
            n_tasks: 200,
            frac_expand: 0.30,
            frac_prune: 0.10,
            frac_reshape: 0.10,
            dimension: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactClass {
    /// Retrievable by its own words; the easy case.
    Plain,
    /// Bundles its marker with chaff; must be reshaped before use.
    Trap,
    /// Uses reserved vocabulary no query mentions; must be expanded to.
    Hidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactDoc {
    /// Planned semantic node id: facts install in index order into a fresh
    /// graph, so fact i becomes node i.
    pub id: NodeId,
    pub topic: usize,
    pub class: FactClass,
    /// Unique alphanumeric token naming this fact.
    pub marker: String,
    /// The fact's topic words; these double as retrieval hints.
    pub words: Vec<String>,
    /// Trap-only noise tokens.
    pub chaff: Vec<String>,
    /// The full document text as ingested.
    pub doc: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Normal,
    Expand,
    Prune,
    Reshape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub id: String,
    pub kind: TaskKind,
    pub topic: usize,
    pub query: String,
    /// Semantic node ids whose markers must all be visible in the context.
    pub required_facts: BTreeSet<NodeId>,
    /// How many irrelevant activated semantic nodes the task tolerates.
    pub distractor_budget: usize,
    /// A node whose content must be reshaped before the task can pass.
    pub granularity_trap: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicVocab {
    pub words: Vec<String>,
    /// Two tokens that open every episode action in this topic; they exist
    /// to give consolidation a shared pattern to find.
    pub stems: [String; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub topics: Vec<TopicVocab>,
    pub facts: Vec<FactDoc>,
    pub tasks: Vec<SyntheticTask>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("store dimension {got} does not match world dimension {want}")]
    Dimension { want: usize, got: usize },
    #[error("world installation needs an empty store; found {nodes} nodes")]
    StoreNotEmpty { nodes: usize },
    #[error("refinement aborted on task {task}: {error}")]
    Refine { task: String, error: String },
    #[error("consolidation aborted: {error}")]
    Consolidation { error: String },
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

fn class_bounds(per_topic: usize) -> (usize, usize) {
    // 45% plain, 35% trap, rest hidden (9 / 7 / 4 at twenty per topic).
    let plain = (per_topic as f64 * 0.45).ceil() as usize;
    let visible = (per_topic as f64 * 0.80).ceil() as usize;
    (plain.min(per_topic), visible.min(per_topic))
}

/// Lexicographic 3-subsets of 0..n.
fn triples(n: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            for c in (b + 1)..n {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// Spreads `count` slots of `kind` evenly across the task list, walking
/// forward past positions already claimed by an earlier kind.
fn place_kind(slots: &mut [Option<TaskKind>], count: usize, kind: TaskKind) {
    let n = slots.len();
    if n == 0 || count == 0 {
        return;
    }
    for k in 0..count {
        let mut pos = (((k as f64 + 0.5) * n as f64) / count as f64) as usize;
        pos = pos.min(n - 1);
        while slots[pos].is_some() {
            pos = (pos + 1) % n;
        }
        slots[pos] = Some(kind);
    }
}

fn assign_kinds(cfg: &WorldConfig) -> Vec<TaskKind> {
    let n = cfg.n_tasks;
    let frac_sum = cfg.frac_expand + cfg.frac_prune + cfg.frac_reshape;
    assert!(
        (0.0..=1.0).contains(&frac_sum),
        "task kind fractions must sum into [0, 1]"
    );
    let n_reshape = (cfg.frac_reshape * n as f64).round() as usize;
    let n_prune = (cfg.frac_prune * n as f64).round() as usize;
    let n_expand = (cfg.frac_expand * n as f64).round() as usize;
    let mut slots: Vec<Option<TaskKind>> = vec![None; n];
    place_kind(&mut slots, n_reshape, TaskKind::Reshape);
    place_kind(&mut slots, n_prune, TaskKind::Prune);
    place_kind(&mut slots, n_expand, TaskKind::Expand);
    slots.into_iter().map(|s| s.unwrap_or(TaskKind::Normal)).collect()
}

/// Builds the world: vocabularies, fact documents, and planted tasks.
/// Byte-identical for equal configs; the seed drives only which facts the
/// tasks target, never the vocabulary or document layout.
pub fn generate_world(cfg: &WorldConfig) -> SyntheticWorld {
    assert!(cfg.n_topics > 0, "need at least one topic");
    assert!(cfg.dimension > 0, "embedding dimension must be positive");

    let topics: Vec<TopicVocab> = (0..cfg.n_topics)
        .map(|t| TopicVocab {
            words: (0..TOPIC_WORDS).map(|i| format!("t{t}w{i}")).collect(),
            stems: [format!("t{t}s0"), format!("t{t}s1")],
        })
        .collect();

    // Facts round-robin the topics; per-topic position decides the class.
    let mut per_topic_seen = vec![0usize; cfg.n_topics];
    let per_topic_total = |t: usize| {
        cfg.n_facts / cfg.n_topics + usize::from(t < cfg.n_facts % cfg.n_topics)
    };
    let hidden_combos = triples(TOPIC_WORDS - VISIBLE_WORDS);
    let mut facts = Vec::with_capacity(cfg.n_facts);
    for i in 0..cfg.n_facts {
        let topic = i % cfg.n_topics;
        let j = per_topic_seen[topic];
        per_topic_seen[topic] += 1;
        let (plain_end, visible_end) = class_bounds(per_topic_total(topic));
        let vocab = &topics[topic].words;
        let marker = format!("fact{i}");
        let (class, words, chaff) = if j < visible_end {
            let words: Vec<String> =
                (0..FACT_WORDS).map(|k| vocab[(FACT_WORDS * j + k) % VISIBLE_WORDS].clone()).collect();
            if j < plain_end {
                (FactClass::Plain, words, Vec::new())
            } else {
                let chaff: Vec<String> =
                    (0..CHAFF_WORDS).map(|k| format!("t{topic}x{i}{k}")).collect();
                (FactClass::Trap, words, chaff)
            }
        } else {
            let combo = hidden_combos[(j - visible_end) % hidden_combos.len()];
            let words: Vec<String> =
                combo.iter().map(|&k| vocab[VISIBLE_WORDS + k].clone()).collect();
            (FactClass::Hidden, words, Vec::new())
        };
        let doc = if chaff.is_empty() {
            format!("{marker} {}", words.join(" "))
        } else {
            format!("{} {marker} {}", chaff.join(" "), words.join(" "))
        };
        facts.push(FactDoc { id: NodeId(i as u64), topic, class, marker, words, chaff, doc });
    }

    // Per-topic pools for task targeting.
    let pool = |topic: usize, class: FactClass| -> Vec<usize> {
        facts
            .iter()
            .enumerate()
            .filter(|(_, f)| f.topic == topic && f.class == class)
            .map(|(i, _)| i)
            .collect()
    };
    let plains: Vec<Vec<usize>> = (0..cfg.n_topics).map(|t| pool(t, FactClass::Plain)).collect();
    let hiddens: Vec<Vec<usize>> = (0..cfg.n_topics).map(|t| pool(t, FactClass::Hidden)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Reshape tasks consume traps without replacement so every trap is
    // reshaped at most once per run.
    let mut trap_queues: Vec<Vec<usize>> = (0..cfg.n_topics)
        .map(|t| {
            let mut q = pool(t, FactClass::Trap);
            q.shuffle(&mut rng);
            q
        })
        .collect();

    let kinds = assign_kinds(cfg);
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for (i, mut kind) in kinds.into_iter().enumerate() {
        let topic = i % cfg.n_topics;
        // Downgrade kinds the topic cannot support instead of panicking on
        // exotic configs.
        match kind {
            TaskKind::Expand if hiddens[topic].is_empty() => kind = TaskKind::Normal,
            TaskKind::Reshape if trap_queues[topic].is_empty() => kind = TaskKind::Normal,
            TaskKind::Normal | TaskKind::Prune if plains[topic].is_empty() => {
                panic!("world has a topic without plain facts; raise n_facts")
            }
            _ => {}
        }
        let (fact_idx, query) = match kind {
            TaskKind::Normal | TaskKind::Prune => {
                let f = plains[topic][rng.random_range(0..plains[topic].len())];
                (f, facts[f].words.join(" "))
            }
            TaskKind::Expand => {
                let f = hiddens[topic][rng.random_range(0..hiddens[topic].len())];
                let q = plains[topic][rng.random_range(0..plains[topic].len())];
                (f, facts[q].words.join(" "))
            }
            TaskKind::Reshape => {
                let f = trap_queues[topic].pop().expect("checked non-empty above");
                (f, facts[f].words.join(" "))
            }
        };
        let budget = if kind == TaskKind::Prune { 0 } else { 16 };
        let trap = (kind == TaskKind::Reshape).then(|| facts[fact_idx].id);
        tasks.push(SyntheticTask {
            id: format!("task-{i}"),
            kind,
            topic,
            query,
            required_facts: BTreeSet::from([facts[fact_idx].id]),
            distractor_budget: budget,
            granularity_trap: trap,
        });
    }

    SyntheticWorld { config: cfg.clone(), topics, facts, tasks }
}

/// Ingests every fact document as a semantic node, in fact order, into an
/// empty store of the world's dimension. Fact ids are planned, so a
/// non-empty store cannot hold the world.
pub fn install(world: &SyntheticWorld, store: &mut impl GraphWrite) -> Result<(), SimError> {
    let graph = store.graph();
    if graph.dimension() != world.config.dimension {
        return Err(SimError::Dimension {
            want: world.config.dimension,
            got: graph.dimension(),
        });
    }
    if graph.node_count() != 0 {
        return Err(SimError::StoreNotEmpty { nodes: graph.node_count() });
    }
    for fact in &world.facts {
        let embedding = crate::embedding::embed(&fact.doc, world.config.dimension);
        let id = store.add_node(LayerTag::Semantic, &fact.doc, embedding)?;
        assert_eq!(id, fact.id, "fresh stores assign ids in insertion order");
    }
    Ok(())
}

fn semantic_entries(text: &str) -> Vec<(NodeId, String)> {
    let mut in_semantic = false;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('[') {
            in_semantic = line == "[SEMANTIC]";
            continue;
        }
        if !in_semantic {
            continue;
        }
        if let Some(rest) = line.strip_prefix("- #") {
            let (id_str, content) = rest.split_once(' ').unwrap_or((rest, ""));
            if let Ok(id) = id_str.parse::<u64>() {
                out.push((NodeId(id), content.to_string()));
            }
        }
    }
    out
}

/// The ground-truth judge: a pure function of the task and the serialized
/// context. Checks run in a fixed order and the first violation wins:
/// (a) every required marker is visible somewhere in the context;
/// (b) irrelevant activated semantic nodes stay within the budget;
/// (c) the granularity trap, if any, no longer shows its chaff.
pub fn synthetic_execute(
    world: &SyntheticWorld,
    task: &SyntheticTask,
    context: &ContextString,
) -> Feedback {
    let tokens: BTreeSet<String> = tokenize(&context.text).into_iter().collect();

    for &fid in &task.required_facts {
        let fact = &world.facts[fid.0 as usize];
        if !tokens.contains(&fact.marker) {
            return Feedback::Failure {
                cause: FailureCause::UnderConnection { hints: fact.words.clone() },
            };
        }
    }

    let required_markers: BTreeSet<&str> = task
        .required_facts
        .iter()
        .map(|fid| world.facts[fid.0 as usize].marker.as_str())
        .collect();
    let mut distractors: Vec<NodeId> = semantic_entries(&context.text)
        .into_iter()
        .filter(|(_, content)| {
            let line_tokens: BTreeSet<String> = tokenize(content).into_iter().collect();
            !required_markers.iter().any(|m| line_tokens.contains(*m))
        })
        .map(|(id, _)| id)
        .collect();
    if distractors.len() > task.distractor_budget {
        distractors.sort();
        return Feedback::Failure {
            cause: FailureCause::OverConnection { distractors: Some(distractors) },
        };
    }

    if let Some(trap) = task.granularity_trap {
        let fact = &world.facts[trap.0 as usize];
        if fact.chaff.iter().any(|c| tokens.contains(c)) {
            return Feedback::Failure {
                cause: FailureCause::GranularityMismatch {
                    direction: ReshapeDirection::Refine,
                    target: trap,
                },
            };
        }
    }

    Feedback::Success
}

/// Executor bound to one world; unknown task ids succeed vacuously, which
/// lets consolidation re-run hand-made episodes without special cases.
pub struct SimExecutor {
    world: SyntheticWorld,
    by_id: BTreeMap<String, usize>,
}

impl SimExecutor {
    pub fn new(world: SyntheticWorld) -> Self {
        let by_id = world
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.clone(), i))
            .collect();
        SimExecutor { world, by_id }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }
}

impl Executor for SimExecutor {
    fn execute(&self, task_id: &str, context: &ContextString) -> Result<Feedback, AdapterError> {
        Ok(match self.by_id.get(task_id) {
            Some(&i) => synthetic_execute(&self.world, &self.world.tasks[i], context),
            None => Feedback::Success,
        })
    }
}

/// Reference adapters wired to this world's executor and dimension.
pub fn world_suite(world: &SyntheticWorld) -> AdapterSuite {
    AdapterSuite {
        embedder: Arc::new(HashedEmbedder::new(world.config.dimension)),
        verifier: Arc::new(TokenOverlapVerifier::default()),
        inductor: Arc::new(IntersectionInductor),
        reshaper: Arc::new(HalvingReshaper),
        attributor: Arc::new(RuleAttributor),
        executor: Arc::new(SimExecutor::new(world.clone())),
        deterministic: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrRow {
    pub t: usize,
    pub successes: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub t: usize,
    pub task_id: String,
    pub outcome: TaskOutcome,
    pub trace: RefinementTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub sr: Vec<SrRow>,
    /// Mean skill score per scoring pass, averaged over the skills that
    /// reached that pass.
    pub mean_pems: Vec<f64>,
    pub cluster_count: usize,
    pub evolutions: Vec<SkillEvolution>,
    pub traces: Vec<TaskTrace>,
}

impl BenchmarkReport {
    pub fn sr_table(&self) -> String {
        let mut out = String::from("T\tsuccesses\ttotal\trate\n");
        for row in &self.sr {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                row.t, row.successes, row.total, row.rate
            ));
        }
        out
    }

    pub fn pems_table(&self) -> String {
        let mut out = String::from("pass\tmean_pems\n");
        for (k, mean) in self.mean_pems.iter().enumerate() {
            out.push_str(&format!("{k}\t{mean:.6}\n"));
        }
        out
    }
}

fn run_level(
    world: &SyntheticWorld,
    store: &mut impl GraphWrite,
    t: usize,
    suite: &AdapterSuite,
    rcfg: &RetrievalConfig,
    traces: &mut Vec<TaskTrace>,
) -> Result<SrRow, SimError> {
    install(world, store)?;
    let mut successes = 0usize;
    for task in &world.tasks {
        let anchor = StepAnchor::new(&task.id, 0, &task.query, "");
        let cfg = RefinementConfig { max_rounds: t, bypass_first: false };
        let result = refine_loop(store, &anchor, &cfg, rcfg, suite).map_err(|abort| {
            SimError::Refine { task: task.id.clone(), error: abort.error.to_string() }
        })?;
        let succeeded = result.outcome == TaskOutcome::Success;
        successes += usize::from(succeeded);

        // The episode action: the topic stems (the shared pattern
        // consolidation should find) plus whichever required markers the
        // final context actually surfaced. Failed attempts record only what
        // they found, so hidden facts never leak through failure episodes.
        let final_context = &result.trace.last().expect("trace is never empty").context;
        let seen: BTreeSet<String> = tokenize(&final_context.text).into_iter().collect();
        let stems = &world.topics[task.topic].stems;
        let mut action_tokens: Vec<&str> = Vec::new();
        for stem in stems {
            for _ in 0..STEM_REPEATS {
                action_tokens.push(stem);
            }
        }
        let mut used_nodes = Vec::new();
        for &fid in &task.required_facts {
            let fact = &world.facts[fid.0 as usize];
            if seen.contains(&fact.marker) {
                action_tokens.push(&fact.marker);
                used_nodes.push(fid);
            }
        }
        let trajectory = Trajectory {
            task_id: task.id.clone(),
            steps: vec![(String::new(), action_tokens.join(" "))],
            outcome: if succeeded { TrajectoryOutcome::Success } else { TrajectoryOutcome::Failure },
            used_nodes,
        };
        commit_episode(store, &trajectory, suite.embedder.as_ref())
            .map_err(|e| SimError::Refine { task: task.id.clone(), error: e.to_string() })?;

        traces.push(TaskTrace {
            t,
            task_id: task.id.clone(),
            outcome: result.outcome,
            trace: result.trace,
        });
    }
    Ok(SrRow {
        t,
        successes,
        total: world.tasks.len(),
        rate: successes as f64 / world.tasks.len().max(1) as f64,
    })
}

/// Runs the full grid: for each round budget T in 0..=5, every task runs
/// through the refinement loop against a fresh copy of the world (T = 5
/// uses the caller's store so its episodes persist), then consolidation
/// runs on that final store. Deterministic for a fixed world.
pub fn run_benchmark(
    world: &SyntheticWorld,
    store: &mut impl GraphWrite,
    ccfg: &ConsolidationConfig,
) -> Result<BenchmarkReport, SimError> {
    let suite = world_suite(world);
    let rcfg = RetrievalConfig::default();
    let mut sr = Vec::new();
    let mut traces = Vec::new();
    for t in 0..5 {
        let mut scratch = MemoryGraph::new(world.config.dimension);
        sr.push(run_level(world, &mut scratch, t, &suite, &rcfg, &mut traces)?);
    }
    sr.push(run_level(world, store, 5, &suite, &rcfg, &mut traces)?);

    let cluster_count =
        crate::consolidation::cluster_episodes(store.graph(), ccfg.cluster_threshold).len();
    let evolutions = consolidate_loop(store, &suite, ccfg)
        .map_err(|abort| SimError::Consolidation { error: abort.error.to_string() })?;

    let max_passes = evolutions.iter().map(|e| e.reports.len()).max().unwrap_or(0);
    let mean_pems: Vec<f64> = (0..max_passes)
        .map(|k| {
            let scores: Vec<f64> = evolutions
                .iter()
                .filter_map(|e| e.reports.get(k).map(|r| r.score))
                .collect();
            scores.iter().sum::<f64>() / scores.len().max(1) as f64
        })
        .collect();

    Ok(BenchmarkReport { sr, mean_pems, cluster_count, evolutions, traces })
}

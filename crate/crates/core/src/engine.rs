//! Layer-wise reasoning loop.
//!
//! Every active node plans, acts and updates its memory once per layer. Layer `l`
//! reads only the published layer-`l-1` snapshot, so nodes within a layer can run in
//! any order or in parallel; a barrier separates layers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{
    global_aggregate, local_aggregate, ActionContext, ActionError, AggregationOutcome,
    AggregationSettings, ExampleText, TextAggMode, DEFAULT_CHAR_BUDGET, DEFAULT_SEPARATOR,
};
use crate::graph::{LabelVisibility, NodeId, Split, TextAttributedGraph};
use crate::llm::{ChatRequest, LlmBackend, LlmError, Purpose, RequestTag, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::memory::{MemoryBuffer, MemoryError, PromptStrategy};
use crate::prompts::{
    build_planning_prompt, build_prediction_prompt, build_reask_prompt, parse_action_plan,
    parse_prediction, Action, ActionPlan, PromptBudget, PromptSettings, DEFAULT_MAX_PROMPT_TOKENS,
    SYSTEM_TEXT,
};
use crate::retrieval::{EmbeddingProvider, SemanticIndex};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("global aggregation is enabled but no index/embedder was supplied")]
    MissingIndex,
    #[error("layer {layer}: {failed} of {total} node steps failed, above the configured threshold")]
    FailureThresholdExceeded { layer: usize, failed: usize, total: usize },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Immutable map from node to its carried aggregate after `layer`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSnapshot {
    layer: usize,
    texts: Arc<Vec<String>>,
}

impl LayerSnapshot {
    /// Layer 0: every node's original text.
    pub fn initial(graph: &TextAttributedGraph) -> Self {
        Self {
            layer: 0,
            texts: Arc::new(graph.nodes().iter().map(|n| n.text.clone()).collect()),
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn text(&self, v: NodeId) -> &str {
        &self.texts[v]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    /// The next snapshot: `updates` overwrite, everything else carries forward.
    pub fn next(&self, layer: usize, updates: Vec<(NodeId, String)>) -> Self {
        let mut texts = (*self.texts).clone();
        for (v, t) in updates {
            texts[v] = t;
        }
        Self { layer, texts: Arc::new(texts) }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    #[default]
    Llm,
    FixedSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub local: bool,
    pub global: bool,
}

impl Default for ActionMask {
    fn default() -> Self {
        Self { local: true, global: true }
    }
}

impl ActionMask {
    pub fn allows(self, action: Action) -> bool {
        match action {
            Action::LocalAggregate => self.local,
            Action::GlobalAggregate => self.global,
            Action::NoOp => true,
        }
    }
}

impl fmt::Display for ActionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.local, "local"), (self.global, "global")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Which nodes receive a prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    #[default]
    Test,
    Val,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub layers: usize,
    pub k: usize,
    pub local_limit: usize,
    pub global_limit: usize,
    pub hops: usize,
    pub strategy: PromptStrategy,
    pub label_visibility: LabelVisibility,
    pub planner_mode: PlannerMode,
    /// Action for layer `l` is entry `l-1`; the last entry repeats.
    pub fixed_sequence: Vec<Action>,
    pub action_mask: ActionMask,
    pub textagg_mode: TextAggMode,
    pub char_budget: usize,
    pub separator: String,
    pub example_text: ExampleText,
    pub max_prompt_tokens: usize,
    pub max_output_tokens: u32,
    pub workers: usize,
    pub evaluate: EvalScope,
    /// Deterministic sample of at most this many evaluation nodes.
    pub max_eval_nodes: Option<usize>,
    /// Drive every node through the layers, not just the evaluated ones.
    pub plan_all_nodes: bool,
    /// Abort when the failed fraction of a layer's node steps exceeds this.
    pub failure_threshold: f64,
    /// Seeds evaluation-node sampling.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            k: 5,
            local_limit: 5,
            global_limit: 5,
            hops: 1,
            strategy: PromptStrategy::A,
            label_visibility: LabelVisibility::Anonymized,
            planner_mode: PlannerMode::Llm,
            fixed_sequence: vec![Action::LocalAggregate, Action::GlobalAggregate, Action::NoOp],
            action_mask: ActionMask::default(),
            textagg_mode: TextAggMode::Concat,
            char_budget: DEFAULT_CHAR_BUDGET,
            separator: DEFAULT_SEPARATOR.into(),
            example_text: ExampleText::Aggregated,
            max_prompt_tokens: DEFAULT_MAX_PROMPT_TOKENS,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            workers: 4,
            evaluate: EvalScope::Test,
            max_eval_nodes: None,
            plan_all_nodes: false,
            failure_threshold: 0.05,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.into()));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(1..=2).contains(&self.hops) {
            return bad("hops must be 1 or 2");
        }
        if !self.action_mask.local && !self.action_mask.global {
            return bad("action_mask must enable at least one aggregation");
        }
        if self.planner_mode == PlannerMode::FixedSequence && self.fixed_sequence.is_empty() {
            return bad("fixed_sequence is empty");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return bad("failure_threshold must lie in [0, 1]");
        }
        if self.char_budget == 0 || self.max_prompt_tokens == 0 {
            return bad("budgets must be positive");
        }
        Ok(())
    }

    pub fn prompt_settings(&self) -> PromptSettings {
        PromptSettings {
            strategy: self.strategy,
            local_limit: self.local_limit,
            global_limit: self.global_limit,
            budget: PromptBudget { max_prompt_tokens: self.max_prompt_tokens },
            visibility: self.label_visibility,
        }
    }

    pub fn aggregation_settings(&self) -> AggregationSettings {
        AggregationSettings {
            mode: self.textagg_mode,
            char_budget: self.char_budget,
            separator: self.separator.clone(),
            hops: self.hops,
            k: self.k,
            example_text: self.example_text,
        }
    }

    fn fixed_action(&self, layer: usize) -> Action {
        let i = (layer - 1).min(self.fixed_sequence.len() - 1);
        self.fixed_sequence[i]
    }
}

/// Shared read-only collaborators of a run.
pub struct Services<'a, T: Scalar> {
    pub llm: &'a dyn LlmBackend,
    pub index: Option<&'a SemanticIndex<T>>,
    pub embedder: Option<&'a dyn EmbeddingProvider<T>>,
}

impl<'a, T: Scalar> Services<'a, T> {
    pub fn new(llm: &'a dyn LlmBackend) -> Self {
        Self { llm, index: None, embedder: None }
    }

    pub fn with_retrieval(
        mut self,
        index: &'a SemanticIndex<T>,
        embedder: &'a dyn EmbeddingProvider<T>,
    ) -> Self {
        self.index = Some(index);
        self.embedder = Some(embedder);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    ParseFallback { reason: String },
    MaskedAction { action: Action },
    PlanningFailure { reason: String },
    ActionFailure { action: Action, reason: String },
    SummarizeFallback { action: Action, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub prompt: Option<String>,
    pub raw_reply: Option<String>,
    pub plan: Vec<Action>,
    pub executed: Vec<Action>,
    pub events: Vec<EngineEvent>,
    pub examples_shown: usize,
    pub examples_dropped: usize,
    /// Token cap the planning prompt applied to node and example texts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_cap: Option<usize>,
    /// Entries appended to memory this layer.
    pub memory_added: usize,
}

impl LayerRecord {
    fn failed(&self) -> bool {
        self.events.iter().any(|e| {
            matches!(e, EngineEvent::PlanningFailure { .. } | EngineEvent::ActionFailure { .. })
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub prompt: Option<String>,
    pub raw_reply: Option<String>,
    pub reask_reply: Option<String>,
    pub predicted: Option<usize>,
    pub gold: Option<usize>,
    pub correct: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub node_id: NodeId,
    pub layers: Vec<LayerRecord>,
    pub prediction: Option<PredictionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub label: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CallCounts {
    pub plan: u64,
    pub predict: u64,
    pub reask: u64,
    pub summarize: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.plan + self.predict + self.reask + self.summarize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub evaluated: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Executed actions summed over all node-layer steps.
    pub action_histogram: BTreeMap<String, usize>,
    pub parse_fallbacks: usize,
    /// Parse fallbacks per planning reply received.
    pub fallback_rate: f64,
    pub masked_actions: usize,
    pub planning_failures: usize,
    pub action_failures: usize,
    pub summarize_fallbacks: usize,
    pub invalid_predictions: usize,
    pub llm_calls: CallCounts,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// Prediction per evaluated node; `None` is an invalid prediction.
    pub predictions: BTreeMap<NodeId, Option<usize>>,
    pub traces: Vec<NodeTrace>,
    /// Final memories of the active nodes, by ascending node id.
    pub buffers: Vec<MemoryBuffer>,
    /// Snapshot 0 through snapshot L.
    pub snapshots: Vec<LayerSnapshot>,
    pub metrics: RunMetrics,
}

/// Counts calls by purpose as they pass to the real backend.
struct CountingBackend<'a> {
    inner: &'a dyn LlmBackend,
    plan: AtomicU64,
    predict: AtomicU64,
    reask: AtomicU64,
    summarize: AtomicU64,
}

impl<'a> CountingBackend<'a> {
    fn new(inner: &'a dyn LlmBackend) -> Self {
        Self {
            inner,
            plan: AtomicU64::new(0),
            predict: AtomicU64::new(0),
            reask: AtomicU64::new(0),
            summarize: AtomicU64::new(0),
        }
    }

    fn counts(&self) -> CallCounts {
        CallCounts {
            plan: self.plan.load(Ordering::Relaxed),
            predict: self.predict.load(Ordering::Relaxed),
            reask: self.reask.load(Ordering::Relaxed),
            summarize: self.summarize.load(Ordering::Relaxed),
        }
    }
}

impl LlmBackend for CountingBackend<'_> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let counter = match request.tag.purpose {
            Purpose::Plan => &self.plan,
            Purpose::Predict => &self.predict,
            Purpose::Reask => &self.reask,
            Purpose::Summarize | Purpose::Compress => &self.summarize,
        };
        counter.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(request)
    }
}

/// Plans, executes and folds one layer for node `v`. Returns the layer record; the
/// executed actions are in `record.executed`.
pub fn run_node_layer<T: Scalar>(
    v: NodeId,
    layer: usize,
    graph: &TextAttributedGraph,
    snapshot: &LayerSnapshot,
    buffer: &mut MemoryBuffer,
    config: &RunConfig,
    services: &Services<'_, T>,
) -> Result<LayerRecord, EngineError> {
    debug_assert_eq!(snapshot.layer() + 1, layer, "layer reads the previous snapshot");
    let mut record = LayerRecord {
        layer,
        prompt: None,
        raw_reply: None,
        plan: Vec::new(),
        executed: Vec::new(),
        events: Vec::new(),
        examples_shown: 0,
        examples_dropped: 0,
        text_cap: None,
        memory_added: 0,
    };

    let plan = match config.planner_mode {
        PlannerMode::FixedSequence => {
            ActionPlan::from_actions(&[config.fixed_action(layer)], "")
        }
        PlannerMode::Llm => {
            match build_planning_prompt(buffer, graph.label_space(), &config.prompt_settings()) {
                Err(e) => {
                    record.events.push(EngineEvent::PlanningFailure { reason: e.to_string() });
                    ActionPlan::from_actions(&[Action::NoOp], "")
                }
                Ok(prompt) => {
                    record.examples_shown = prompt.examples_shown;
                    record.examples_dropped = prompt.examples_dropped;
                    record.text_cap = prompt.text_cap;
                    let req = ChatRequest::new(
                        SYSTEM_TEXT,
                        prompt.text.as_str(),
                        RequestTag::new(v, layer, Purpose::Plan),
                    )
                    .with_max_output_tokens(config.max_output_tokens);
                    record.prompt = Some(prompt.text);
                    match services.llm.complete(&req) {
                        Ok(reply) => {
                            let plan = parse_action_plan(&reply);
                            if let Some(reason) = &plan.fallback {
                                record.events.push(EngineEvent::ParseFallback { reason: reason.clone() });
                            }
                            record.raw_reply = Some(reply);
                            plan
                        }
                        Err(e) => {
                            log::warn!("planning for node {v} at layer {layer} failed: {e}");
                            record.events.push(EngineEvent::PlanningFailure { reason: e.to_string() });
                            ActionPlan::from_actions(&[Action::NoOp], "")
                        }
                    }
                }
            }
        }
    };
    record.plan = plan.actions.clone();

    let mut allowed = Vec::with_capacity(2);
    for &a in &plan.actions {
        if config.action_mask.allows(a) {
            allowed.push(a);
        } else {
            record.events.push(EngineEvent::MaskedAction { action: a });
        }
    }
    let executed = ActionPlan::from_actions(&allowed, "").actions;

    let settings = config.aggregation_settings();
    let ctx = ActionContext {
        graph,
        snapshot,
        settings: &settings,
        llm: Some(services.llm),
        layer,
    };
    for &action in &executed {
        let outcome: Result<AggregationOutcome, ActionError> = match action {
            Action::NoOp => continue,
            Action::LocalAggregate => local_aggregate(v, &ctx),
            Action::GlobalAggregate => match (services.index, services.embedder) {
                (Some(index), Some(embedder)) => global_aggregate(v, &ctx, index, embedder),
                _ => Err(ActionError::MissingIndex),
            },
        };
        match outcome {
            Ok(out) => {
                if let Some(reason) = out.degraded {
                    record.events.push(EngineEvent::SummarizeFallback { action, reason });
                }
                let r = out.result;
                record.memory_added += buffer.append_layer_results(
                    layer,
                    Some((r.source, r.new_aggregate)),
                    &r.examples,
                    graph,
                )?;
            }
            Err(e) => {
                log::warn!("{action} for node {v} at layer {layer} failed: {e}");
                record.events.push(EngineEvent::ActionFailure { action, reason: e.to_string() });
            }
        }
    }
    record.executed = executed;
    Ok(record)
}

struct NodeState {
    v: NodeId,
    buffer: MemoryBuffer,
    layers: Vec<LayerRecord>,
}

fn worker_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool builds")
}

/// Runs layer `snapshot.layer() + 1` for every state and publishes the next snapshot
/// once all of them have finished.
fn run_layer_states<T: Scalar>(
    graph: &TextAttributedGraph,
    snapshot: &LayerSnapshot,
    states: &mut [NodeState],
    config: &RunConfig,
    services: &Services<'_, T>,
    pool: &rayon::ThreadPool,
) -> Result<LayerSnapshot, EngineError> {
    let layer = snapshot.layer() + 1;
    let results: Vec<Result<bool, EngineError>> = pool.install(|| {
        states
            .par_iter_mut()
            .map(|s| {
                let rec = run_node_layer(s.v, layer, graph, snapshot, &mut s.buffer, config, services)?;
                let failed = rec.failed();
                s.layers.push(rec);
                Ok(failed)
            })
            .collect()
    });
    let mut failed = 0;
    for r in results {
        failed += usize::from(r?);
    }
    let total = states.len();
    if total > 0 && failed as f64 / total as f64 > config.failure_threshold {
        return Err(EngineError::FailureThresholdExceeded { layer, failed, total });
    }
    let updates = states
        .iter()
        .map(|s| (s.v, s.buffer.carried_text().to_owned()))
        .collect();
    Ok(snapshot.next(layer, updates))
}

/// One synchronized layer over the given buffers (each buffer's owner is its node).
pub fn run_layer<T: Scalar>(
    graph: &TextAttributedGraph,
    snapshot: &LayerSnapshot,
    buffers: &mut Vec<MemoryBuffer>,
    config: &RunConfig,
    services: &Services<'_, T>,
) -> Result<(LayerSnapshot, Vec<LayerRecord>), EngineError> {
    let mut states: Vec<NodeState> = buffers
        .drain(..)
        .map(|b| NodeState { v: b.node_id(), buffer: b, layers: Vec::new() })
        .collect();
    let pool = worker_pool(config.workers);
    let result = run_layer_states(graph, snapshot, &mut states, config, services, &pool);
    let mut records = Vec::with_capacity(states.len());
    for s in states {
        buffers.push(s.buffer);
        records.extend(s.layers);
    }
    result.map(|snap| (snap, records))
}

/// Nodes that receive a prediction, ascending.
pub fn evaluation_nodes(graph: &TextAttributedGraph, config: &RunConfig) -> Vec<NodeId> {
    let mut ids = match config.evaluate {
        EvalScope::Test => graph.split_ids(Split::Test),
        EvalScope::Val => graph.split_ids(Split::Val),
        EvalScope::All => (0..graph.node_count()).collect(),
    };
    if let Some(limit) = config.max_eval_nodes {
        if limit < ids.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            ids.shuffle(&mut rng);
            ids.truncate(limit);
            ids.sort_unstable();
        }
    }
    ids
}

fn predict_node(
    v: NodeId,
    graph: &TextAttributedGraph,
    buffer: &MemoryBuffer,
    config: &RunConfig,
    llm: &dyn LlmBackend,
) -> PredictionRecord {
    let labels = graph.label_space();
    let gold = graph.gold_label(v);
    let mut rec = PredictionRecord {
        prompt: None,
        raw_reply: None,
        reask_reply: None,
        predicted: None,
        gold,
        correct: false,
        error: None,
    };
    let prompt = match build_prediction_prompt(buffer, labels, &config.prompt_settings()) {
        Ok(p) => p.text,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let layer = config.layers + 1;
    let ask = |text: &str, purpose| {
        llm.complete(
            &ChatRequest::new(SYSTEM_TEXT, text, RequestTag::new(v, layer, purpose))
                .with_max_output_tokens(config.max_output_tokens),
        )
    };
    let first = ask(&prompt, Purpose::Predict);
    rec.prompt = Some(prompt.clone());
    let reply = match first {
        Ok(r) => r,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    match parse_prediction(&reply, labels) {
        Ok(p) => rec.predicted = Some(p.label_index),
        Err(first_err) => {
            let reask = build_reask_prompt(&prompt, labels, config.label_visibility);
            match ask(&reask, Purpose::Reask) {
                Ok(second) => {
                    match parse_prediction(&second, labels) {
                        Ok(p) => rec.predicted = Some(p.label_index),
                        Err(e) => rec.error = Some(format!("{first_err}; after re-ask: {e}")),
                    }
                    rec.reask_reply = Some(second);
                }
                Err(e) => rec.error = Some(format!("{first_err}; re-ask failed: {e}")),
            }
        }
    }
    rec.raw_reply = Some(reply);
    rec.correct = rec.predicted.is_some() && rec.predicted == gold;
    rec
}

/// Full inference: initialize memories, run `layers` synchronized layers, then one
/// prediction per evaluated node.
pub fn run_inference<T: Scalar>(
    graph: &TextAttributedGraph,
    config: &RunConfig,
    services: &Services<'_, T>,
) -> Result<InferenceOutput, EngineError> {
    config.validate()?;
    if config.action_mask.global && (services.index.is_none() || services.embedder.is_none()) {
        return Err(EngineError::MissingIndex);
    }
    let started = Instant::now();
    let counting = CountingBackend::new(services.llm);
    let counted = Services { llm: &counting, index: services.index, embedder: services.embedder };

    let evaluated = evaluation_nodes(graph, config);
    let active: Vec<NodeId> = if config.plan_all_nodes {
        (0..graph.node_count()).collect()
    } else {
        evaluated.clone()
    };
    let mut states: Vec<NodeState> = active
        .iter()
        .map(|&v| NodeState {
            v,
            buffer: MemoryBuffer::init(&graph.nodes()[v]),
            layers: Vec::with_capacity(config.layers),
        })
        .collect();

    let pool = worker_pool(config.workers);
    let mut snapshots = vec![LayerSnapshot::initial(graph)];
    for _ in 0..config.layers {
        let prev = snapshots.last().expect("snapshot 0 exists");
        let next = run_layer_states(graph, prev, &mut states, config, &counted, &pool)?;
        log::info!("layer {} published ({} active nodes)", next.layer(), states.len());
        snapshots.push(next);
    }

    let is_evaluated = |v: NodeId| evaluated.binary_search(&v).is_ok();
    let predictions: Vec<(NodeId, PredictionRecord)> = pool.install(|| {
        states
            .par_iter()
            .filter(|s| is_evaluated(s.v))
            .map(|s| (s.v, predict_node(s.v, graph, &s.buffer, config, &counting)))
            .collect()
    });
    let mut by_node: BTreeMap<NodeId, PredictionRecord> = predictions.into_iter().collect();

    let mut traces = Vec::with_capacity(states.len());
    let mut buffers = Vec::with_capacity(states.len());
    for s in states {
        traces.push(NodeTrace { node_id: s.v, layers: s.layers, prediction: by_node.remove(&s.v) });
        buffers.push(s.buffer);
    }
    let predictions: BTreeMap<NodeId, Option<usize>> = traces
        .iter()
        .filter_map(|t| t.prediction.as_ref().map(|p| (t.node_id, p.predicted)))
        .collect();
    let metrics = compute_metrics(graph, &traces, counting.counts(), started.elapsed().as_secs_f64());
    Ok(InferenceOutput { predictions, traces, buffers, snapshots, metrics })
}

fn compute_metrics(
    graph: &TextAttributedGraph,
    traces: &[NodeTrace],
    calls: CallCounts,
    wall_clock_secs: f64,
) -> RunMetrics {
    let labels = graph.label_space();
    let mut class_totals = vec![(0usize, 0usize); labels.class_count];
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    let (mut evaluated, mut correct, mut invalid) = (0, 0, 0);
    let (mut fallbacks, mut masked, mut plan_fail, mut act_fail, mut sum_fb, mut replies) =
        (0, 0, 0, 0, 0, 0usize);
    for t in traces {
        for l in &t.layers {
            replies += usize::from(l.raw_reply.is_some());
            for a in &l.executed {
                *histogram.entry(a.wire_name().to_owned()).or_default() += 1;
            }
            for e in &l.events {
                match e {
                    EngineEvent::ParseFallback { .. } => fallbacks += 1,
                    EngineEvent::MaskedAction { .. } => masked += 1,
                    EngineEvent::PlanningFailure { .. } => plan_fail += 1,
                    EngineEvent::ActionFailure { .. } => act_fail += 1,
                    EngineEvent::SummarizeFallback { .. } => sum_fb += 1,
                }
            }
        }
        if let Some(p) = &t.prediction {
            evaluated += 1;
            correct += usize::from(p.correct);
            invalid += usize::from(p.predicted.is_none());
            if let Some(g) = p.gold {
                class_totals[g].0 += 1;
                class_totals[g].1 += usize::from(p.correct);
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    RunMetrics {
        evaluated,
        correct,
        accuracy: ratio(correct, evaluated),
        per_class: class_totals
            .iter()
            .enumerate()
            .map(|(class, &(total, ok))| ClassAccuracy {
                class,
                label: labels.raw_name(class),
                total,
                correct: ok,
                accuracy: ratio(ok, total),
            })
            .collect(),
        action_histogram: histogram,
        parse_fallbacks: fallbacks,
        fallback_rate: ratio(fallbacks, replies),
        masked_actions: masked,
        planning_failures: plan_fail,
        action_failures: act_fail,
        summarize_fallbacks: sum_fb,
        invalid_predictions: invalid,
        llm_calls: calls,
        wall_clock_secs,
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, EngineError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| EngineError::Io { path: path.to_owned(), source })
}

/// Writes `metrics.json`, `predictions.csv`, `traces.jsonl` and `memory.jsonl` into `dir`.
pub fn write_run_artifacts(
    graph: &TextAttributedGraph,
    output: &InferenceOutput,
    dir: &Path,
) -> Result<(), EngineError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source: std::io::Error| EngineError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;

    let path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&output.metrics).expect("metrics serialize");
    std::fs::write(&path, json + "\n").map_err(io(&path))?;

    let path = dir.join("predictions.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let labels = graph.label_space();
    let name = |c: Option<usize>| c.map(|c| labels.raw_name(c)).unwrap_or_default();
    let csv_err = |e: csv::Error| EngineError::Io {
        path: path.clone(),
        source: std::io::Error::other(e),
    };
    w.write_record(["node_id", "gold", "predicted", "correct"]).map_err(csv_err)?;
    for t in &output.traces {
        if let Some(p) = &t.prediction {
            w.write_record([
                graph.nodes()[t.node_id].external_id.as_str(),
                &name(p.gold),
                &name(p.predicted),
                if p.correct { "true" } else { "false" },
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join("traces.jsonl");
    let mut w = create(&path)?;
    for t in &output.traces {
        let line = serde_json::to_string(t).expect("trace serializes");
        writeln!(w, "{line}").map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join("memory.jsonl");
    let mut w = create(&path)?;
    for b in &output.buffers {
        for e in b.entries() {
            let mut value = serde_json::to_value(e).expect("entry serializes");
            value["node_id"] = b.node_id().into();
            writeln!(w, "{value}").map_err(io(&path))?;
        }
    }
    w.flush().map_err(io(&path))
}

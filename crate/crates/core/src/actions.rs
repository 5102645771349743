//! The node actions: local aggregation, global aggregation and NoOp.
//!
//! Actions read the previous layer's [`LayerSnapshot`] and the immutable graph/index
//! only; they never touch a memory buffer. The owning node folds the returned
//! [`AggregationResult`] into its memory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::LayerSnapshot;
use crate::graph::{GraphError, NodeId, RawNode, TextAttributedGraph};
use crate::llm::{ChatRequest, LlmBackend, LlmError, Purpose, RequestTag};
use crate::memory::{ExampleInput, Source};
use crate::prompts::{build_compress_prompt, build_summarize_prompt, SUMMARIZE_SYSTEM_TEXT};
use crate::retrieval::{EmbeddingProvider, RetrievalError, SemanticIndex};
use crate::scalar::Scalar;

pub const DEFAULT_SEPARATOR: &str = " ∥ ";
pub const DEFAULT_CHAR_BUDGET: usize = 1200;

#[derive(Debug, Error)]
pub enum ActionError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("embedding the query of node {node} failed: {message}")]
    EmbedderFailure { node: NodeId, message: String },
    #[error("summarization failed: {0}")]
    SummarizeBackendFailure(String),
    #[error("global aggregation requested but no index was built")]
    MissingIndex,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextAggMode {
    #[default]
    Concat,
    Summarize,
}

/// Which text a neighbor contributes as a few-shot example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleText {
    /// The neighbor's previous-layer aggregate.
    #[default]
    Aggregated,
    /// The neighbor's original text.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationSettings {
    pub mode: TextAggMode,
    pub char_budget: usize,
    pub separator: String,
    pub hops: usize,
    pub k: usize,
    pub example_text: ExampleText,
}

impl Default for AggregationSettings {
    fn default() -> Self {
        Self {
            mode: TextAggMode::Concat,
            char_budget: DEFAULT_CHAR_BUDGET,
            separator: DEFAULT_SEPARATOR.into(),
            hops: 1,
            k: 5,
            example_text: ExampleText::Aggregated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregationResult {
    pub source: Source,
    pub new_aggregate: String,
    /// Train-split contributors with their labels, in contribution order.
    pub examples: Vec<ExampleInput>,
    pub contributing_nodes: Vec<NodeId>,
}

/// Aggregation output plus a note when summarization degraded to concatenation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregationOutcome {
    pub result: AggregationResult,
    pub degraded: Option<String>,
}

/// `self_text` followed by each neighbor text, joined by `separator` and cut to
/// `char_budget` characters. `self_text` itself is never cut.
pub fn concat_texts(self_text: &str, neighbor_texts: &[&str], separator: &str, char_budget: usize) -> String {
    let mut out = self_text.to_owned();
    for t in neighbor_texts {
        out.push_str(separator);
        out.push_str(t);
    }
    let limit = char_budget.max(self_text.chars().count());
    if let Some((cut, _)) = out.char_indices().nth(limit) {
        out.truncate(cut);
    }
    out
}

/// First `max_chars` characters of `text`.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((cut, _)) => &text[..cut],
        None => text,
    }
}

/// Natural-language aggregation of a node's text with its neighbors' texts.
pub fn text_agg(
    self_text: &str,
    neighbor_texts: &[&str],
    settings: &AggregationSettings,
    summarizer: Option<(&dyn LlmBackend, RequestTag)>,
) -> Result<String, ActionError> {
    if neighbor_texts.is_empty() {
        return Ok(self_text.to_owned());
    }
    match settings.mode {
        TextAggMode::Concat => Ok(concat_texts(
            self_text,
            neighbor_texts,
            &settings.separator,
            settings.char_budget,
        )),
        TextAggMode::Summarize => {
            let (llm, tag) = summarizer.ok_or_else(|| {
                ActionError::SummarizeBackendFailure("no backend configured".into())
            })?;
            let prompt = build_summarize_prompt(self_text, neighbor_texts, settings.char_budget);
            let reply = llm
                .complete(&ChatRequest::new(SUMMARIZE_SYSTEM_TEXT, prompt, tag))
                .map_err(|e| ActionError::SummarizeBackendFailure(e.to_string()))?;
            let summary = truncate_chars(reply.trim(), settings.char_budget);
            if summary.is_empty() {
                return Err(ActionError::SummarizeBackendFailure("empty summary".into()));
            }
            Ok(summary.to_owned())
        }
    }
}

/// Shared, read-only inputs of an action.
#[derive(Clone, Copy)]
pub struct ActionContext<'a> {
    pub graph: &'a TextAttributedGraph,
    pub snapshot: &'a LayerSnapshot,
    pub settings: &'a AggregationSettings,
    /// Needed only in summarize mode.
    pub llm: Option<&'a dyn LlmBackend>,
    /// Layer being computed (the snapshot holds layer - 1).
    pub layer: usize,
}

impl ActionContext<'_> {
    fn example_text(&self, u: NodeId) -> String {
        match self.settings.example_text {
            ExampleText::Aggregated => self.snapshot.text(u).to_owned(),
            ExampleText::Raw => self.graph.text(u).to_owned(),
        }
    }

    fn aggregate(&self, v: NodeId, neighbor_ids: &[NodeId], seq: usize) -> (String, Option<String>) {
        let own = self.snapshot.text(v);
        let texts: Vec<&str> = neighbor_ids.iter().map(|&u| self.snapshot.text(u)).collect();
        let tag = RequestTag::new(v, self.layer, Purpose::Summarize).with_seq(seq);
        match text_agg(own, &texts, self.settings, self.llm.map(|l| (l, tag))) {
            Ok(text) => (text, None),
            Err(e) => {
                let concat = AggregationSettings {
                    mode: TextAggMode::Concat,
                    ..self.settings.clone()
                };
                let text = text_agg(own, &texts, &concat, None).expect("concat cannot fail");
                (text, Some(e.to_string()))
            }
        }
    }
}

/// Aggregates the structural neighborhood of `v` (ascending node id) and collects its
/// train-labeled members as examples.
pub fn local_aggregate(v: NodeId, ctx: &ActionContext<'_>) -> Result<AggregationOutcome, ActionError> {
    let neighbors = ctx.graph.neighbors(v, ctx.settings.hops)?;
    let (new_aggregate, degraded) = ctx.aggregate(v, &neighbors, 0);
    let examples = neighbors
        .iter()
        .enumerate()
        .filter_map(|(rank, &u)| {
            ctx.graph.visible_label(u).map(|label| ExampleInput {
                origin_node: u,
                text: ctx.example_text(u),
                label,
                source: Source::Local,
                rank,
            })
        })
        .collect();
    Ok(AggregationOutcome {
        result: AggregationResult {
            source: Source::Local,
            new_aggregate,
            examples,
            contributing_nodes: neighbors,
        },
        degraded,
    })
}

/// Retrieves the top-k semantic neighbors of `v`'s previous-layer aggregate and
/// aggregates them in rank order.
pub fn global_aggregate<T: Scalar>(
    v: NodeId,
    ctx: &ActionContext<'_>,
    index: &SemanticIndex<T>,
    embedder: &dyn EmbeddingProvider<T>,
) -> Result<AggregationOutcome, ActionError> {
    ctx.graph.node(v)?;
    let query = embedder
        .embed_one(ctx.snapshot.text(v))
        .map_err(|e| ActionError::EmbedderFailure {
            node: v,
            message: e.to_string(),
        })?;
    let hits = index.top_k(&query, ctx.settings.k, &[v])?;
    let retrieved: Vec<NodeId> = hits.iter().map(|h| h.node_id).collect();
    let (new_aggregate, degraded) = ctx.aggregate(v, &retrieved, 1);
    let examples = hits
        .iter()
        .enumerate()
        .filter_map(|(rank, h)| {
            h.label.map(|label| ExampleInput {
                origin_node: h.node_id,
                text: ctx.example_text(h.node_id),
                label,
                source: Source::Global,
                rank,
            })
        })
        .collect();
    Ok(AggregationOutcome {
        result: AggregationResult {
            source: Source::Global,
            new_aggregate,
            examples,
            contributing_nodes: retrieved,
        },
        degraded,
    })
}

/// Deliberately doing nothing: there is no result to fold into memory.
pub fn no_op(_v: NodeId) -> Option<AggregationResult> {
    None
}

/// Optional pre-pass shortening every node text with the LLM before a graph is built.
/// Texts already within `char_budget` characters are kept; failures keep the original.
pub fn compress_node_texts(nodes: Vec<RawNode>, llm: &dyn LlmBackend, char_budget: usize) -> (Vec<RawNode>, usize) {
    let mut failures = 0;
    let out = nodes
        .into_iter()
        .enumerate()
        .map(|(i, mut n)| {
            if n.text.chars().count() > char_budget {
                let req = ChatRequest::new(
                    SUMMARIZE_SYSTEM_TEXT,
                    build_compress_prompt(&n.text, char_budget),
                    RequestTag::new(i, 0, Purpose::Compress),
                );
                match llm.complete(&req) {
                    Ok(r) if !r.trim().is_empty() => {
                        n.text = truncate_chars(r.trim(), char_budget).to_owned()
                    }
                    Ok(_) | Err(LlmError::EmptyRequest) | Err(_) => failures += 1,
                }
            }
            n
        })
        .collect();
    (out, failures)
}

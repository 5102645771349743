//! Per-node private memory: original text, aggregated texts and labeled examples.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, NodeRecord, TextAttributedGraph};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("node {node}: example from node {origin} which is not a train node")]
    LabelLeakage { node: NodeId, origin: NodeId },
    #[error("label {label} out of range for {class_count} classes")]
    InvalidLabel { label: usize, class_count: usize },
    #[error("layer results must target layer >= 1, got {0}")]
    InvalidLayer(usize),
    #[error("aggregates and examples must come from a local or global source")]
    InvalidSource,
    #[error("malformed memory trace at entry {index}: {reason}")]
    MalformedTrace { index: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    OriginalText,
    AggregatedText,
    LabeledExample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[serde(rename = "self")]
    Own,
    Local,
    Global,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Own => "self",
            Source::Local => "local",
            Source::Global => "global",
        })
    }
}

/// Which example sections make it into a prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptStrategy {
    /// Local and global examples, always.
    #[default]
    A,
    /// Global examples only while fewer than two local examples are stored.
    B,
}

impl std::str::FromStr for PromptStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(format!("unknown prompt strategy {other:?}")),
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub kind: EntryKind,
    pub source: Source,
    pub layer: usize,
    pub text: String,
    pub label: Option<usize>,
    pub origin_node: Option<NodeId>,
    /// Retrieval rank (0-based) for global examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

/// A labeled example about to be written into memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExampleInput {
    pub origin_node: NodeId,
    pub text: String,
    pub label: usize,
    pub source: Source,
    pub rank: usize,
}

/// Append-only memory of a single node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryBuffer {
    node_id: NodeId,
    entries: Vec<MemoryEntry>,
    // indices into `entries`; 0 is the original text
    local_aggregate: usize,
    global_aggregate: usize,
    carried: usize,
    stored: HashSet<(NodeId, Source)>,
}

impl MemoryBuffer {
    pub fn init(node: &NodeRecord) -> Self {
        Self::with_text(node.node_id, node.text.clone())
    }

    pub fn with_text(node_id: NodeId, text: String) -> Self {
        Self {
            node_id,
            entries: vec![MemoryEntry {
                kind: EntryKind::OriginalText,
                source: Source::Own,
                layer: 0,
                text,
                label: None,
                origin_node: None,
                rank: None,
            }],
            local_aggregate: 0,
            global_aggregate: 0,
            carried: 0,
            stored: HashSet::new(),
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn original_text(&self) -> &str {
        &self.entries[0].text
    }

    /// Latest aggregated text for `source`; the original text if none yet.
    pub fn current_aggregate(&self, source: Source) -> &str {
        match source {
            Source::Own => self.original_text(),
            Source::Local => &self.entries[self.local_aggregate].text,
            Source::Global => &self.entries[self.global_aggregate].text,
        }
    }

    /// The node's aggregated feature as seen by other nodes: the most recently
    /// written aggregate of either source.
    pub fn carried_text(&self) -> &str {
        &self.entries[self.carried].text
    }

    pub fn examples(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::LabeledExample)
    }

    pub fn example_count(&self) -> usize {
        self.examples().count()
    }

    pub fn example_count_from(&self, source: Source) -> usize {
        self.examples().filter(|e| e.source == source).count()
    }

    /// Folds one action's output into memory. Returns the number of entries appended.
    ///
    /// Examples whose `(origin_node, source)` is already stored are skipped. Every
    /// example origin must be a train node; a violation fails the whole call and leaves
    /// the buffer untouched.
    pub fn append_layer_results(
        &mut self,
        layer: usize,
        aggregate: Option<(Source, String)>,
        examples: &[ExampleInput],
        graph: &TextAttributedGraph,
    ) -> Result<usize, MemoryError> {
        if layer == 0 {
            return Err(MemoryError::InvalidLayer(layer));
        }
        let class_count = graph.label_space().class_count;
        if matches!(aggregate, Some((Source::Own, _))) {
            return Err(MemoryError::InvalidSource);
        }
        for ex in examples {
            if ex.source == Source::Own {
                return Err(MemoryError::InvalidSource);
            }
            if !graph.is_train(ex.origin_node) {
                return Err(MemoryError::LabelLeakage {
                    node: self.node_id,
                    origin: ex.origin_node,
                });
            }
            if ex.label >= class_count {
                return Err(MemoryError::InvalidLabel {
                    label: ex.label,
                    class_count,
                });
            }
        }

        let before = self.entries.len();
        if let Some((source, text)) = aggregate {
            self.push(MemoryEntry {
                kind: EntryKind::AggregatedText,
                source,
                layer,
                text,
                label: None,
                origin_node: None,
                rank: None,
            });
        }
        for ex in examples {
            if self.stored.contains(&(ex.origin_node, ex.source)) {
                continue;
            }
            self.push(MemoryEntry {
                kind: EntryKind::LabeledExample,
                source: ex.source,
                layer,
                text: ex.text.clone(),
                label: Some(ex.label),
                origin_node: Some(ex.origin_node),
                rank: (ex.source == Source::Global).then_some(ex.rank),
            });
        }
        Ok(self.entries.len() - before)
    }

    fn push(&mut self, entry: MemoryEntry) {
        let idx = self.entries.len();
        match entry.kind {
            EntryKind::AggregatedText => {
                match entry.source {
                    Source::Local => self.local_aggregate = idx,
                    Source::Global => self.global_aggregate = idx,
                    Source::Own => {}
                }
                self.carried = idx;
            }
            EntryKind::LabeledExample => {
                if let Some(origin) = entry.origin_node {
                    self.stored.insert((origin, entry.source));
                }
            }
            EntryKind::OriginalText => {}
        }
        self.entries.push(entry);
    }

    /// Picks the examples shown in a prompt.
    ///
    /// Local examples come in ascending origin id, global ones by retrieval rank (then
    /// insertion order). Strategy B drops the global section once two or more local
    /// examples are stored.
    pub fn select_examples(
        &self,
        strategy: PromptStrategy,
        local_limit: usize,
        global_limit: usize,
    ) -> Vec<&MemoryEntry> {
        let mut local: Vec<&MemoryEntry> =
            self.examples().filter(|e| e.source == Source::Local).collect();
        local.sort_by_key(|e| e.origin_node);
        let include_global = match strategy {
            PromptStrategy::A => true,
            PromptStrategy::B => local.len() < 2,
        };
        local.truncate(local_limit);
        if include_global {
            let mut global: Vec<&MemoryEntry> = self
                .examples()
                .filter(|e| e.source == Source::Global)
                .collect();
            // stable: equal ranks keep insertion order
            global.sort_by_key(|e| e.rank.unwrap_or(usize::MAX));
            global.truncate(global_limit);
            local.extend(global);
        }
        local
    }

    /// JSON Lines dump of the entries, one per line.
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    /// Rebuilds a buffer from its recorded entries.
    pub fn replay(node_id: NodeId, entries: Vec<MemoryEntry>) -> Result<Self, MemoryError> {
        let mut it = entries.into_iter();
        let first = it.next().ok_or(MemoryError::MalformedTrace {
            index: 0,
            reason: "empty trace".into(),
        })?;
        if first.kind != EntryKind::OriginalText || first.source != Source::Own || first.layer != 0
        {
            return Err(MemoryError::MalformedTrace {
                index: 0,
                reason: "first entry must be the original text".into(),
            });
        }
        let mut buf = Self::with_text(node_id, first.text);
        for (i, entry) in it.enumerate() {
            let index = i + 1;
            let bad = |reason: &str| MemoryError::MalformedTrace {
                index,
                reason: reason.into(),
            };
            match entry.kind {
                EntryKind::OriginalText => return Err(bad("second original text")),
                EntryKind::AggregatedText if entry.label.is_some() => {
                    return Err(bad("aggregated text carries a label"))
                }
                EntryKind::LabeledExample
                    if entry.label.is_none() || entry.origin_node.is_none() =>
                {
                    return Err(bad("labeled example without label or origin"))
                }
                _ if entry.source == Source::Own => return Err(bad("non-original self entry")),
                _ => {}
            }
            buf.push(entry);
        }
        Ok(buf)
    }

    pub fn from_jsonl(node_id: NodeId, text: &str) -> Result<Self, MemoryError> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(index, line)| {
                serde_json::from_str(line).map_err(|e| MemoryError::MalformedTrace {
                    index,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::replay(node_id, entries)
    }
}

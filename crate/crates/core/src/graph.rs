//! Text-attributed graph storage: loading, validation, neighborhood queries and splits.
//!
//! Labels of every node are kept, but only train-split labels are reachable through
//! [`TextAttributedGraph::visible_label`]. Everything that feeds the reasoning loop
//! goes through that gate; [`TextAttributedGraph::gold_label`] exists for scoring.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file} line {line}: {reason}")]
    MalformedRecord {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("edge file line {line}: unknown node id {id:?}")]
    DanglingEdge { line: usize, id: String },
    #[error("node file line {line}: node {id:?} has empty text")]
    EmptyText { line: usize, id: String },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("hops must be 1 or 2, got {0}")]
    InvalidHops(usize),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("split assignment is not a partition of the node set: {0}")]
    InvalidSplit(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How class labels are rendered to the LLM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelVisibility {
    #[default]
    Anonymized,
    Named,
}

/// One line of the node file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawNode {
    #[serde(deserialize_with = "string_or_integer")]
    pub id: String,
    pub text: String,
    #[serde(default, deserialize_with = "optional_string_or_integer")]
    pub label: Option<String>,
}

fn scalar_string<E: serde::de::Error>(value: serde_json::Value) -> Result<String, E> {
    match value {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) if n.is_u64() || n.is_i64() => Ok(n.to_string()),
        other => Err(E::custom(format!("expected a string or integer, got {other}"))),
    }
}

fn string_or_integer<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    scalar_string(serde_json::Value::deserialize(d)?)
}

fn optional_string_or_integer<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> Result<Option<String>, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::Null => Ok(None),
        v => scalar_string(v).map(Some),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub node_id: NodeId,
    /// Identifier as it appears in the node file.
    pub external_id: String,
    pub text: String,
    label: Option<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub class_count: usize,
    pub display_names: Option<Vec<String>>,
    pub anonymized_names: Vec<String>,
}

impl LabelSpace {
    pub fn anonymous(class_count: usize) -> Self {
        Self {
            class_count,
            display_names: None,
            anonymized_names: (0..class_count).map(|i| format!("Label_{i}")).collect(),
        }
    }

    pub fn named(names: Vec<String>) -> Self {
        let mut space = Self::anonymous(names.len());
        space.display_names = Some(names);
        space
    }

    /// Derives the label space from the raw label strings of a node file.
    ///
    /// All-integer labels are used as class indices directly; otherwise the distinct
    /// strings are sorted and become display names.
    pub fn from_raw_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = labels.into_iter().collect();
        let numeric: Option<Vec<usize>> = distinct.iter().map(|s| s.parse().ok()).collect();
        match numeric {
            Some(ids) => Self::anonymous(ids.into_iter().max().map_or(0, |m| m + 1)),
            None => Self::named(distinct.into_iter().map(str::to_owned).collect()),
        }
    }

    /// Resolves a raw label string from a node file.
    pub fn index_of(&self, raw: &str) -> Option<usize> {
        match &self.display_names {
            Some(names) => names.iter().position(|n| n == raw),
            None => raw.parse().ok().filter(|&i| i < self.class_count),
        }
    }

    /// Inverse of [`LabelSpace::index_of`].
    pub fn raw_name(&self, index: usize) -> String {
        match &self.display_names {
            Some(names) => names[index].clone(),
            None => index.to_string(),
        }
    }

    /// Label text shown inside prompts.
    pub fn prompt_name(&self, index: usize, visibility: LabelVisibility) -> String {
        match (visibility, &self.display_names) {
            (LabelVisibility::Named, Some(names)) => names[index].clone(),
            _ => format!("Label {index}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), GraphError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0 || *r > 1.0) {
            return Err(GraphError::InvalidRatios(format!("{self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(GraphError::InvalidRatios(format!("{self:?} does not sum to 1")));
        }
        Ok(())
    }

    /// Set sizes for `n` nodes: val and test take the floor of their share, train the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let share = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let val = share(self.val);
        let test = share(self.test).min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<NodeId>,
    pub val_ids: Vec<NodeId>,
    pub test_ids: Vec<NodeId>,
}

impl SplitAssignment {
    fn sorted(mut self) -> Self {
        self.train_ids.sort_unstable();
        self.val_ids.sort_unstable();
        self.test_ids.sort_unstable();
        self
    }

    pub fn ids(&self, split: Split) -> &[NodeId] {
        match split {
            Split::Train => &self.train_ids,
            Split::Val => &self.val_ids,
            Split::Test => &self.test_ids,
        }
    }
}

/// Undirected graph whose nodes carry natural-language text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextAttributedGraph {
    nodes: Vec<NodeRecord>,
    adjacency: Vec<Vec<NodeId>>,
    edge_count: usize,
    label_space: LabelSpace,
    by_external: HashMap<String, NodeId>,
}

impl TextAttributedGraph {
    /// Builds a validated graph from in-memory records. Edge endpoints are external ids.
    ///
    /// Until splits are assigned every node is in the test split, so no label is visible.
    pub fn from_parts(
        nodes: Vec<RawNode>,
        edges: &[(String, String)],
    ) -> Result<Self, GraphError> {
        let label_space =
            LabelSpace::from_raw_labels(nodes.iter().filter_map(|n| n.label.as_deref()));
        Self::from_parts_with_labels(nodes, edges, label_space)
    }

    pub fn from_parts_with_labels(
        nodes: Vec<RawNode>,
        edges: &[(String, String)],
        label_space: LabelSpace,
    ) -> Result<Self, GraphError> {
        let mut by_external = HashMap::with_capacity(nodes.len());
        let mut records = Vec::with_capacity(nodes.len());
        for (i, raw) in nodes.into_iter().enumerate() {
            let line = i + 1;
            if raw.text.trim().is_empty() {
                return Err(GraphError::EmptyText { line, id: raw.id });
            }
            let label = match raw.label.as_deref() {
                None => None,
                Some(s) => Some(label_space.index_of(s).ok_or_else(|| {
                    GraphError::MalformedRecord {
                        file: "nodes".into(),
                        line,
                        reason: format!("label {s:?} is not in the label space"),
                    }
                })?),
            };
            if by_external.insert(raw.id.clone(), i).is_some() {
                return Err(GraphError::MalformedRecord {
                    file: "nodes".into(),
                    line,
                    reason: format!("duplicate node id {:?}", raw.id),
                });
            }
            records.push(NodeRecord {
                node_id: i,
                external_id: raw.id,
                text: raw.text,
                label,
                split: Split::Test,
            });
        }

        let mut pairs = HashSet::new();
        for (i, (src, dst)) in edges.iter().enumerate() {
            let line = i + 2;
            let resolve = |id: &String| {
                by_external
                    .get(id)
                    .copied()
                    .ok_or_else(|| GraphError::DanglingEdge {
                        line,
                        id: id.clone(),
                    })
            };
            let (a, b) = (resolve(src)?, resolve(dst)?);
            if a != b {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
        let mut adjacency = vec![Vec::new(); records.len()];
        for &(a, b) in &pairs {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());

        Ok(Self {
            nodes: records,
            adjacency,
            edge_count: pairs.len(),
            label_space,
            by_external,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of distinct undirected edges.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, v: NodeId) -> Result<&NodeRecord, GraphError> {
        self.nodes.get(v).ok_or(GraphError::UnknownNode(v))
    }

    pub fn resolve(&self, external_id: &str) -> Option<NodeId> {
        self.by_external.get(external_id).copied()
    }

    pub fn text(&self, v: NodeId) -> &str {
        &self.nodes[v].text
    }

    pub fn split_of(&self, v: NodeId) -> Split {
        self.nodes[v].split
    }

    pub fn is_train(&self, v: NodeId) -> bool {
        self.nodes.get(v).is_some_and(|n| n.split == Split::Train)
    }

    /// Label of `v` if, and only if, `v` is a train node.
    pub fn visible_label(&self, v: NodeId) -> Option<usize> {
        self.nodes
            .get(v)
            .filter(|n| n.split == Split::Train)
            .and_then(|n| n.label)
    }

    /// Ground truth for scoring. Never feed this into prompts or memory.
    pub fn gold_label(&self, v: NodeId) -> Option<usize> {
        self.nodes.get(v).and_then(|n| n.label)
    }

    pub fn split_ids(&self, split: Split) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.split == split)
            .map(|n| n.node_id)
            .collect()
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency.get(v).map_or(0, Vec::len)
    }

    /// All nodes within `hops` edges of `v`, excluding `v`, ascending.
    pub fn neighbors(&self, v: NodeId, hops: usize) -> Result<Vec<NodeId>, GraphError> {
        if v >= self.nodes.len() {
            return Err(GraphError::UnknownNode(v));
        }
        match hops {
            1 => Ok(self.adjacency[v].clone()),
            2 => {
                let mut reach: BTreeSet<NodeId> = BTreeSet::new();
                for &u in &self.adjacency[v] {
                    reach.insert(u);
                    reach.extend(self.adjacency[u].iter().copied());
                }
                reach.remove(&v);
                Ok(reach.into_iter().collect())
            }
            other => Err(GraphError::InvalidHops(other)),
        }
    }

    /// Returns a copy of the graph with the given split assignment applied.
    pub fn with_splits(mut self, splits: &SplitAssignment) -> Result<Self, GraphError> {
        let mut seen = vec![None; self.nodes.len()];
        for split in [Split::Train, Split::Val, Split::Test] {
            for &v in splits.ids(split) {
                let slot = seen
                    .get_mut(v)
                    .ok_or_else(|| GraphError::InvalidSplit(format!("unknown node {v}")))?;
                if slot.replace(split).is_some() {
                    return Err(GraphError::InvalidSplit(format!("node {v} assigned twice")));
                }
            }
        }
        if let Some(v) = seen.iter().position(Option::is_none) {
            return Err(GraphError::InvalidSplit(format!("node {v} unassigned")));
        }
        for (node, split) in self.nodes.iter_mut().zip(seen) {
            node.split = split.expect("checked above");
        }
        Ok(self)
    }

    pub fn splits(&self) -> SplitAssignment {
        SplitAssignment {
            train_ids: self.split_ids(Split::Train),
            val_ids: self.split_ids(Split::Val),
            test_ids: self.split_ids(Split::Test),
        }
    }

    /// Writes the node file (JSON Lines) in node id order.
    pub fn write_nodes(&self, path: &Path) -> Result<(), GraphError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        for n in &self.nodes {
            let raw = RawNode {
                id: n.external_id.clone(),
                text: n.text.clone(),
                label: n.label.map(|l| self.label_space.raw_name(l)),
            };
            let line = serde_json::to_string(&raw).expect("node serializes");
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    /// Writes each undirected edge once as `src,dst` with src < dst by node id.
    pub fn write_edges(&self, path: &Path) -> Result<(), GraphError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["src", "dst"]).map_err(|e| csv_err(path, e))?;
        for (a, adj) in self.adjacency.iter().enumerate() {
            for &b in adj.iter().filter(|&&b| b > a) {
                w.write_record([&self.nodes[a].external_id, &self.nodes[b].external_id])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(io_err(path))
    }

    pub fn write_splits(&self, path: &Path) -> Result<(), GraphError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        for n in &self.nodes {
            let line = serde_json::json!({ "id": n.external_id, "split": n.split });
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> GraphError {
    GraphError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn read_node_file(path: &Path) -> Result<Vec<RawNode>, GraphError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut nodes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawNode =
            serde_json::from_str(&line).map_err(|e| GraphError::MalformedRecord {
                file: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if raw.text.trim().is_empty() {
            return Err(GraphError::EmptyText {
                line: i + 1,
                id: raw.id,
            });
        }
        nodes.push(raw);
    }
    Ok(nodes)
}

fn read_edge_file(path: &Path) -> Result<Vec<(String, String)>, GraphError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "src" || &headers[1] != "dst" {
        return Err(GraphError::MalformedRecord {
            file: path.display().to_string(),
            line: 1,
            reason: format!("expected header \"src,dst\", found {headers:?}"),
        });
    }
    let mut edges = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| GraphError::MalformedRecord {
            file: path.display().to_string(),
            line: i + 2,
            reason: e.to_string(),
        })?;
        if rec.len() != 2 {
            return Err(GraphError::MalformedRecord {
                file: path.display().to_string(),
                line: i + 2,
                reason: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        edges.push((rec[0].to_owned(), rec[1].to_owned()));
    }
    Ok(edges)
}

/// Loads a graph from a JSON Lines node file and a `src,dst` CSV edge file.
pub fn load_graph(nodes_path: &Path, edges_path: &Path) -> Result<TextAttributedGraph, GraphError> {
    let nodes = read_node_file(nodes_path)?;
    let edges = read_edge_file(edges_path)?;
    TextAttributedGraph::from_parts(nodes, &edges)
}

#[derive(Deserialize)]
struct SplitLine {
    id: String,
    split: Split,
}

/// Reads an explicit split override (JSON Lines `{"id", "split"}`).
pub fn load_split_file(
    graph: &TextAttributedGraph,
    path: &Path,
) -> Result<SplitAssignment, GraphError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = SplitAssignment::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| GraphError::MalformedRecord {
            file: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let rec: SplitLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let v = graph
            .resolve(&rec.id)
            .ok_or_else(|| malformed(format!("unknown node id {:?}", rec.id)))?;
        match rec.split {
            Split::Train => out.train_ids.push(v),
            Split::Val => out.val_ids.push(v),
            Split::Test => out.test_ids.push(v),
        }
    }
    Ok(out.sorted())
}

/// Seeded random split. Val and test sizes are `floor(n * ratio)`, train takes the remainder.
pub fn make_splits(
    graph: &TextAttributedGraph,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment, GraphError> {
    ratios.validate()?;
    let n = graph.node_count();
    let (train, val, _) = ratios.sizes(n);
    let mut ids: Vec<NodeId> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = ids.split_off(train);
    let (val_ids, test_ids) = rest.split_at(val);
    Ok(SplitAssignment {
        train_ids: ids,
        val_ids: val_ids.to_vec(),
        test_ids: test_ids.to_vec(),
    }
    .sorted())
}

//! Experiment front-end: TOML configs, the ablation grid, multi-seed aggregation and
//! report emission.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    run_inference, write_run_artifacts, ActionMask, EngineError, PlannerMode, RunConfig, RunMetrics,
    Services,
};
use crate::graph::{load_graph, load_split_file, make_splits, GraphError, SplitRatios, TextAttributedGraph};
use crate::llm::{
    backend_from_config, BackendConfig, BackendKind, LlmError, PlannerScript, RecordingBackend,
    ScriptedPolicy,
};
use crate::memory::PromptStrategy;
use crate::retrieval::{
    embed_graph, load_index_for_graph, EmbeddingProvider, EmbeddingVector, HashEmbedder,
    HttpEmbedder, RetrievalError, SemanticIndex,
};
use crate::scalar::{mean, sample_std, Scalar};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{run}: {source}")]
    Engine {
        run: String,
        #[source]
        source: EngineError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_owned(), source }
}

/// Model variants of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPlanning,
    LocalOnly,
    GlobalOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Full, Self::NoPlanning, Self::LocalOnly, Self::GlobalOnly];

    pub fn planner_mode(self) -> PlannerMode {
        match self {
            Self::NoPlanning => PlannerMode::FixedSequence,
            _ => PlannerMode::Llm,
        }
    }

    pub fn action_mask(self) -> ActionMask {
        match self {
            Self::Full | Self::NoPlanning => ActionMask { local: true, global: true },
            Self::LocalOnly => ActionMask { local: true, global: false },
            Self::GlobalOnly => ActionMask { local: false, global: true },
        }
    }

    /// `base` with this variant's planner mode and action mask.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        RunConfig {
            planner_mode: self.planner_mode(),
            action_mask: self.action_mask(),
            ..base.clone()
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoPlanning => "no_planning",
            Self::LocalOnly => "local_only",
            Self::GlobalOnly => "global_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub nodes: PathBuf,
    pub edges: PathBuf,
    /// Fixed split file; when absent each seed draws its own split.
    #[serde(default)]
    pub splits: Option<PathBuf>,
    /// Prebuilt embedding sidecar from `reagan index`.
    #[serde(default)]
    pub index: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash {
        #[serde(default = "default_hash_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Http {
        url: String,
        model: String,
        dim: usize,
        #[serde(default = "default_embed_timeout")]
        timeout_secs: f64,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_embed_in_flight")]
        max_in_flight: usize,
    },
}

fn default_hash_dim() -> usize {
    256
}
fn default_embed_timeout() -> f64 {
    60.0
}
fn default_batch() -> usize {
    64
}
fn default_embed_in_flight() -> usize {
    4
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self::Hash { dim: default_hash_dim(), seed: 0 }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Box<dyn EmbeddingProvider<f32>> {
        match self {
            Self::Hash { dim, seed } => Box::new(HashEmbedder::new(*dim, *seed)),
            Self::Http { url, model, dim, timeout_secs, .. } => Box::new(HttpEmbedder::new(
                url.as_str(),
                model.as_str(),
                *dim,
                Duration::from_secs_f64(timeout_secs.max(0.001)),
            )),
        }
    }

    fn batching(&self) -> (usize, usize) {
        match self {
            Self::Hash { .. } => (256, 1),
            Self::Http { batch_size, max_in_flight, .. } => (*batch_size, *max_in_flight),
        }
    }
}

/// A full experiment: datasets × variants × strategies × seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub datasets: Vec<DatasetSpec>,
    pub run: RunConfig,
    pub backend: BackendConfig,
    /// Planner behavior of the scripted backend.
    pub planner: PlannerScript,
    pub embedder: EmbedderConfig,
    pub variants: Vec<Variant>,
    pub strategies: Vec<PromptStrategy>,
    pub seeds: Vec<u64>,
    pub split_ratios: SplitRatios,
    /// Run seeds concurrently; honored only with the scripted backend.
    pub concurrent_seeds: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            run: RunConfig::default(),
            backend: BackendConfig::default(),
            planner: PlannerScript::default(),
            embedder: EmbedderConfig::default(),
            variants: vec![Variant::Full],
            strategies: vec![PromptStrategy::A],
            seeds: vec![0, 1, 2],
            split_ratios: SplitRatios::default(),
            concurrent_seeds: false,
            out_dir: None,
        }
    }
}

impl ExperimentSpec {
    /// Parses a TOML config. Relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut spec: Self =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        for d in &mut spec.datasets {
            resolve(&mut d.nodes);
            resolve(&mut d.edges);
            d.splits.as_mut().map(resolve);
            d.index.as_mut().map(resolve);
        }
        spec.out_dir.as_mut().map(resolve);
        spec.backend.transcript.as_mut().map(resolve);
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.datasets.is_empty() {
            return bad("no datasets configured".into());
        }
        if self.variants.is_empty() || self.strategies.is_empty() || self.seeds.is_empty() {
            return bad("variants, strategies and seeds must be nonempty".into());
        }
        for v in &self.variants {
            v.apply(&self.run)
                .validate()
                .map_err(|e| ExperimentError::Config(format!("variant {v}: {e}")))?;
        }
        self.split_ratios.validate()?;
        self.backend.validate()?;
        Ok(())
    }
}

/// One (dataset, variant, strategy) cell collapsed over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub variant: Variant,
    pub strategy: PromptStrategy,
    pub label_visibility: crate::graph::LabelVisibility,
    pub seeds: Vec<u64>,
    /// Test accuracy per seed, in percent.
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds; absent for a single seed.
    pub std_accuracy: Option<f64>,
    pub fallback_rate: f64,
    pub llm_calls: u64,
    pub runtime_secs: f64,
}

impl ReportRow {
    /// `"84.95 ± 0.35"`, or just the mean for a single seed.
    pub fn cell(&self) -> String {
        match self.std_accuracy {
            Some(s) => format!("{:.2} ± {:.2}", self.mean_accuracy, s),
            None => format!("{:.2}", self.mean_accuracy),
        }
    }
}

/// Mean and sample std of per-seed values; std only when there are two or more.
pub fn seed_statistics<T: Scalar>(values: &[T]) -> Option<(T, Option<T>)> {
    Some((mean(values)?, sample_std(values)))
}

/// Result of one (dataset, variant, strategy, seed) run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: RunMetrics,
}

pub fn collapse_runs(
    dataset: &str,
    variant: Variant,
    config: &RunConfig,
    runs: &[SeedRun],
) -> ReportRow {
    let acc: Vec<f64> = runs.iter().map(|r| r.metrics.accuracy * 100.0).collect();
    let (mean_accuracy, std_accuracy) = seed_statistics(&acc).unwrap_or((0.0, None));
    let fallback: Vec<f64> = runs.iter().map(|r| r.metrics.fallback_rate).collect();
    ReportRow {
        dataset: dataset.to_owned(),
        variant,
        strategy: config.strategy,
        label_visibility: config.label_visibility,
        seeds: runs.iter().map(|r| r.seed).collect(),
        per_seed_accuracy: acc,
        mean_accuracy,
        std_accuracy,
        fallback_rate: mean(&fallback).unwrap_or(0.0),
        llm_calls: runs.iter().map(|r| r.metrics.llm_calls.total()).sum(),
        runtime_secs: runs.iter().map(|r| r.metrics.wall_clock_secs).sum(),
    }
}

struct PreparedDataset {
    spec: DatasetSpec,
    graph: TextAttributedGraph,
    embeddings: Option<Vec<EmbeddingVector<f32>>>,
}

fn prepare(
    spec: &ExperimentSpec,
    ds: &DatasetSpec,
    embedder: &dyn EmbeddingProvider<f32>,
) -> Result<PreparedDataset, ExperimentError> {
    let graph = load_graph(&ds.nodes, &ds.edges)?;
    let needs_index = spec.variants.iter().any(|v| v.action_mask().global && spec.run.action_mask.global);
    let embeddings = if !needs_index {
        None
    } else if let Some(path) = &ds.index {
        Some(load_index_for_graph::<f32>(path, &graph)?)
    } else {
        let (batch, in_flight) = spec.embedder.batching();
        Some(embed_graph(&graph, embedder, batch, in_flight)?)
    };
    log::info!(
        "dataset {}: {} nodes, {} edges, {} classes",
        ds.name,
        graph.node_count(),
        graph.edge_count(),
        graph.label_space().class_count
    );
    Ok(PreparedDataset { spec: ds.clone(), graph, embeddings })
}

fn run_one(
    spec: &ExperimentSpec,
    data: &PreparedDataset,
    embedder: &dyn EmbeddingProvider<f32>,
    variant: Variant,
    config: &RunConfig,
    seed: u64,
) -> Result<SeedRun, ExperimentError> {
    let run_name = format!("{}/{}-{}-seed{}", data.spec.name, variant, config.strategy, seed);
    let splits = match &data.spec.splits {
        Some(path) => load_split_file(&data.graph, path)?,
        None => make_splits(&data.graph, spec.split_ratios, seed)?,
    };
    let graph = data.graph.clone().with_splits(&splits)?;
    let index = match (&data.embeddings, config.action_mask.global) {
        (Some(e), true) => Some(SemanticIndex::from_embeddings(&graph, e.clone())?),
        _ => None,
    };

    let mut backend_cfg = spec.backend.clone();
    if backend_cfg.kind == BackendKind::Replay {
        if let Some(t) = &backend_cfg.transcript {
            if t.is_dir() {
                backend_cfg.transcript = Some(t.join(&run_name).join("transcript.jsonl"));
            }
        }
    }
    let backend = RecordingBackend::new(backend_from_config(
        &backend_cfg,
        ScriptedPolicy::preset(spec.planner),
    )?);
    let mut services = Services::new(&backend);
    if let Some(index) = &index {
        services = services.with_retrieval(index, embedder);
    }
    let config = RunConfig { seed, ..config.clone() };
    let output = run_inference(&graph, &config, &services)
        .map_err(|source| ExperimentError::Engine { run: run_name.clone(), source })?;
    log::info!("{run_name}: accuracy {:.4}", output.metrics.accuracy);

    if let Some(out) = &spec.out_dir {
        let dir = out.join(&run_name);
        write_run_artifacts(&graph, &output, &dir)
            .map_err(|source| ExperimentError::Engine { run: run_name.clone(), source })?;
        backend.write_transcript(&dir.join("transcript.jsonl"))?;
    }
    Ok(SeedRun { seed, metrics: output.metrics })
}

/// Runs the whole grid; one row per (dataset, variant, strategy), collapsed over seeds.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ReportRow>, ExperimentError> {
    spec.validate()?;
    let embedder = spec.embedder.build();
    let concurrent = spec.concurrent_seeds && spec.backend.kind == BackendKind::Scripted;
    let mut rows = Vec::new();
    for ds in &spec.datasets {
        let data = prepare(spec, ds, embedder.as_ref())?;
        for &variant in &spec.variants {
            for &strategy in &spec.strategies {
                let config = RunConfig { strategy, ..variant.apply(&spec.run) };
                let one = |&seed: &u64| run_one(spec, &data, embedder.as_ref(), variant, &config, seed);
                let runs: Result<Vec<SeedRun>, _> = if concurrent {
                    spec.seeds.par_iter().map(one).collect()
                } else {
                    spec.seeds.iter().map(one).collect()
                };
                rows.push(collapse_runs(&ds.name, variant, &config, &runs?));
            }
        }
    }
    if let Some(out) = &spec.out_dir {
        write_report(&rows, ReportFormat::Json, &out.join("report.json"))?;
        write_report(&rows, ReportFormat::Markdown, &out.join("report.md"))?;
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Markdown => "md",
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

pub const CSV_COLUMNS: [&str; 11] = [
    "dataset",
    "variant",
    "strategy",
    "label_visibility",
    "seeds",
    "mean_accuracy",
    "std_accuracy",
    "cell",
    "fallback_rate",
    "llm_calls",
    "runtime_secs",
];

/// Renders rows as a markdown matrix (row label × dataset), CSV, or JSON.
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<String, ExperimentError> {
    if rows.is_empty() {
        return Err(ExperimentError::Config("no report rows".into()));
    }
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(rows).expect("rows serialize") + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| ExperimentError::Config(e.to_string());
            w.write_record(CSV_COLUMNS).map_err(csv_err)?;
            for r in rows {
                let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
                w.write_record([
                    r.dataset.clone(),
                    r.variant.to_string(),
                    r.strategy.to_string(),
                    format!("{:?}", r.label_visibility).to_ascii_lowercase(),
                    seeds.join(" "),
                    format!("{:.4}", r.mean_accuracy),
                    r.std_accuracy.map(|s| format!("{s:.4}")).unwrap_or_default(),
                    r.cell(),
                    format!("{:.4}", r.fallback_rate),
                    r.llm_calls.to_string(),
                    format!("{:.3}", r.runtime_secs),
                ])
                .map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| ExperimentError::Config(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv is utf-8"))
        }
        ReportFormat::Markdown => Ok(markdown(rows)),
    }
}

fn first_seen<K: PartialEq + Clone>(items: impl Iterator<Item = K>) -> Vec<K> {
    let mut out = Vec::new();
    for k in items {
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

fn markdown(rows: &[ReportRow]) -> String {
    let datasets = first_seen(rows.iter().map(|r| r.dataset.clone()));
    let keys = first_seen(rows.iter().map(|r| (r.variant, r.strategy)));
    let several_strategies = first_seen(rows.iter().map(|r| r.strategy)).len() > 1;
    let mut out = format!("| Variant | {} |\n", datasets.join(" | "));
    out += &format!("|---|{}\n", "---|".repeat(datasets.len()));
    for (variant, strategy) in keys {
        let label = if several_strategies {
            format!("{variant} ({strategy})")
        } else {
            variant.to_string()
        };
        let cells: Vec<String> = datasets
            .iter()
            .map(|d| {
                rows.iter()
                    .find(|r| &r.dataset == d && r.variant == variant && r.strategy == strategy)
                    .map_or_else(|| "-".to_owned(), ReportRow::cell)
            })
            .collect();
        out += &format!("| {label} | {} |\n", cells.join(" | "));
    }
    out
}

pub fn write_report(rows: &[ReportRow], format: ReportFormat, path: &Path) -> Result<(), ExperimentError> {
    let text = render_report(rows, format)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Reads rows written in JSON format.
pub fn load_report(path: &Path) -> Result<Vec<ReportRow>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

//! Planning and prediction prompts, token budgeting, and reply parsing.
//!
//! Templates live in `templates/*_v1.txt` and use `{name}` placeholders. Rendering is
//! a single pass, so placeholder-like text inside node texts is left alone.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{LabelSpace, LabelVisibility};
use crate::memory::{MemoryBuffer, MemoryEntry, PromptStrategy, Source};

pub const PLANNING_TEMPLATE: &str = include_str!("../templates/planning_v1.txt");
pub const PREDICTION_TEMPLATE: &str = include_str!("../templates/prediction_v1.txt");
pub const SUMMARIZE_TEMPLATE: &str = include_str!("../templates/summarize_v1.txt");
pub const COMPRESS_TEMPLATE: &str = include_str!("../templates/compress_v1.txt");
pub const TEMPLATE_VERSION: u32 = 1;

pub const SYSTEM_TEXT: &str =
    "You are a careful assistant for graph node classification. Follow the requested response format exactly.";
pub const SUMMARIZE_SYSTEM_TEXT: &str = "You write concise, faithful summaries.";

pub const DEFAULT_MAX_PROMPT_TOKENS: usize = 512;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt needs {needed} tokens without any examples, budget is {budget}")]
    BudgetUnderflow { needed: usize, budget: usize },
    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),
}

/// Deterministic token estimate: each run of alphanumeric characters is one token,
/// every other non-whitespace character is one token.
pub fn count_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub max_prompt_tokens: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            max_prompt_tokens: DEFAULT_MAX_PROMPT_TOKENS,
        }
    }
}

/// Everything that shapes a prompt besides the memory itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptSettings {
    pub strategy: PromptStrategy,
    pub local_limit: usize,
    pub global_limit: usize,
    pub budget: PromptBudget,
    pub visibility: LabelVisibility,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            strategy: PromptStrategy::A,
            local_limit: 5,
            global_limit: 5,
            budget: PromptBudget::default(),
            visibility: LabelVisibility::Anonymized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub text: String,
    pub tokens: usize,
    pub examples_shown: usize,
    pub examples_dropped: usize,
    /// Per-field token cap applied to node texts and example texts, if any was needed.
    pub text_cap: Option<usize>,
}

/// Node and example texts are clipped down to this many tokens before any example is dropped.
pub const MIN_FIELD_TOKENS: usize = 24;

const CLIP_MARKER: &str = "…";

/// Keeps at most `cap` tokens of `text` (as counted by [`count_tokens`]), the last of
/// which is an ellipsis marker when anything was cut.
pub fn clip_tokens(text: &str, cap: usize) -> String {
    if count_tokens(text) <= cap {
        return text.to_owned();
    }
    if cap == 0 {
        return String::new();
    }
    let keep = cap - 1;
    let mut count = 0;
    let mut in_word = false;
    let mut cut = text.len();
    for (i, c) in text.char_indices() {
        let starts = if c.is_alphanumeric() {
            let s = !in_word;
            in_word = true;
            s
        } else {
            in_word = false;
            !c.is_whitespace()
        };
        if starts {
            if count == keep {
                cut = i;
                break;
            }
            count += 1;
        }
    }
    let head = text[..cut].trim_end();
    if head.is_empty() {
        CLIP_MARKER.to_owned()
    } else {
        format!("{head} {CLIP_MARKER}")
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

/// Substitutes `{name}` placeholders found in `template`. Unknown names stay as is.
pub fn render(template: &str, values: &HashMap<&str, String>) -> String {
    placeholder_re()
        .replace_all(template, |c: &regex::Captures<'_>| {
            values
                .get(&c[1])
                .cloned()
                .unwrap_or_else(|| c[0].to_owned())
        })
        .into_owned()
}

/// Collapses all whitespace runs, newlines included, into single spaces.
pub fn flatten(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn example_lines(
    examples: &[&MemoryEntry],
    labels: &LabelSpace,
    vis: LabelVisibility,
    cap: Option<usize>,
) -> String {
    if examples.is_empty() {
        return "(none)".into();
    }
    examples
        .iter()
        .map(|e| {
            let label = labels.prompt_name(e.label.expect("examples carry labels"), vis);
            format!("- {label}: \"{}\"", capped(&flatten(&e.text), cap))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn label_candidates(labels: &LabelSpace, vis: LabelVisibility) -> String {
    let names: Vec<String> = (0..labels.class_count)
        .map(|i| serde_json::to_string(&labels.prompt_name(i, vis)).expect("name serializes"))
        .collect();
    format!("[{}]", names.join(", "))
}

fn capped(text: &str, cap: Option<usize>) -> String {
    match cap {
        Some(c) => clip_tokens(text, c),
        None => text.to_owned(),
    }
}

/// Renders the template with the first `shown` examples and every variable text
/// clipped to `cap` tokens.
struct PromptParts<'a> {
    template: &'a str,
    fields: [(&'static str, String); 3],
    fixed: HashMap<&'static str, String>,
    selected: Vec<&'a MemoryEntry>,
    labels: &'a LabelSpace,
    vis: LabelVisibility,
}

impl PromptParts<'_> {
    fn render(&self, shown: usize, cap: Option<usize>) -> (String, usize) {
        let mut values = self.fixed.clone();
        for (name, text) in &self.fields {
            values.insert(name, capped(text, cap));
        }
        let (local, global): (Vec<&MemoryEntry>, Vec<&MemoryEntry>) =
            self.selected[..shown].iter().partition(|e| e.source == Source::Local);
        values.insert("local_examples", example_lines(&local, self.labels, self.vis, cap));
        values.insert("global_examples", example_lines(&global, self.labels, self.vis, cap));
        let text = render(self.template, &values);
        let tokens = count_tokens(&text);
        (text, tokens)
    }

    fn longest_field(&self) -> usize {
        let fields = self.fields.iter().map(|(_, t)| count_tokens(t));
        let examples = self.selected.iter().map(|e| count_tokens(&e.text));
        fields.chain(examples).max().unwrap_or(0)
    }

    /// Largest cap in `lo..=hi` whose prompt fits, if any. Token count is monotone in the cap.
    fn fit_cap(&self, shown: usize, lo: usize, hi: usize, budget: usize) -> Option<usize> {
        if lo > hi || self.render(shown, Some(lo)).1 > budget {
            return None;
        }
        let (mut lo, mut hi) = (lo, hi);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if self.render(shown, Some(mid)).1 <= budget {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        Some(lo)
    }
}

// Over budget, texts are first clipped to a common cap (the largest that fits, so short
// fields keep everything and long ones share the rest), then examples are dropped from
// the tail once the cap is at its floor, then the cap goes below the floor.
fn build_with_examples(
    template: &str,
    buffer: &MemoryBuffer,
    labels: &LabelSpace,
    settings: &PromptSettings,
) -> Result<BuiltPrompt, PromptError> {
    let selected = buffer.select_examples(
        settings.strategy,
        settings.local_limit,
        settings.global_limit,
    );
    let total = selected.len();
    let mut fixed: HashMap<&str, String> = HashMap::new();
    fixed.insert("example_count", buffer.example_count().to_string());
    fixed.insert("label_candidates", label_candidates(labels, settings.visibility));
    let parts = PromptParts {
        template,
        fields: [
            ("original_text", flatten(buffer.original_text())),
            ("local_agg", flatten(buffer.current_aggregate(Source::Local))),
            ("global_agg", flatten(buffer.current_aggregate(Source::Global))),
        ],
        fixed,
        selected,
        labels,
        vis: settings.visibility,
    };
    let budget = settings.budget.max_prompt_tokens;
    let built = |shown: usize, cap: Option<usize>| {
        let (text, tokens) = parts.render(shown, cap);
        BuiltPrompt {
            text,
            tokens,
            examples_shown: shown,
            examples_dropped: total - shown,
            text_cap: cap,
        }
    };
    let (_, tokens) = parts.render(total, None);
    if tokens <= budget {
        return Ok(built(total, None));
    }
    let longest = parts.longest_field();
    if let Some(cap) = parts.fit_cap(total, MIN_FIELD_TOKENS, longest, budget) {
        return Ok(built(total, Some(cap)));
    }
    // selection is local-then-global in rank order, so the tail is the
    // lowest-ranked global example
    for shown in (0..total).rev() {
        if parts.render(shown, Some(MIN_FIELD_TOKENS)).1 <= budget {
            return Ok(built(shown, Some(MIN_FIELD_TOKENS)));
        }
    }
    match parts.fit_cap(0, 1, MIN_FIELD_TOKENS.min(longest), budget) {
        Some(cap) => Ok(built(0, Some(cap))),
        None => Err(PromptError::BudgetUnderflow {
            needed: parts.render(0, Some(1)).1,
            budget,
        }),
    }
}

pub fn build_planning_prompt(
    buffer: &MemoryBuffer,
    labels: &LabelSpace,
    settings: &PromptSettings,
) -> Result<BuiltPrompt, PromptError> {
    build_with_examples(PLANNING_TEMPLATE, buffer, labels, settings)
}

pub fn build_prediction_prompt(
    buffer: &MemoryBuffer,
    labels: &LabelSpace,
    settings: &PromptSettings,
) -> Result<BuiltPrompt, PromptError> {
    build_with_examples(PREDICTION_TEMPLATE, buffer, labels, settings)
}

/// Follow-up sent once when a prediction reply cannot be parsed.
pub fn build_reask_prompt(previous_prompt: &str, labels: &LabelSpace, vis: LabelVisibility) -> String {
    format!(
        "{previous_prompt}\n\nYour previous reply could not be parsed. Reply with only this JSON object and nothing else, choosing predicted_label from {}:\n{{\"action_type\": \"predict\", \"predicted_label\": \"...\"}}\n",
        label_candidates(labels, vis)
    )
}

pub fn build_summarize_prompt(self_text: &str, neighbor_texts: &[&str], char_budget: usize) -> String {
    let neighbors = neighbor_texts
        .iter()
        .map(|t| format!("- {}", flatten(t)))
        .collect::<Vec<_>>()
        .join("\n");
    let mut values = HashMap::new();
    values.insert("char_budget", char_budget.to_string());
    values.insert("self_text", flatten(self_text));
    values.insert("neighbor_texts", neighbors);
    render(SUMMARIZE_TEMPLATE, &values)
}

pub fn build_compress_prompt(text: &str, char_budget: usize) -> String {
    let mut values = HashMap::new();
    values.insert("char_budget", char_budget.to_string());
    values.insert("text", flatten(text));
    render(COMPRESS_TEMPLATE, &values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    LocalAggregate,
    GlobalAggregate,
    NoOp,
}

impl Action {
    /// Name used in the planning reply schema.
    pub fn wire_name(self) -> &'static str {
        match self {
            Self::LocalAggregate => "local aggregate",
            Self::GlobalAggregate => "global aggregate",
            Self::NoOp => "no_op",
        }
    }

    pub fn source(self) -> Option<Source> {
        match self {
            Self::LocalAggregate => Some(Source::Local),
            Self::GlobalAggregate => Some(Source::Global),
            Self::NoOp => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

/// Actions chosen for one layer. Either `[NoOp]` or one to two distinct aggregations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub actions: Vec<Action>,
    pub raw_text: String,
    /// Set when the reply could not be understood and the plan fell back to NoOp.
    pub fallback: Option<String>,
}

impl ActionPlan {
    /// Normalizes a list of actions: duplicates removed, NoOp dropped when any work is
    /// present, `[NoOp]` when nothing is left.
    pub fn from_actions(actions: &[Action], raw_text: impl Into<String>) -> Self {
        let mut out: Vec<Action> = Vec::with_capacity(2);
        for &a in actions {
            if a != Action::NoOp && !out.contains(&a) {
                out.push(a);
            }
        }
        if out.is_empty() {
            out.push(Action::NoOp);
        }
        Self {
            actions: out,
            raw_text: raw_text.into(),
            fallback: None,
        }
    }

    fn fallback(raw_text: &str, reason: impl Into<String>) -> Self {
        Self {
            actions: vec![Action::NoOp],
            raw_text: raw_text.to_owned(),
            fallback: Some(reason.into()),
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.fallback.is_some()
    }
}

/// Renders actions in the reply schema.
pub fn render_plan(actions: &[Action]) -> String {
    let items: Vec<serde_json::Value> = actions
        .iter()
        .map(|a| serde_json::json!({ "action_type": a.wire_name() }))
        .collect();
    serde_json::Value::Array(items).to_string()
}

fn normalize_name(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn action_from_name(name: &str) -> Option<&'static [Action]> {
    match normalize_name(name).as_str() {
        "local aggregate" => Some(&[Action::LocalAggregate]),
        "global aggregate" => Some(&[Action::GlobalAggregate]),
        "local+global aggregate" => Some(&[Action::LocalAggregate, Action::GlobalAggregate]),
        "no_op" => Some(&[Action::NoOp]),
        _ => None,
    }
}

/// First JSON value of the wanted shape starting at one of the `open` characters.
fn first_json(reply: &str, open: char, want: impl Fn(&serde_json::Value) -> bool) -> Option<serde_json::Value> {
    reply.match_indices(open).find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&reply[i..]).into_iter::<serde_json::Value>();
        match stream.next() {
            Some(Ok(v)) if want(&v) => Some(v),
            _ => None,
        }
    })
}

/// Parses a planner reply. Never fails: anything unusable becomes `[NoOp]` with
/// `fallback` set.
pub fn parse_action_plan(reply: &str) -> ActionPlan {
    let Some(serde_json::Value::Array(items)) = first_json(reply, '[', |v| v.is_array()) else {
        return ActionPlan::fallback(reply, "no JSON array in reply");
    };
    if items.is_empty() {
        return ActionPlan::fallback(reply, "empty action list");
    }
    let mut actions = Vec::new();
    for item in &items {
        let name = match item {
            serde_json::Value::Object(map) => map.get("action_type").and_then(|v| v.as_str()),
            serde_json::Value::String(s) => Some(s.as_str()),
            _ => None,
        };
        let Some(name) = name else {
            return ActionPlan::fallback(reply, "action without action_type");
        };
        match action_from_name(name) {
            Some(parsed) => actions.extend_from_slice(parsed),
            None => return ActionPlan::fallback(reply, format!("unknown action {name:?}")),
        }
    }
    ActionPlan::from_actions(&actions, reply)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label_index: usize,
    pub raw_text: String,
}

fn anonymized_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^label[ _]*(\d+)$").expect("valid regex"))
}

fn resolve_label(raw: &str, labels: &LabelSpace) -> Option<usize> {
    let norm = normalize_name(raw.trim().trim_matches('"'));
    if let Some(c) = anonymized_label_re().captures(&norm) {
        return c[1].parse().ok().filter(|&i| i < labels.class_count);
    }
    labels.display_names.as_ref().and_then(|names| {
        names.iter().position(|n| normalize_name(n) == norm)
    })
}

/// Parses a prediction reply: the first JSON object carrying `predicted_label`.
pub fn parse_prediction(reply: &str, labels: &LabelSpace) -> Result<Prediction, PromptError> {
    let obj = first_json(reply, '{', |v| v.get("predicted_label").is_some())
        .ok_or_else(|| PromptError::InvalidPrediction("no JSON object with predicted_label".into()))?;
    let label_index = match &obj["predicted_label"] {
        serde_json::Value::String(s) => resolve_label(s, labels),
        serde_json::Value::Number(n) => n
            .as_u64()
            .map(|i| i as usize)
            .filter(|&i| i < labels.class_count),
        _ => None,
    }
    .ok_or_else(|| {
        PromptError::InvalidPrediction(format!("unrecognized label {}", obj["predicted_label"]))
    })?;
    Ok(Prediction {
        label_index,
        raw_text: reply.to_owned(),
    })
}

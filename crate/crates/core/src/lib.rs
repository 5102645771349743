//! Node-as-agent reasoning over text-attributed graphs with a frozen LLM.
//!
//! Each node keeps a private memory, plans one to two aggregation actions per layer
//! through the LLM, and predicts its label from the few-shot examples it collected.

pub mod actions;
pub mod engine;
pub mod experiment;
pub mod graph;
pub mod llm;
pub mod memory;
pub mod prompts;
pub mod retrieval;
pub mod scalar;

pub use engine::{run_inference, InferenceOutput, RunConfig, Services};
pub use graph::{load_graph, NodeId, TextAttributedGraph};
pub use scalar::Scalar;

/// Embedding vector at the default precision.
pub type Embedding = retrieval::EmbeddingVector<f32>;
/// Semantic index at the default precision.
pub type Index = retrieval::SemanticIndex<f32>;
/// Double-precision index, used by oracle tests.
pub type Index64 = retrieval::SemanticIndex<f64>;

//! Self-hosted filtering of discomforting recommendations.
//!
//! The crate learns a ranked preference profile from click/ignore behavior,
//! applies natural-language filtering rules to candidate feeds, and helps
//! users turn conversations into new or refined rules. All model access goes
//! through [`llm::Gateway`]; all state changes go through [`store`] events so
//! a data directory can be replayed exactly.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`
//! (and `f32` where useful).

pub mod actions;
pub mod clock;
pub mod conversation;
pub mod engine;
pub mod filter;
pub mod graph;
pub mod llm;
pub mod profile;
pub mod scalar;
pub mod state;
pub mod store;

pub use scalar::Scalar;

pub type PreferenceGraph = graph::PreferenceGraph<f64>;
pub type PreferenceGraphF32 = graph::PreferenceGraph<f32>;
pub type RankedFeatures = graph::RankedFeatures<f64>;
pub type RankParams = graph::RankParams<f64>;
pub type EmbeddingVector = llm::EmbeddingVector<f64>;
pub type GraphOp = graph::GraphOp<f64>;

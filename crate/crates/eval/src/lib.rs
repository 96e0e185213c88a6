//! Offline evaluation of preference profiles on a K-way click prediction task.
//!
//! [`mind`] loads MIND-format logs, [`cohort`] groups users by click count,
//! [`trial`] cuts K-item slates from impressions, and [`proxy`] runs the
//! predict-then-update loop for the full method and its ablations.
//! [`simulator`] supplies a synthetic user with planted preferences for
//! checks that need a known answer.

pub mod cohort;
pub mod metrics;
pub mod mind;
pub mod proxy;
pub mod report;
pub mod simulator;
pub mod trial;

pub use cohort::{bucket_users, Bucket, Cohort};
pub use metrics::{confusion_metrics, ConfusionMatrix};
pub use mind::{load_mind, MindDataset, MindError};
pub use proxy::{run_cohorts, run_proxy, Method, ProxyConfig, ProxyStep, ProxyTrace, UnknownMethod};
pub use simulator::{PlantedConfig, PlantedWorld, SimulatorBackend};
pub use trial::{make_trial, TrialSlate};

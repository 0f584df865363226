//! Orchestration around `advstyle-core`: dataset manifests, seeded batch
//! runs with persisted artifacts, CSV reports and clients for commercial
//! face-verification services.
//!
//! Nothing here touches the network unless a [`remote::RemoteClient`] is
//! asked to verify a pair.

pub mod batch;
pub mod error;
pub mod manifest;
pub mod remote;
pub mod report;
pub mod thresholds;

pub use batch::{plan_jobs, run_batch, AttackJob, BatchOptions, JobFile, JobOutcome, JobOutput, JobRecord};
pub use error::{Error, Result};
pub use manifest::{ingest, DatasetManifest, Layout, ManifestEntry};
pub use remote::{Provider, RemoteClient, RemoteVerifierConfig, RetryPolicy, Verification};
pub use report::{report, ReportFiles};
pub use thresholds::threshold_for;

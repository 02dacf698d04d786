//! Synthetic chart instruction-tuning data generation and chart-task evaluation.
//!
//! The pipeline runs in three LLM-driven stages:
//!
//! 1. [`stage1`] samples a [`GenerationSpec`](model::GenerationSpec) (theme, trends,
//!    table size, chart type) and asks the model for tabular data plus descriptions.
//! 2. [`stage2`] asks for a self-contained plotting script built from the data, curated
//!    function documentation and previously successful scripts, then executes it in a
//!    [`sandbox`] and keeps only charts that rendered.
//! 3. [`stage3`] turns every rendered chart into instruction/answer records for seven
//!    task kinds, execution-checking every code answer.
//!
//! [`eval`] holds the metrics used to score models on those tasks, [`dataset`] the
//! on-disk layout and statistics, and [`pipeline`] the end-to-end driver. Every LLM call
//! goes through [`llm::Gateway`], which can replay recorded exchanges so that runs are
//! deterministic and offline.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fence;
pub mod llm;
pub mod mock;
pub mod model;
pub mod pipeline;
pub mod sandbox;
pub mod scoring;
pub mod stage1;
pub mod stage2;
pub mod stage3;

pub use error::{Error, Result};

//! rankdistill: a desk-scale laboratory for cross-encoder document ranking
//! and teacher-to-student knowledge distillation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff on dense f64 tensors.
//! - [`encoder`]: a small transformer cross-encoder scoring (query, document)
//!   pairs, with a forward trace exposing the activations distillation needs.
//! - [`checkpoint`]: bit-exact binary serialization of encoder parameters.
//! - [`objectives`]: pointwise, pairwise, and layer-wise distillation losses
//!   and the plans that compose them.
//! - [`data`]: a synthetic token-overlap ranking task plus TSV interchange.
//! - [`train`]: Adam, fine-tuning, and distillation loops.
//! - [`eval`]: reranking, MRR@k, and run reports.
//! - [`experiments`]: multi-seed suites (ablations, layer mappings, data
//!   fractions) with deterministic CSV output.
//!
//! Each major capability has a runnable demonstration under `examples/`:
//!
//! ```text
//! cargo run --release --example autodiff_basics
//! cargo run --release --example encode_and_score
//! cargo run --release --example synthetic_task
//! cargo run --release --example train_teacher
//! cargo run --release --example distill_student
//! cargo run --release --example objective_ablation
//! cargo run --release --example layer_mappings
//! cargo run --release --example data_fraction_sweep
//! ```

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod jobs;
pub mod objectives;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};

//! Multi-task convolutional text classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`params`], [`graph`], [`loss`], [`optim`], [`gradcheck`] and
//!   [`persist`] form a small reverse-mode differentiation engine.
//! * [`preprocess`] turns raw social-media text into token sequences.
//! * [`embed`] builds vocabularies, word/subword vector tables and encodes
//!   examples.
//! * [`models`] assembles the ten network variants, including the two
//!   multi-task sharing schemes.
//! * [`train`], [`folds`], [`metrics`] and [`search`] cover optimisation and
//!   evaluation; [`experiment`], [`config`], [`dataset`] and [`report`] are the
//!   operational shell used by the command-line tool.

pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod folds;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod persist;
pub mod preprocess;
pub mod report;
pub mod search;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Feed, Graph, GraphBuilder, NodeId, Tape};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

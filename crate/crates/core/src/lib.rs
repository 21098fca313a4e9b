//! Fact-verification pipeline engine.
//!
//! Stages: [`corpus`] ingestion, sparse [`tfidf`] and [`fuzzy`] title
//! retrieval combined in [`retrieval`], point-wise sentence [`selection`]
//! with hyperlink re-retrieval, [`gbdt`]-based claim [`aggregation`], and
//! FEVER [`evaluation`]. [`pipeline`] wires the stages together with cached
//! artifacts; [`bridge`] speaks the external scorer protocol.

mod codec;
pub mod aggregation;
pub mod bridge;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod fuzzy;
pub mod gbdt;
pub mod pipeline;
pub mod retrieval;
pub mod selection;
pub mod text;
pub mod tfidf;

pub use error::{Error, Result};

//! Importation-risk estimation for mosquito-borne disease at two spatial
//! scales.
//!
//! The pipeline runs in stages:
//!
//! 1. [`ingest`] loads (or synthesizes) geo-tagged activity traces, user
//!    profiles, follower graphs, and air-traffic volumes, and can walk a
//!    follower graph by snowball sampling.
//! 2. [`coarsegeo`] infers a coarse zone for an event from its text.
//! 3. [`flux`] turns per-user zone visit sets into daily population flux
//!    from a source zone into each destination patch.
//! 4. [`epimodel`] integrates a patch-graph compartmental model to steady
//!    state and scores county-scale relative risk.
//! 5. [`homeloc`] resolves each user's home to ~100 m via a clustering +
//!    prune/score/verify cascade.
//! 6. [`riskmap`] aggregates visitor activity and inferred homes into
//!    neighborhood share tables and the two-criteria high-risk set.

pub mod coarsegeo;
pub mod epimodel;
pub mod error;
pub mod flux;
pub mod geo;
pub mod homeloc;
pub mod ingest;
pub mod riskmap;

pub use error::{Error, Result};

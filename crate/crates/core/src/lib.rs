//! Evolving agent memory.
//!
//! A layered memory graph (semantic facts, episodic trajectories, procedural
//! skills) with hybrid dense + sparse retrieval, feedback-driven refinement of
//! activated subgraphs, and offline consolidation of episodes into skills.

#![forbid(unsafe_code)]

pub mod adapters;
pub mod consolidation;
pub mod context;
pub mod embedding;
pub mod graph;
pub mod persistence;
pub mod refinement;
pub mod retrieval;
pub mod sim;

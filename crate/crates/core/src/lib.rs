//! Exact combinatorics of gene family evolutionary histories constrained by a
//! species tree.
//!
//! A *history* describes how a gene family evolves inside a rooted binary
//! species tree through speciation, duplication, loss and horizontal gene
//! transfer events. This crate compiles a (species tree, model) pair into a
//! weighted grammar and uses it as a shared intermediate representation for
//!
//! - exact counting of histories by size (arbitrary-precision DP),
//! - uniform random sampling of histories of a given size,
//! - exhaustive enumeration of tiny instances (the test oracle),
//! - singularity analysis of the counting generating functions (growth
//!   factors and leading constants in the duplication-loss model),
//! - the events-graph construction and history transport showing that
//!   ranked duplication-transfer counts with forced speciation-loss do not
//!   depend on the tree topology.
//!
//! Supported models: `UDL`, `RDL` (duplication-loss, unranked/ranked),
//! `UDLT`, `RDLT` (with transfer), and `RDT-SL` (ranked
//! duplication-transfer where every speciation is followed by a loss).

pub mod asymptotics;
pub mod counting;
pub mod enumeration;
pub mod events_graph;
pub mod grammar;
pub mod sampling;
pub mod species_tree;

pub use counting::{count, count_single, CountTable};
pub use grammar::{compile, Grammar, Model};
pub use sampling::{sample, validate, History};
pub use species_tree::{Ranking, SpeciesTree, TimeSlicedTree, TreeView};

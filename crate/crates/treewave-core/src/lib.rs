//! Simulation and inverse-problem toolkit for wave, heat and Schrödinger
//! equations on tree-shaped metric networks.
//!
//! The forward side provides finite-difference solvers with continuity and
//! flux-balance coupling at the internal nodes, energy and trace
//! diagnostics, and the Gaussian-kernel wave-to-heat transform. The inverse
//! side recovers the per-edge potential from boundary traces at all but one
//! external node by staged leaf peeling: recover each leaf edge from its
//! one-end Cauchy data, push the data through the node balance, and recurse
//! on the reduced tree. Experiment drivers measure the empirical constants
//! behind the energy, observability and stability estimates.

pub mod edge_inverse;
pub mod error;
pub mod experiments;
pub mod field;
pub mod graph;
pub mod grid;
pub mod heat;
pub mod implicit;
pub mod measure;
pub mod parallel;
pub mod peel;
pub mod report;
pub mod schrodinger;
pub mod trace;
pub mod wave;

pub use error::{Error, Result};
pub use field::{BoundaryCondition, BoundaryData, EdgeField, EquationKind, NetworkField, Scalar, SolutionField};
pub use graph::{parse_network, parse_network_file, peel_schedule, validate_tree, MetricTree, NodeKind, PeelPlan};
pub use grid::{discretize, discretize_default, NetworkGrid};
pub use trace::{extract_trace, TraceKind, TraceRecord};

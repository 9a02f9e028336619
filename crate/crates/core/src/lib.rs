//! Two-site DMRG on U(1)-symmetric block-sparse tensors.
//!
//! Tensors ([`btensor`]) come in three interchangeable storage formats that
//! share one contraction planner. On top of them sit MPS/MPO chains
//! ([`netops`]), the Davidson solver ([`solver`]), the sweep driver
//! ([`dmrg`]), lattice models ([`models`]), exact-diagonalization references
//! ([`oracle`]) and flop accounting plus the analytic cost model ([`perf`]).

// Negated float comparisons are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod btensor;
pub mod dmrg;
pub mod error;
pub mod models;
pub mod netops;
pub mod oracle;
pub mod perf;
pub mod qn;
pub mod solver;

pub use error::{Error, Result};

//! Epistemic model checking for multi-observer quantum protocols.
//!
//! The library builds finite protocols of relative quantum states
//! (density operators assigned to systems by a background observer),
//! materializes every measurement branch as a history, and evaluates an
//! epistemic logic over the resulting family. Whether a knowledge
//! operator for a system is meaningful at all is decided by an
//! admissibility gate: the background observer must never be in a
//! position to know that the system's information has been erased from
//! the universe.
//!
//! The crate is organized in layers:
//!
//! * [`linalg`] — dense complex matrices, tensor products, partial
//!   traces, a Hermitian eigensolver;
//! * [`system`] — labeled systems, relative states, Born-rule
//!   measurement, unitary and decoherence steps;
//! * [`protocol`] — histories, protocols, epistemic cells, described
//!   states and protocol-relative compatibility;
//! * [`observer`] — records, persistent records, informational
//!   persistence, admissible observers, communities;
//! * [`logic`] — the formula DSL, the admissibility gate on nested
//!   knowledge, evaluation, validity and the axiom suite;
//! * [`scenario`] — built-in laboratory scenarios with their expected
//!   verdicts;
//! * [`specfile`] — the protocol file format and its exporter.

pub mod linalg;
pub mod system;
pub mod protocol;
pub mod observer;
pub mod logic;
pub mod scenario;
pub mod specfile;
pub mod report;

mod book;

pub use linalg::{ComplexMatrix, Tolerance};
pub use system::{Basis, RelativeState, System, SystemId, Universe};

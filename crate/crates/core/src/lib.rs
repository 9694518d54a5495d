//! Resource allocation for a distributed MIMO-OFDM radar/communication
//! system: Cramér-Rao bounds for target location and velocity, wide-beam
//! covariance design, convex subcarrier/power allocation and radar receiver
//! selection.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod beampattern;
pub mod conic;
pub mod error;
pub mod fim;
pub mod pipeline;
pub mod scenario;
pub mod selection;
pub mod waveform;

#[cfg(test)]
pub(crate) mod test_scenes;

pub use allocation::{Algorithm1Outcome, Allocation, AllocationInstance, PenaltySchedule};
pub use beampattern::{CovarianceSet, DesignSettings, PatternSpec};
pub use conic::{ConicProblem, ConicSolution, SolveStatus, SolverSettings};
pub use error::{Error, Result};
pub use fim::{CrbPair, FimBlocks, FimOptions, IndexConvention, PowerProfile};
pub use pipeline::{Prepared, RunConfig, TradeoffPoint};
pub use scenario::{PathGeometry, Point, Scenario, SPEED_OF_LIGHT};
pub use selection::{Bisection, Quantity, ReceiverMask, SelectionInstance};
pub use waveform::{Owner, SymbolGrid};

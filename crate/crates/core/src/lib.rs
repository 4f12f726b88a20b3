//! Adaptive downlink beamforming for multiuser MISO systems.
//!
//! A convolutional embedding network maps a channel matrix to a virtual
//! uplink power vector; a per-environment support vector regressor, fit on a
//! handful of labelled samples, corrects that feature for the current
//! channel distribution; beamformers are then recovered in closed form from
//! the corrected powers. Classical solvers (SINR balancing, WMMSE) provide
//! labels and reference performance, and MAML, last-layer transfer and
//! non-adaptive baselines are included for comparison, offline and in a
//! slot-by-slot non-stationary simulation.

// NaN-rejecting `!(x > 0.0)` checks and index loops over matrix storage are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adaptation;
pub mod channel;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod maml;
pub mod metrics;
pub mod net;
pub mod online;
pub mod solvers;
pub mod svr;
pub mod system;

pub use error::{Error, Result};
pub use linalg::{CMat, CVec, C64};
pub use solvers::Problem;
pub use system::SystemConfig;

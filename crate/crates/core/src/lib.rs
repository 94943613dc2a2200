//! Federated split learning for recurrent networks on sequentially
//! partitioned data.
//!
//! A sequence whose consecutive segments live on different clients is
//! modelled by a chain of recurrent sub-networks, one per segment position.
//! Neighbouring clients exchange only the boundary hidden state (forward)
//! and its gradient (backward). A server aggregates the sub-networks of each
//! position across chains with sample-count weights.
//!
//! Module map:
//!
//! * [`linalg`]: dense matrices and loss kernels.
//! * [`cells`]: RNN / IRNN / GRU / LSTM with exact segment-scoped BPTT.
//! * [`split`]: the client-to-client forward/backward handoff protocol.
//! * [`fed`]: ID bank, client sampling, per-position aggregation, rounds.
//! * [`data`]: IDX loading, sequentialization, partitioning, synthetic task.
//! * [`harness`] and [`metrics`]: run modes, evaluation and CSV output.

pub mod cells;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod split;

pub use error::{Error, Result};

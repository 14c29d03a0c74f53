//! Parameter-server SGD with hardsync, n-softsync and async protocols,
//! vector-clock staleness accounting, a deterministic virtual-time cluster
//! and an experiment harness.
//!
//! Module map:
//! * [`tensor`]: dense matrices, gemm, seeded RNG streams, exact summation
//! * [`model`]: MLP forward/backward, SGD with momentum, datasets
//! * [`clock`]: timestamps, vector clocks, staleness statistics
//! * [`protocol`]: sync policies, learning-rate rules, the server step
//! * [`cluster`]: learners and parameter-server nodes on a virtual-time or threaded runtime
//! * [`harness`]: datasets, experiment configs, sweeps and CSV output

pub mod clock;
pub mod cluster;
pub mod error;
pub mod harness;
pub mod model;
pub mod protocol;
pub mod tensor;

pub use clock::{
    average_staleness, staleness, staleness_histogram, StalenessHistogram, StalenessStats,
    Timestamp, VectorClockRecord,
};
pub use cluster::{
    communication_overlap, run_cluster, Arch, ClusterConfig, RunLog, SamplingMode, ScheduleMode,
    TreeSpec, VirtualTiming,
};
pub use error::{Error, Result};
pub use model::{
    backward, evaluate, forward, sgd_step, Activation, Dataset, Gradient, MiniBatch, ModelSpec,
    Weights,
};
pub use protocol::{
    aggregate, effective_learning_rate, required_gradient_count, GradientMessage,
    LearningRatePolicy, LrMode, ParameterServer, SyncPolicy, VersionedWeights,
};
pub use tensor::{gemm, saxpy, ExactVecSum, Matrix, RngStream};

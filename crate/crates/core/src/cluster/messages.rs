use std::sync::Arc;

use crate::clock::Timestamp;
use crate::model::Weights;
use crate::protocol::{GradientMessage, PartialAggregate, VersionedWeights};

/// Server state handed to the statistics node at an epoch boundary.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: u64,
    pub weights: Arc<VersionedWeights>,
    pub train_loss: f64,
    pub train_error: f64,
    pub samples_seen: u64,
    pub time: f64,
}

#[derive(Debug, Clone)]
pub enum Msg {
    TimestampQuery { local_ts: Timestamp, wait_for_newer: bool },
    TimestampReply(Timestamp),
    PullWeights,
    /// Weights sent in reply to a pull, or pushed down a broadcast tree.
    WeightsReply(Arc<VersionedWeights>),
    PushGradient(Box<GradientMessage>),
    PushAggregate(Box<PartialAggregate>),
    PushAck,
    EpochMetric(Box<EpochReport>),
    Shutdown,
    /// A child has flushed its pushes and stopped.
    Goodbye,
    Abort(String),

    // self-addressed timers
    Start,
    ComputeDone(Box<GradientMessage>),
    Wake,
}

/// Scalar payload (timestamp or tag) carried by every message.
const SCALAR_BYTES: usize = 8;
const HEADER_BYTES: usize = 8;

impl Msg {
    /// Bytes on the wire: weight and gradient messages carry the model plus
    /// a timestamp, everything else a header plus one scalar.
    pub fn wire_size(&self, params: usize) -> usize {
        match self {
            Msg::WeightsReply(_) | Msg::PushGradient(_) | Msg::PushAggregate(_) => {
                params * std::mem::size_of::<f64>() + SCALAR_BYTES
            }
            _ => HEADER_BYTES + SCALAR_BYTES,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Msg::TimestampQuery { .. } => "TimestampQuery",
            Msg::TimestampReply(_) => "TimestampReply",
            Msg::PullWeights => "PullWeights",
            Msg::WeightsReply(_) => "WeightsReply",
            Msg::PushGradient(_) => "PushGradient",
            Msg::PushAggregate(_) => "PushAggregate",
            Msg::PushAck => "PushAck",
            Msg::EpochMetric(_) => "EpochMetric",
            Msg::Shutdown => "Shutdown",
            Msg::Goodbye => "Goodbye",
            Msg::Abort(_) => "Abort",
            Msg::Start => "Start",
            Msg::ComputeDone(_) => "ComputeDone",
            Msg::Wake => "Wake",
        }
    }
}

/// Initial weights shared by every node at start-up.
pub fn initial_versioned(w: Weights) -> Arc<VersionedWeights> {
    Arc::new(VersionedWeights {
        weights: w,
        timestamp: Timestamp::ZERO,
    })
}

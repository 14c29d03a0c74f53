//! The training runtime: learners, the parameter server (flat, tree, or
//! tree plus learner broadcast), per-learner data sampling, the statistics
//! node, and two schedulers (deterministic virtual time or real threads).
//!
//! Architectures:
//! * `Base`: learners push to the root, wait for the ack, ask for the
//!   timestamp and pull only when it changed.
//! * `Adv`: the same learner loop against leaf servers; leaves aggregate
//!   gradients and relay them up, the root pushes new weights down.
//! * `AdvStar`: `Adv` aggregation, but weights travel down a heap-shaped
//!   broadcast tree of learners into a double buffer that is swapped at
//!   batch boundaries, and pushes are non-blocking with one gradient in
//!   flight plus one queued.
//!
//! Under n-softsync each leaf sends a partial aggregate every `w` gradients,
//! where `w` is the largest divisor of `c = floor(lambda/n)` not exceeding
//! the smallest leaf's learner count; interior servers forward partials
//! unchanged and the root applies the window rule. Under hardsync every
//! server waits for each child once per round.

mod checkpoint;
mod config;
mod data;
mod messages;
mod node;
mod runlog;
mod sim;
mod threads;
mod topology;

use std::sync::Arc;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use config::{Arch, ClusterConfig, SamplingMode, ScheduleMode, TreeSpec, VirtualTiming};
pub use data::{data_server_sample, learner_compute_stream, learner_data_stream, DataServer};
pub use data::{STREAM_GLOBAL_SAMPLES, STREAM_INIT, STREAM_LINK, STREAM_START};
pub use messages::{EpochReport, Msg};
pub use runlog::{
    communication_overlap, read_epochs_csv, read_timing_csv, EpochRow, RunLog, TimingSample,
    EPOCHS_CSV_HEADER, TIMING_CSV_HEADER,
};
pub use topology::{window_size, NodeId, Role, Topology};

use crate::error::{Error, Result};
use crate::model::{evaluate, evaluate_full, Dataset, Weights};
use crate::protocol::{ParameterServer, ServerConfig};
use crate::tensor::RngStream;
use messages::initial_versioned;
use node::{LearnerNode, Node, RelayNode, RootNode, RootSettings, StatsNode};

/// Initial weights for a run: drawn from the run seed's init stream.
pub fn initial_weights(cfg: &ClusterConfig) -> Weights {
    Weights::init(&cfg.model, &mut RngStream::new(cfg.seed, STREAM_INIT))
}

fn check_dataset(cfg: &ClusterConfig, d: &Dataset, what: &str) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    if d.dims() != cfg.model.input_size() {
        return Err(Error::Config(format!(
            "{what} set has {} features but the model expects {}",
            d.dims(),
            cfg.model.input_size()
        )));
    }
    if d.classes > cfg.model.classes() {
        return Err(Error::Config(format!(
            "{what} set has {} classes but the model outputs {}",
            d.classes,
            cfg.model.classes()
        )));
    }
    Ok(())
}

/// Run one full training job and collect its log.
///
/// A run that produces non-finite weights is stopped and returned with
/// `diverged` set and the reason in `abort`; protocol violations are
/// returned as errors.
pub fn run_cluster(cfg: &ClusterConfig, train: Arc<Dataset>, test: Arc<Dataset>) -> Result<RunLog> {
    cfg.validate()?;
    check_dataset(cfg, &train, "training")?;
    check_dataset(cfg, &test, "test")?;
    let topo = Topology::build(cfg.arch, cfg.learners, cfg.tree, cfg.broadcast_fanout)?;
    let w0 = initial_weights(cfg);
    let params = w0.len();
    let (_, initial_loss) = evaluate_full(&w0, &train)?;
    let server = ParameterServer::new(
        w0.clone(),
        ServerConfig {
            policy: cfg.policy,
            lambda: cfg.learners,
            mu: cfg.batch,
            lr: cfg.lr.clone(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
    )?;
    let c = server.required();
    let min_leaf = topo.leaves().iter().map(|&l| topo.children[l].len()).min().unwrap_or(1);
    let window = window_size(c, min_leaf);
    let shared = initial_versioned(w0);

    let mut server = Some(server);
    let mut nodes = Vec::with_capacity(topo.len());
    for id in 0..topo.len() {
        let node = match topo.roles[id] {
            Role::Root => Node::Root(Box::new(RootNode::new(
                server.take().expect("single root"),
                RootSettings {
                    train_len: train.len() as u64,
                    epochs: cfg.epochs,
                    max_updates: cfg.max_updates,
                    initial_loss,
                    divergence_factor: cfg.divergence_factor,
                    stop_on_divergence: cfg.stop_on_divergence,
                },
                topo.children[id].clone(),
                topo.broadcast[id].clone(),
                topo.stats,
            ))),
            Role::Relay { leaf } => Node::Relay(Box::new(RelayNode::new(
                topo.parent[id].expect("relay has a parent"),
                topo.children[id].clone(),
                topo.broadcast[id].clone(),
                cfg.policy,
                window,
                leaf,
                Arc::clone(&shared),
            ))),
            Role::Learner(l) => Node::Learner(Box::new(LearnerNode::new(
                l,
                topo.parent[id].expect("learner has a parent"),
                topo.broadcast[id].clone(),
                cfg.arch,
                cfg.policy,
                cfg.batch,
                DataServer::new(Arc::clone(&train), cfg.sampling, cfg.seed, l, cfg.learners, cfg.batch),
                Arc::clone(&shared),
            ))),
            Role::Stats => Node::Stats(Box::new(StatsNode::new(Arc::clone(&test)))),
        };
        nodes.push(node);
    }

    let (nodes, abort, end_time) = match cfg.mode {
        ScheduleMode::Virtual => {
            let o = sim::run_virtual(nodes, &topo.learners, topo.stats, &cfg.timing, params, cfg.seed, cfg.batch)?;
            (o.nodes, o.abort, o.end_time)
        }
        ScheduleMode::Threads => {
            let o = threads::run_threads(nodes)?;
            (o.nodes, o.abort, o.end_time)
        }
    };
    let abort = match abort {
        None => None,
        Some(e @ Error::NumericOverflow(_)) => Some(e.to_string()),
        Some(e) => return Err(e),
    };
    collect_log(nodes, &test, cfg, c, initial_loss, abort, end_time)
}

fn collect_log(
    nodes: Vec<Node>,
    test: &Dataset,
    cfg: &ClusterConfig,
    c: usize,
    initial_loss: f64,
    abort: Option<String>,
    end_time: f64,
) -> Result<RunLog> {
    let mut root = None;
    let mut stats = None;
    let mut learners = Vec::new();
    let mut relay_discarded = 0;
    for n in nodes {
        match n {
            Node::Root(r) => root = Some(r),
            Node::Stats(s) => stats = Some(s),
            Node::Learner(l) => learners.push(l),
            Node::Relay(r) => relay_discarded += r.discarded,
        }
    }
    let root = root.ok_or_else(|| Error::Protocol("run finished without a root".into()))?;
    let stats = stats.ok_or_else(|| Error::Protocol("run finished without a stats node".into()))?;
    let RootNode {
        server,
        records,
        diverged,
        discarded,
        end_time: stop_time,
        samples_consumed,
        ..
    } = *root;
    let final_weights = server.weights().weights.clone();
    let final_test_error = if final_weights.is_finite() {
        evaluate(&final_weights, test)?
    } else {
        f64::NAN
    };
    let timing = learners.iter().flat_map(|l| l.timing.iter().cloned()).collect();
    Ok(RunLog {
        records,
        epochs: stats.rows.clone(),
        timing,
        final_timestamp: server.timestamp(),
        updates: server.updates(),
        gradients_consumed: server.gradients_consumed(),
        gradients_received: server.gradients_received() + discarded,
        gradients_discarded: discarded + relay_discarded + server.pending_count() as u64,
        batches_computed: learners.iter().map(|l| l.batches).sum(),
        samples_consumed,
        total_time: if abort.is_some() || stop_time == 0.0 { end_time } else { stop_time },
        initial_loss,
        final_test_error,
        diverged: diverged || abort.is_some(),
        abort,
        learners: cfg.learners,
        gradients_per_update: c,
        skipped_pulls: learners.iter().map(|l| l.skipped_pulls).sum(),
        pulls: learners.iter().map(|l| l.pulls).sum(),
        final_weights,
    })
}

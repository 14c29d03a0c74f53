//! Deterministic discrete-event runtime.
//!
//! Events are ordered by `(time, sequence number)`, so simultaneous events
//! run in the order they were scheduled. Each node has one outgoing and one
//! incoming link; a message occupies both for `size / bandwidth` and then
//! spends a sampled latency in flight. Delivery on every directed edge is
//! FIFO. Traffic to and from the statistics node is free.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use super::config::VirtualTiming;
use super::data::{learner_compute_stream, STREAM_LINK, STREAM_START};
use super::messages::Msg;
use super::node::{Ctx, Node};
use super::topology::NodeId;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

struct Event {
    time: f64,
    seq: u64,
    from: NodeId,
    to: NodeId,
    msg: Msg,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Core {
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    out_free: Vec<f64>,
    in_free: Vec<f64>,
    edge_last: HashMap<(NodeId, NodeId), f64>,
    link_rng: RngStream,
    compute_rngs: Vec<RngStream>,
    timing: VirtualTiming,
    params: usize,
    stats: NodeId,
    abort: Option<Error>,
}

impl Core {
    fn push(&mut self, time: f64, from: NodeId, to: NodeId, msg: Msg) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            from,
            to,
            msg,
        });
    }

    fn transmit(&mut self, from: NodeId, to: NodeId, msg: Msg) {
        if from == self.stats || to == self.stats {
            let now = self.now;
            self.push(now, from, to, msg);
            return;
        }
        let tx = if self.timing.bandwidth.is_finite() {
            msg.wire_size(self.params) as f64 / self.timing.bandwidth
        } else {
            0.0
        };
        let start = self.now.max(self.out_free[from]);
        self.out_free[from] = start + tx;
        let mut latency = self.timing.link_latency;
        if latency > 0.0 && self.timing.link_jitter > 0.0 {
            latency *= 1.0 + self.timing.link_jitter * (2.0 * self.link_rng.uniform() - 1.0);
        }
        let arrive = start + tx + latency;
        let received = arrive.max(self.in_free[to] + tx);
        self.in_free[to] = received;
        let last = self.edge_last.entry((from, to)).or_insert(0.0);
        let deliver = received.max(*last);
        *last = deliver;
        self.push(deliver, from, to, msg);
    }
}

struct SimCtx<'a> {
    core: &'a mut Core,
    me: NodeId,
}

impl Ctx for SimCtx<'_> {
    fn now(&self) -> f64 {
        self.core.now
    }

    fn send(&mut self, to: NodeId, msg: Msg) {
        self.core.transmit(self.me, to, msg);
    }

    fn after(&mut self, delay: f64, msg: Msg) {
        let t = self.core.now + delay.max(0.0);
        self.core.push(t, self.me, self.me, msg);
    }

    fn compute_time(&mut self, learner: usize, mu: usize, _wall: f64) -> f64 {
        let t = &self.core.timing;
        let base = t.compute_per_sample * mu as f64 * t.speed(learner);
        let j = t.compute_jitter;
        if j > 0.0 {
            let u = self.core.compute_rngs[learner].uniform();
            base * (1.0 + j * (2.0 * u - 1.0))
        } else {
            base
        }
    }

    fn nic_free_at(&self) -> f64 {
        self.core.out_free[self.me]
    }

    fn abort(&mut self, err: Error) {
        if self.core.abort.is_none() {
            self.core.abort = Some(err);
        }
    }
}

pub struct SimOutcome {
    pub nodes: Vec<Node>,
    pub abort: Option<Error>,
    pub end_time: f64,
}

/// Run `nodes` to completion. `learners[l]` is the node id of learner `l`.
pub fn run_virtual(
    mut nodes: Vec<Node>,
    learners: &[NodeId],
    stats: NodeId,
    timing: &VirtualTiming,
    params: usize,
    seed: u64,
    mu: usize,
) -> Result<SimOutcome> {
    let n = nodes.len();
    let mut core = Core {
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        out_free: vec![0.0; n],
        in_free: vec![0.0; n],
        edge_last: HashMap::new(),
        link_rng: RngStream::new(seed, STREAM_LINK),
        compute_rngs: (0..learners.len())
            .map(|l| RngStream::new(seed, learner_compute_stream(l)))
            .collect(),
        timing: timing.clone(),
        params,
        stats,
        abort: None,
    };
    let learner_of: HashMap<NodeId, usize> = learners.iter().enumerate().map(|(l, &id)| (id, l)).collect();
    let mut start_rng = RngStream::new(seed, STREAM_START);
    for id in 0..n {
        let t = match learner_of.get(&id) {
            Some(&l) if timing.random_start => {
                start_rng.uniform() * timing.compute_per_sample * mu as f64 * timing.speed(l)
            }
            _ => 0.0,
        };
        core.push(t, id, id, Msg::Start);
    }
    while let Some(ev) = core.heap.pop() {
        core.now = ev.time;
        let mut ctx = SimCtx {
            core: &mut core,
            me: ev.to,
        };
        nodes[ev.to].handle(ev.from, ev.msg, &mut ctx);
        if core.abort.is_some() {
            break;
        }
    }
    if core.abort.is_none() {
        if let Some(stuck) = nodes.iter().position(|nd| !nd.finished()) {
            return Err(Error::Protocol(format!(
                "simulation ran out of events with node {stuck} still active"
            )));
        }
    }
    Ok(SimOutcome {
        nodes,
        abort: core.abort,
        end_time: core.now,
    })
}

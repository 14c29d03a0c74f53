//! Node behaviour shared by both runtimes. Each node reacts to one message
//! at a time through [`Node::handle`]; the runtime supplies time, transport
//! and timers through [`Ctx`].

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use super::config::Arch;
use super::data::DataServer;
use super::messages::{EpochReport, Msg};
use super::runlog::{EpochRow, TimingSample};
use super::topology::NodeId;
use crate::clock::{Timestamp, VectorClockRecord};
use crate::error::Error;
use crate::model::{backward_with_errors, evaluate, Dataset};
use crate::protocol::{GradientMessage, ParameterServer, PartialAggregate, SyncPolicy, VersionedWeights, WeightUpdate};

pub trait Ctx {
    fn now(&self) -> f64;
    fn send(&mut self, to: NodeId, msg: Msg);
    /// Deliver `msg` to this node after `delay`.
    fn after(&mut self, delay: f64, msg: Msg);
    /// Time charged for a batch of `mu` examples whose real cost was `wall`
    /// seconds.
    fn compute_time(&mut self, learner: usize, mu: usize, wall: f64) -> f64;
    /// When this node's outgoing link is next idle.
    fn nic_free_at(&self) -> f64;
    /// Stop the whole run.
    fn abort(&mut self, err: Error);
}

/// Sends the newest weights to a fixed set of targets. If the outgoing link
/// is still busy, older unsent versions are dropped in favour of the latest.
#[derive(Debug)]
pub struct Broadcaster {
    targets: Vec<NodeId>,
    latest: Option<Arc<VersionedWeights>>,
    sent: Option<Timestamp>,
    wake_pending: bool,
}

impl Broadcaster {
    pub fn new(targets: Vec<NodeId>) -> Self {
        Self {
            targets,
            latest: None,
            sent: None,
            wake_pending: false,
        }
    }

    pub fn offer(&mut self, w: &Arc<VersionedWeights>, ctx: &mut dyn Ctx) {
        if self.targets.is_empty() {
            return;
        }
        if self.latest.as_ref().is_none_or(|l| w.timestamp > l.timestamp) {
            self.latest = Some(Arc::clone(w));
        }
        self.flush(ctx);
    }

    pub fn on_wake(&mut self, ctx: &mut dyn Ctx) {
        self.wake_pending = false;
        self.flush(ctx);
    }

    fn flush(&mut self, ctx: &mut dyn Ctx) {
        let Some(latest) = &self.latest else { return };
        if self.sent.is_some_and(|s| s >= latest.timestamp) {
            return;
        }
        let free = ctx.nic_free_at();
        if free > ctx.now() {
            if !self.wake_pending {
                self.wake_pending = true;
                ctx.after(free - ctx.now(), Msg::Wake);
            }
            return;
        }
        for &t in &self.targets {
            ctx.send(t, Msg::WeightsReply(Arc::clone(latest)));
        }
        self.sent = Some(latest.timestamp);
    }
}

fn answer_parked(parked: &mut Vec<(NodeId, Timestamp)>, ts: Timestamp, ctx: &mut dyn Ctx) {
    parked.retain(|&(who, local)| {
        if ts > local {
            ctx.send(who, Msg::TimestampReply(ts));
            false
        } else {
            true
        }
    });
}

fn serve_query(
    parked: &mut Vec<(NodeId, Timestamp)>,
    current: Timestamp,
    from: NodeId,
    local_ts: Timestamp,
    wait_for_newer: bool,
    ctx: &mut dyn Ctx,
) {
    if wait_for_newer && current <= local_ts {
        parked.push((from, local_ts));
    } else {
        ctx.send(from, Msg::TimestampReply(current));
    }
}

fn unexpected(node: &str, msg: &Msg) -> Error {
    Error::Protocol(format!("{node} received unexpected {}", msg.name()))
}

/// Root-side settings that are not part of the server step.
#[derive(Debug, Clone)]
pub struct RootSettings {
    pub train_len: u64,
    pub epochs: u64,
    pub max_updates: Option<u64>,
    pub initial_loss: f64,
    pub divergence_factor: f64,
    pub stop_on_divergence: bool,
}

#[derive(Debug)]
pub struct RootNode {
    pub server: ParameterServer,
    settings: RootSettings,
    children: Vec<NodeId>,
    stats: NodeId,
    bcast: Broadcaster,
    parked: Vec<(NodeId, Timestamp)>,
    epoch_loss: f64,
    epoch_errors: usize,
    epoch_samples: usize,
    last_train: (f64, f64),
    pub samples_consumed: u64,
    pub epochs_done: u64,
    stopping: bool,
    goodbyes: usize,
    pub done: bool,
    pub records: Vec<VectorClockRecord>,
    pub diverged: bool,
    pub discarded: u64,
    pub end_time: f64,
}

impl RootNode {
    pub fn new(
        server: ParameterServer,
        settings: RootSettings,
        children: Vec<NodeId>,
        broadcast: Vec<NodeId>,
        stats: NodeId,
    ) -> Self {
        Self {
            server,
            settings,
            children,
            stats,
            bcast: Broadcaster::new(broadcast),
            parked: Vec::new(),
            epoch_loss: 0.0,
            epoch_errors: 0,
            epoch_samples: 0,
            last_train: (f64::NAN, f64::NAN),
            samples_consumed: 0,
            epochs_done: 0,
            stopping: false,
            goodbyes: 0,
            done: false,
            records: Vec::new(),
            diverged: false,
            discarded: 0,
            end_time: 0.0,
        }
    }

    fn finished_training(&self) -> bool {
        self.epochs_done >= self.settings.epochs
            || self.settings.max_updates.is_some_and(|m| self.server.updates() >= m)
            || (self.diverged && self.settings.stop_on_divergence)
    }

    fn begin_shutdown(&mut self, ctx: &mut dyn Ctx) {
        if self.stopping {
            return;
        }
        self.stopping = true;
        self.end_time = ctx.now();
        self.parked.clear();
        for &c in &self.children {
            ctx.send(c, Msg::Shutdown);
        }
    }

    fn on_update(&mut self, u: WeightUpdate, ctx: &mut dyn Ctx) {
        self.records.push(u.record);
        self.epoch_loss += u.loss_sum;
        self.epoch_errors += u.errors;
        self.epoch_samples += u.samples;
        self.samples_consumed += u.samples as u64;
        while self.epochs_done < self.settings.epochs
            && self.samples_consumed >= (self.epochs_done + 1) * self.settings.train_len
        {
            self.epochs_done += 1;
            if self.epoch_samples > 0 {
                let n = self.epoch_samples as f64;
                self.last_train = (self.epoch_loss / n, self.epoch_errors as f64 / n);
            }
            let (train_loss, train_error) = self.last_train;
            if !(train_loss <= self.settings.divergence_factor * self.settings.initial_loss) {
                self.diverged = true;
            }
            ctx.send(
                self.stats,
                Msg::EpochMetric(Box::new(EpochReport {
                    epoch: self.epochs_done,
                    weights: Arc::clone(&u.weights),
                    train_loss,
                    train_error,
                    samples_seen: self.samples_consumed,
                    time: ctx.now(),
                })),
            );
            self.epoch_loss = 0.0;
            self.epoch_errors = 0;
            self.epoch_samples = 0;
            self.server.set_completed_epochs(self.epochs_done);
        }
        if self.finished_training() {
            self.begin_shutdown(ctx);
            return;
        }
        answer_parked(&mut self.parked, u.weights.timestamp, ctx);
        self.bcast.offer(&u.weights, ctx);
    }

    fn handle(&mut self, from: NodeId, msg: Msg, ctx: &mut dyn Ctx) {
        match msg {
            Msg::Start => {
                if self.finished_training() {
                    self.begin_shutdown(ctx);
                }
            }
            Msg::PushGradient(g) => {
                ctx.send(from, Msg::PushAck);
                if self.stopping {
                    self.discarded += 1;
                    return;
                }
                match self.server.server_step(&g) {
                    Ok(Some(u)) => self.on_update(u, ctx),
                    Ok(None) => {}
                    Err(e) => ctx.abort(e),
                }
            }
            Msg::PushAggregate(p) => {
                if self.stopping {
                    self.discarded += p.count() as u64;
                    return;
                }
                match self.server.apply_partial(*p) {
                    Ok(Some(u)) => self.on_update(u, ctx),
                    Ok(None) => {}
                    Err(e) => ctx.abort(e),
                }
            }
            Msg::TimestampQuery { local_ts, wait_for_newer } => {
                if !self.stopping {
                    let ts = self.server.timestamp();
                    serve_query(&mut self.parked, ts, from, local_ts, wait_for_newer, ctx);
                }
            }
            Msg::PullWeights => {
                ctx.send(from, Msg::WeightsReply(Arc::clone(self.server.weights())));
            }
            Msg::Goodbye => {
                self.goodbyes += 1;
                if self.goodbyes == self.children.len() {
                    ctx.send(self.stats, Msg::Shutdown);
                    self.done = true;
                }
            }
            Msg::Wake => self.bcast.on_wake(ctx),
            Msg::Abort(_) => self.done = true,
            other => ctx.abort(unexpected("root", &other)),
        }
    }
}

#[derive(Debug)]
pub struct RelayNode {
    parent: NodeId,
    children: Vec<NodeId>,
    policy: SyncPolicy,
    /// Gradients per upward message for softsync/async leaves.
    window: usize,
    leaf: bool,
    cache: Arc<VersionedWeights>,
    bcast: Broadcaster,
    parked: Vec<(NodeId, Timestamp)>,
    pending: Option<PartialAggregate>,
    seen: BTreeSet<NodeId>,
    stopping: bool,
    goodbyes: usize,
    pub done: bool,
    pub discarded: u64,
}

impl RelayNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        parent: NodeId,
        children: Vec<NodeId>,
        broadcast: Vec<NodeId>,
        policy: SyncPolicy,
        window: usize,
        leaf: bool,
        initial: Arc<VersionedWeights>,
    ) -> Self {
        Self {
            parent,
            children,
            policy,
            window,
            leaf,
            cache: initial,
            bcast: Broadcaster::new(broadcast),
            parked: Vec::new(),
            pending: None,
            seen: BTreeSet::new(),
            stopping: false,
            goodbyes: 0,
            done: false,
            discarded: 0,
        }
    }

    fn add(&mut self, from: NodeId, part: PartialAggregate, ctx: &mut dyn Ctx) {
        if self.policy.is_hardsync() {
            if !self.seen.insert(from) {
                ctx.abort(Error::Protocol(format!(
                    "child {from} contributed twice to one hardsync round"
                )));
                return;
            }
        } else if !self.leaf {
            ctx.send(self.parent, Msg::PushAggregate(Box::new(part)));
            return;
        }
        let merged = match self.pending.take() {
            None => Ok(part),
            Some(mut p) => p.merge(&part).map(|_| p),
        };
        let merged = match merged {
            Ok(m) => m,
            Err(e) => return ctx.abort(e),
        };
        let full = if self.policy.is_hardsync() {
            self.seen.len() == self.children.len()
        } else {
            merged.count() >= self.window
        };
        if full {
            self.seen.clear();
            ctx.send(self.parent, Msg::PushAggregate(Box::new(merged)));
        } else {
            self.pending = Some(merged);
        }
    }

    fn handle(&mut self, from: NodeId, msg: Msg, ctx: &mut dyn Ctx) {
        match msg {
            Msg::Start => {}
            Msg::PushGradient(g) => {
                ctx.send(from, Msg::PushAck);
                if self.stopping {
                    self.discarded += 1;
                    return;
                }
                match PartialAggregate::from_gradient(&g) {
                    Ok(p) => self.add(from, p, ctx),
                    Err(e) => ctx.abort(e),
                }
            }
            Msg::PushAggregate(p) => {
                if self.stopping {
                    self.discarded += p.count() as u64;
                    return;
                }
                self.add(from, *p, ctx);
            }
            Msg::WeightsReply(w) => {
                if w.timestamp > self.cache.timestamp {
                    self.cache = w;
                    if !self.stopping {
                        answer_parked(&mut self.parked, self.cache.timestamp, ctx);
                        self.bcast.offer(&self.cache, ctx);
                    }
                }
            }
            Msg::TimestampQuery { local_ts, wait_for_newer } => {
                if !self.stopping {
                    let ts = self.cache.timestamp;
                    serve_query(&mut self.parked, ts, from, local_ts, wait_for_newer, ctx);
                }
            }
            Msg::PullWeights => ctx.send(from, Msg::WeightsReply(Arc::clone(&self.cache))),
            Msg::Shutdown => {
                self.stopping = true;
                self.parked.clear();
                if let Some(p) = self.pending.take() {
                    self.discarded += p.count() as u64;
                }
                for &c in &self.children {
                    ctx.send(c, Msg::Shutdown);
                }
            }
            Msg::Goodbye => {
                self.goodbyes += 1;
                if self.goodbyes == self.children.len() {
                    ctx.send(self.parent, Msg::Goodbye);
                    self.done = true;
                }
            }
            Msg::Wake => self.bcast.on_wake(ctx),
            Msg::Abort(_) => self.done = true,
            other => ctx.abort(unexpected("relay", &other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LState {
    Idle,
    Computing,
    AwaitAck,
    AwaitTs,
    AwaitWeights,
    BlockedPush,
    Done,
}

pub struct LearnerNode {
    id: usize,
    parent: NodeId,
    arch: Arch,
    hardsync: bool,
    mu: usize,
    data: DataServer,
    current: Arc<VersionedWeights>,
    /// Communication buffer (`AdvStar`): newest weights not yet swapped in.
    next: Option<Arc<VersionedWeights>>,
    bcast: Broadcaster,
    seq: u64,
    state: LState,
    stopping: bool,
    wait_start: f64,
    compute_start: f64,
    push_start: f64,
    cur_pull_wait: f64,
    cur_compute: f64,
    in_flight: bool,
    pending: Option<Box<GradientMessage>>,
    blocked: Option<Box<GradientMessage>>,
    last_pushed: Option<Timestamp>,
    pub timing: Vec<TimingSample>,
    pub batches: u64,
    pub pulls: u64,
    pub skipped_pulls: u64,
}

impl LearnerNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        parent: NodeId,
        broadcast: Vec<NodeId>,
        arch: Arch,
        policy: SyncPolicy,
        mu: usize,
        data: DataServer,
        initial: Arc<VersionedWeights>,
    ) -> Self {
        Self {
            id,
            parent,
            arch,
            hardsync: policy.is_hardsync(),
            mu,
            data,
            current: initial,
            next: None,
            bcast: Broadcaster::new(broadcast),
            seq: 0,
            state: LState::Idle,
            stopping: false,
            wait_start: 0.0,
            compute_start: 0.0,
            push_start: 0.0,
            cur_pull_wait: 0.0,
            cur_compute: 0.0,
            in_flight: false,
            pending: None,
            blocked: None,
            last_pushed: None,
            timing: Vec::new(),
            batches: 0,
            pulls: 0,
            skipped_pulls: 0,
        }
    }

    pub fn done(&self) -> bool {
        self.state == LState::Done
    }

    fn goodbye(&mut self, ctx: &mut dyn Ctx) {
        self.state = LState::Done;
        ctx.send(self.parent, Msg::Goodbye);
    }

    fn record(&mut self, push_wait: f64) {
        self.timing.push(TimingSample {
            learner_id: self.id,
            batch_index: self.batches - 1,
            compute_t: self.cur_compute,
            pull_wait_t: self.cur_pull_wait,
            push_wait_t: push_wait,
        });
    }

    fn begin_batch(&mut self, ctx: &mut dyn Ctx) {
        if self.arch == Arch::AdvStar {
            if let Some(n) = self.next.take() {
                if n.timestamp > self.current.timestamp {
                    self.current = n;
                }
            }
            if self.hardsync && self.last_pushed.is_some_and(|t| t >= self.current.timestamp) {
                self.state = LState::AwaitWeights;
                return;
            }
        }
        self.cur_pull_wait = ctx.now() - self.wait_start;
        let batch = match self.data.next_batch() {
            Ok(b) => b,
            Err(e) => return ctx.abort(e),
        };
        let t0 = Instant::now();
        let (gradient, loss, errors) = match backward_with_errors(&self.current.weights, &batch) {
            Ok(r) => r,
            Err(e) => return ctx.abort(e),
        };
        let wall = t0.elapsed().as_secs_f64();
        let dt = ctx.compute_time(self.id, self.mu, wall);
        let msg = GradientMessage {
            learner: self.id,
            seq: self.seq,
            timestamp: self.current.timestamp,
            gradient,
            batch_loss: loss,
            batch_errors: errors,
            batch_size: batch.len(),
        };
        self.seq += 1;
        self.state = LState::Computing;
        self.compute_start = ctx.now();
        ctx.after(dt, Msg::ComputeDone(Box::new(msg)));
    }

    fn after_push(&mut self, ctx: &mut dyn Ctx) {
        if self.stopping {
            self.maybe_goodbye_star(ctx);
        } else {
            self.wait_start = ctx.now();
            self.begin_batch(ctx);
        }
    }

    fn maybe_goodbye_star(&mut self, ctx: &mut dyn Ctx) {
        let busy = matches!(self.state, LState::Computing | LState::BlockedPush | LState::Done);
        if !busy && !self.in_flight && self.pending.is_none() {
            self.goodbye(ctx);
        } else if !busy {
            self.state = LState::Idle;
        }
    }

    fn accept_weights(&mut self, w: Arc<VersionedWeights>, ctx: &mut dyn Ctx) -> bool {
        if !w.weights.is_finite() {
            ctx.abort(Error::NumericOverflow(format!(
                "learner {} received non-finite weights at timestamp {}",
                self.id, w.timestamp
            )));
            return false;
        }
        match self.arch {
            Arch::AdvStar => {
                self.bcast.offer(&w, ctx);
                let newest = self.next.as_ref().unwrap_or(&self.current).timestamp;
                if w.timestamp > newest {
                    self.next = Some(w);
                }
            }
            _ => self.current = w,
        }
        true
    }

    fn handle(&mut self, _from: NodeId, msg: Msg, ctx: &mut dyn Ctx) {
        if self.state == LState::Done {
            if let (Msg::WeightsReply(w), Arch::AdvStar) = (&msg, self.arch) {
                self.bcast.offer(w, ctx);
            }
            if let Msg::Wake = msg {
                self.bcast.on_wake(ctx);
            }
            return;
        }
        match msg {
            Msg::Start => {
                self.wait_start = ctx.now();
                self.begin_batch(ctx);
            }
            Msg::ComputeDone(g) => {
                self.batches += 1;
                self.cur_compute = ctx.now() - self.compute_start;
                if self.arch == Arch::AdvStar {
                    self.last_pushed = Some(g.timestamp);
                    if !self.in_flight {
                        self.in_flight = true;
                        ctx.send(self.parent, Msg::PushGradient(g));
                    } else if self.pending.is_none() {
                        self.pending = Some(g);
                    } else {
                        self.blocked = Some(g);
                        self.push_start = ctx.now();
                        self.state = LState::BlockedPush;
                        return;
                    }
                    self.state = LState::Idle;
                    self.record(0.0);
                    self.after_push(ctx);
                } else {
                    self.push_start = ctx.now();
                    self.state = LState::AwaitAck;
                    ctx.send(self.parent, Msg::PushGradient(g));
                }
            }
            Msg::PushAck => {
                if self.arch == Arch::AdvStar {
                    self.in_flight = false;
                    if let Some(p) = self.pending.take() {
                        self.in_flight = true;
                        ctx.send(self.parent, Msg::PushGradient(p));
                    }
                    if let Some(b) = self.blocked.take() {
                        self.pending = Some(b);
                        self.state = LState::Idle;
                        self.record(ctx.now() - self.push_start);
                        self.after_push(ctx);
                    } else if self.stopping {
                        self.maybe_goodbye_star(ctx);
                    }
                } else {
                    self.record(ctx.now() - self.push_start);
                    if self.stopping {
                        return self.goodbye(ctx);
                    }
                    self.wait_start = ctx.now();
                    self.state = LState::AwaitTs;
                    ctx.send(
                        self.parent,
                        Msg::TimestampQuery {
                            local_ts: self.current.timestamp,
                            wait_for_newer: self.hardsync,
                        },
                    );
                }
            }
            Msg::TimestampReply(ts) => {
                if self.state != LState::AwaitTs {
                    return;
                }
                if ts == self.current.timestamp {
                    self.skipped_pulls += 1;
                    self.begin_batch(ctx);
                } else {
                    self.pulls += 1;
                    self.state = LState::AwaitWeights;
                    ctx.send(self.parent, Msg::PullWeights);
                }
            }
            Msg::WeightsReply(w) => {
                if !self.accept_weights(w, ctx) {
                    return;
                }
                if self.state == LState::AwaitWeights && !self.stopping {
                    self.begin_batch(ctx);
                }
            }
            Msg::Shutdown => {
                self.stopping = true;
                match self.arch {
                    Arch::AdvStar => self.maybe_goodbye_star(ctx),
                    _ => {
                        if matches!(self.state, LState::Idle | LState::AwaitTs | LState::AwaitWeights) {
                            self.goodbye(ctx);
                        }
                    }
                }
            }
            Msg::Wake => self.bcast.on_wake(ctx),
            Msg::Abort(_) => self.state = LState::Done,
            other => ctx.abort(unexpected("learner", &other)),
        }
    }
}

impl std::fmt::Debug for LearnerNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LearnerNode")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("batches", &self.batches)
            .finish()
    }
}

#[derive(Debug)]
pub struct StatsNode {
    test: Arc<Dataset>,
    pub rows: Vec<EpochRow>,
    pub losses: Vec<f64>,
    pub done: bool,
}

impl StatsNode {
    pub fn new(test: Arc<Dataset>) -> Self {
        Self {
            test,
            rows: Vec::new(),
            losses: Vec::new(),
            done: false,
        }
    }

    fn handle(&mut self, _from: NodeId, msg: Msg, ctx: &mut dyn Ctx) {
        match msg {
            Msg::Start => {}
            Msg::EpochMetric(r) => match evaluate(&r.weights.weights, &self.test) {
                Ok(test_error) => {
                    self.losses.push(r.train_loss);
                    self.rows.push(EpochRow {
                        epoch: r.epoch,
                        train_error: r.train_error,
                        test_error,
                        samples_seen: r.samples_seen,
                        wall_or_virtual_time: r.time,
                    });
                }
                Err(e) => ctx.abort(e),
            },
            Msg::Shutdown | Msg::Abort(_) => self.done = true,
            other => ctx.abort(unexpected("stats", &other)),
        }
    }
}

#[derive(Debug)]
pub enum Node {
    Root(Box<RootNode>),
    Relay(Box<RelayNode>),
    Learner(Box<LearnerNode>),
    Stats(Box<StatsNode>),
}

impl Node {
    pub fn handle(&mut self, from: NodeId, msg: Msg, ctx: &mut dyn Ctx) {
        match self {
            Node::Root(n) => n.handle(from, msg, ctx),
            Node::Relay(n) => n.handle(from, msg, ctx),
            Node::Learner(n) => n.handle(from, msg, ctx),
            Node::Stats(n) => n.handle(from, msg, ctx),
        }
    }

    pub fn finished(&self) -> bool {
        match self {
            Node::Root(n) => n.done,
            Node::Relay(n) => n.done,
            Node::Learner(n) => n.done(),
            Node::Stats(n) => n.done,
        }
    }
}

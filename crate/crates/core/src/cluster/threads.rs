//! One OS thread per node, unbounded FIFO channels between them. Timers
//! fire immediately; compute time is the measured wall time.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::messages::Msg;
use super::node::{Ctx, Node};
use super::topology::NodeId;
use crate::error::{Error, Result};

/// A node that hears nothing for this long declares the run stalled.
const STALL_TIMEOUT: Duration = Duration::from_secs(120);

type Envelope = (NodeId, Msg);

struct ThreadCtx<'a> {
    me: NodeId,
    senders: &'a [Sender<Envelope>],
    start: Instant,
    timers: VecDeque<Envelope>,
    abort: &'a Mutex<Option<Error>>,
    aborted: bool,
}

impl Ctx for ThreadCtx<'_> {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn send(&mut self, to: NodeId, msg: Msg) {
        // the receiver may already have exited after shutdown
        let _ = self.senders[to].send((self.me, msg));
    }

    fn after(&mut self, _delay: f64, msg: Msg) {
        self.timers.push_back((self.me, msg));
    }

    fn compute_time(&mut self, _learner: usize, _mu: usize, wall: f64) -> f64 {
        wall
    }

    fn nic_free_at(&self) -> f64 {
        self.now()
    }

    fn abort(&mut self, err: Error) {
        self.aborted = true;
        let reason = err.to_string();
        {
            let mut slot = self.abort.lock().unwrap_or_else(|p| p.into_inner());
            if slot.is_none() {
                *slot = Some(err);
            }
        }
        for (id, s) in self.senders.iter().enumerate() {
            if id != self.me {
                let _ = s.send((self.me, Msg::Abort(reason.clone())));
            }
        }
    }
}

fn node_loop(
    me: NodeId,
    mut node: Node,
    rx: Receiver<Envelope>,
    senders: &[Sender<Envelope>],
    start: Instant,
    abort: &Mutex<Option<Error>>,
) -> Node {
    let mut ctx = ThreadCtx {
        me,
        senders,
        start,
        timers: VecDeque::from([(me, Msg::Start)]),
        abort,
        aborted: false,
    };
    loop {
        let (from, msg) = match ctx.timers.pop_front() {
            Some(t) => t,
            None => match rx.recv_timeout(STALL_TIMEOUT) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => {
                    ctx.abort(Error::Protocol(format!("node {me} stalled waiting for messages")));
                    break;
                }
                Err(RecvTimeoutError::Disconnected) => break,
            },
        };
        node.handle(from, msg, &mut ctx);
        if node.finished() || ctx.aborted {
            break;
        }
    }
    node
}

pub struct ThreadOutcome {
    pub nodes: Vec<Node>,
    pub abort: Option<Error>,
    pub end_time: f64,
}

pub fn run_threads(nodes: Vec<Node>) -> Result<ThreadOutcome> {
    let n = nodes.len();
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| unbounded::<Envelope>()).unzip();
    let abort = Arc::new(Mutex::new(None));
    let start = Instant::now();
    let finished = std::thread::scope(|s| {
        let handles: Vec<_> = nodes
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(id, (node, rx))| {
                let senders = &senders;
                let abort = &*abort;
                std::thread::Builder::new()
                    .name(format!("node-{id}"))
                    .spawn_scoped(s, move || node_loop(id, node, rx, senders, start, abort))
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            let h = h.map_err(|e| Error::Io(format!("failed to spawn node thread: {e}")))?;
            out.push(
                h.join()
                    .map_err(|_| Error::Protocol("a node thread panicked".into()))?,
            );
        }
        Ok::<_, Error>(out)
    })?;
    let end_time = start.elapsed().as_secs_f64();
    let abort = abort.lock().unwrap_or_else(|p| p.into_inner()).take();
    Ok(ThreadOutcome {
        nodes: finished,
        abort,
        end_time,
    })
}

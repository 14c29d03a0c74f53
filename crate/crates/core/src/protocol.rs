//! Synchronization protocols and learning-rate policies.
//!
//! * hardsync: every learner contributes exactly one gradient per update,
//!   all computed on the current weights; the server averages all `lambda`.
//! * n-softsync: the server averages and applies every `c = floor(lambda/n)`
//!   gradients, whatever their timestamps.
//! * async: each gradient is applied on its own as soon as it arrives. This
//!   is a separate code path from n-softsync and must agree with
//!   `Softsync(lambda)` bit for bit.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::clock::{Timestamp, VectorClockRecord};
use crate::error::{Error, Result};
use crate::model::{sgd_step, Gradient, Weights};
use crate::tensor::ExactVecSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyncPolicy {
    Hardsync,
    /// n-softsync with splitting parameter `n`.
    Softsync(usize),
    /// Per-gradient updates; equivalent to `Softsync(lambda)`.
    Async,
}

impl SyncPolicy {
    pub fn validate(self, lambda: usize) -> Result<()> {
        if lambda == 0 {
            return Err(Error::Config("at least one learner is required".into()));
        }
        if let SyncPolicy::Softsync(n) = self {
            if n == 0 || n > lambda {
                return Err(Error::Config(format!(
                    "softsync splitting parameter must satisfy 1 <= n <= lambda (n={n}, lambda={lambda})"
                )));
            }
        }
        Ok(())
    }

    /// Expected staleness used by the modulated learning rate: `n` for
    /// softsync, `lambda` for async, and 1 (no modulation) for hardsync.
    pub fn staleness_divisor(self, lambda: usize) -> usize {
        match self {
            SyncPolicy::Hardsync => 1,
            SyncPolicy::Softsync(n) => n,
            SyncPolicy::Async => lambda,
        }
    }

    /// The splitting parameter reported in CSV output: 0 for hardsync,
    /// `lambda` for async (its softsync equivalent).
    pub fn n_value(self, lambda: usize) -> usize {
        match self {
            SyncPolicy::Hardsync => 0,
            SyncPolicy::Softsync(n) => n,
            SyncPolicy::Async => lambda,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyncPolicy::Hardsync => "hardsync",
            SyncPolicy::Softsync(_) => "softsync",
            SyncPolicy::Async => "async",
        }
    }

    pub fn is_hardsync(self) -> bool {
        matches!(self, SyncPolicy::Hardsync)
    }
}

impl std::fmt::Display for SyncPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SyncPolicy::Hardsync => f.write_str("hardsync"),
            SyncPolicy::Softsync(n) => write!(f, "{n}-softsync"),
            SyncPolicy::Async => f.write_str("async"),
        }
    }
}

/// Gradients the server consumes per update.
pub fn required_gradient_count(policy: SyncPolicy, lambda: usize) -> Result<usize> {
    policy.validate(lambda)?;
    Ok(match policy {
        SyncPolicy::Hardsync => lambda,
        SyncPolicy::Softsync(n) => lambda / n,
        SyncPolicy::Async => 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LrMode {
    /// `alpha0 * sqrt(lambda * mu / B)`.
    HardsyncRescale,
    /// `alpha0 / n`.
    StalenessModulated,
    Unmodulated,
}

impl std::str::FromStr for LrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rescale" | "hardsync-rescale" => Ok(LrMode::HardsyncRescale),
            "modulated" | "staleness-modulated" => Ok(LrMode::StalenessModulated),
            "unmodulated" | "constant" => Ok(LrMode::Unmodulated),
            other => Err(Error::Config(format!("unknown learning-rate mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for LrMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrMode::HardsyncRescale => "rescale",
            LrMode::StalenessModulated => "modulated",
            LrMode::Unmodulated => "unmodulated",
        })
    }
}

/// Optional step schedule: the rate is multiplied by `factor` once for each
/// milestone epoch already completed.
#[derive(Debug, Clone, PartialEq)]
pub struct Anneal {
    pub milestones: Vec<u64>,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningRatePolicy {
    pub alpha0: f64,
    pub reference_batch: usize,
    pub mode: LrMode,
    pub anneal: Option<Anneal>,
}

impl LearningRatePolicy {
    pub fn new(alpha0: f64, reference_batch: usize, mode: LrMode) -> Result<Self> {
        let p = Self {
            alpha0,
            reference_batch,
            mode,
            anneal: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!("alpha0 must be > 0 (got {})", self.alpha0)));
        }
        if self.reference_batch == 0 {
            return Err(Error::Config("reference batch must be >= 1".into()));
        }
        if let Some(a) = &self.anneal {
            if !(a.factor > 0.0 && a.factor.is_finite()) {
                return Err(Error::Config("anneal factor must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Schedule multiplier after `completed_epochs` epochs.
    pub fn anneal_multiplier(&self, completed_epochs: u64) -> f64 {
        match &self.anneal {
            None => 1.0,
            Some(a) => {
                let passed = a.milestones.iter().filter(|&&m| completed_epochs >= m).count();
                a.factor.powi(passed as i32)
            }
        }
    }
}

/// Step size the server applies, before any annealing.
pub fn effective_learning_rate(
    lr: &LearningRatePolicy,
    policy: SyncPolicy,
    lambda: usize,
    mu: usize,
) -> Result<f64> {
    if mu == 0 {
        return Err(Error::Precondition("mini-batch size must be >= 1".into()));
    }
    Ok(match lr.mode {
        LrMode::HardsyncRescale => {
            lr.alpha0 * ((lambda * mu) as f64 / lr.reference_batch as f64).sqrt()
        }
        LrMode::StalenessModulated => lr.alpha0 / policy.staleness_divisor(lambda) as f64,
        LrMode::Unmodulated => lr.alpha0,
    })
}

/// Elementwise mean of `gradients`, computed from their exact sum so the
/// result does not depend on order or grouping.
pub fn aggregate(gradients: &[Gradient]) -> Result<Gradient> {
    let first = gradients
        .first()
        .ok_or_else(|| Error::Precondition("aggregate of no gradients".into()))?;
    let mut sum = ExactVecSum::new(first.len());
    for g in gradients {
        sum.add(g.as_slice())?;
    }
    Ok(Gradient(sum.mean()?))
}

/// Server weights together with their timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct VersionedWeights {
    pub weights: Weights,
    pub timestamp: Timestamp,
}

/// A learner's pushed gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage {
    pub learner: usize,
    /// Per-learner batch counter, starting at 0.
    pub seq: u64,
    /// Timestamp of the weights the gradient was computed from.
    pub timestamp: Timestamp,
    pub gradient: Gradient,
    pub batch_loss: f64,
    pub batch_errors: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Contributor {
    pub learner: usize,
    pub seq: u64,
    pub timestamp: Timestamp,
}

/// Exact sum of several learners' gradients plus their metadata; what the
/// tree nodes relay upward.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAggregate {
    pub sum: ExactVecSum,
    pub contributors: Vec<Contributor>,
    pub loss_sum: f64,
    pub errors: usize,
    pub samples: usize,
}

impl PartialAggregate {
    pub fn empty(len: usize) -> Self {
        Self {
            sum: ExactVecSum::new(len),
            contributors: Vec::new(),
            loss_sum: 0.0,
            errors: 0,
            samples: 0,
        }
    }

    pub fn from_gradient(msg: &GradientMessage) -> Result<Self> {
        let mut p = Self::empty(msg.gradient.len());
        p.push(msg)?;
        Ok(p)
    }

    pub fn push(&mut self, msg: &GradientMessage) -> Result<()> {
        self.sum.add(msg.gradient.as_slice())?;
        self.contributors.push(Contributor {
            learner: msg.learner,
            seq: msg.seq,
            timestamp: msg.timestamp,
        });
        self.loss_sum += msg.batch_loss * msg.batch_size as f64;
        self.errors += msg.batch_errors;
        self.samples += msg.batch_size;
        Ok(())
    }

    pub fn merge(&mut self, other: &PartialAggregate) -> Result<()> {
        self.sum.merge(&other.sum)?;
        self.contributors.extend_from_slice(&other.contributors);
        self.loss_sum += other.loss_sum;
        self.errors += other.errors;
        self.samples += other.samples;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.contributors.len()
    }

    pub fn mean(&self) -> Result<Gradient> {
        Ok(Gradient(self.sum.mean()?))
    }
}

/// Combine children's partial aggregates into the one relayed upward.
pub fn tree_aggregate(children: &[PartialAggregate]) -> Result<PartialAggregate> {
    let first = children
        .first()
        .ok_or_else(|| Error::Precondition("tree aggregate of no children".into()))?;
    let mut out = PartialAggregate::empty(first.sum.len());
    for c in children {
        out.merge(c)?;
    }
    Ok(out)
}

/// What an update produced.
#[derive(Debug, Clone)]
pub struct WeightUpdate {
    pub weights: Arc<VersionedWeights>,
    pub record: VectorClockRecord,
    pub contributors: Vec<Contributor>,
    pub loss_sum: f64,
    pub errors: usize,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub policy: SyncPolicy,
    pub lambda: usize,
    pub mu: usize,
    pub lr: LearningRatePolicy,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Parameter-server aggregation state: current weights, momentum velocity
/// and the pending window of gradients.
///
/// An update fires on exactly the `c`-th buffered gradient.
#[derive(Debug)]
pub struct ParameterServer {
    cfg: ServerConfig,
    required: usize,
    alpha: f64,
    current: Arc<VersionedWeights>,
    velocity: Gradient,
    pending: PartialAggregate,
    window_learners: BTreeSet<usize>,
    completed_epochs: u64,
    received: u64,
    consumed: u64,
    updates: u64,
}

impl ParameterServer {
    pub fn new(initial: Weights, cfg: ServerConfig) -> Result<Self> {
        cfg.policy.validate(cfg.lambda)?;
        cfg.lr.validate()?;
        if !(0.0..1.0).contains(&cfg.momentum) || cfg.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "momentum {} must be in [0,1), weight decay {} must be >= 0",
                cfg.momentum, cfg.weight_decay
            )));
        }
        let required = required_gradient_count(cfg.policy, cfg.lambda)?;
        let alpha = effective_learning_rate(&cfg.lr, cfg.policy, cfg.lambda, cfg.mu)?;
        let len = initial.len();
        Ok(Self {
            cfg,
            required,
            alpha,
            current: Arc::new(VersionedWeights {
                weights: initial,
                timestamp: Timestamp::ZERO,
            }),
            velocity: Gradient::zeros(len),
            pending: PartialAggregate::empty(len),
            window_learners: BTreeSet::new(),
            completed_epochs: 0,
            received: 0,
            consumed: 0,
            updates: 0,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn required(&self) -> usize {
        self.required
    }

    /// Step size currently applied (effective rate times any anneal factor).
    pub fn alpha(&self) -> f64 {
        self.alpha * self.cfg.lr.anneal_multiplier(self.completed_epochs)
    }

    pub fn timestamp(&self) -> Timestamp {
        self.current.timestamp
    }

    pub fn weights(&self) -> &Arc<VersionedWeights> {
        &self.current
    }

    pub fn velocity(&self) -> &Gradient {
        &self.velocity
    }

    pub fn set_completed_epochs(&mut self, e: u64) {
        self.completed_epochs = e;
    }

    pub fn gradients_received(&self) -> u64 {
        self.received
    }

    pub fn gradients_consumed(&self) -> u64 {
        self.consumed
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn pending_count(&self) -> usize {
        self.pending.count()
    }

    fn check_contributor(&mut self, c: &Contributor) -> Result<()> {
        let now = self.current.timestamp;
        if c.timestamp > now {
            return Err(Error::ClockViolation {
                gradient: c.timestamp.0,
                server: now.0,
            });
        }
        if self.cfg.policy.is_hardsync() {
            if c.timestamp != now {
                return Err(Error::Protocol(format!(
                    "hardsync gradient from learner {} has timestamp {} but weights are at {}",
                    c.learner, c.timestamp, now
                )));
            }
            if !self.window_learners.insert(c.learner) {
                return Err(Error::Protocol(format!(
                    "learner {} contributed twice to hardsync update {}",
                    c.learner,
                    now.next()
                )));
            }
        }
        Ok(())
    }

    /// Handle one pushed gradient; returns the update if this gradient
    /// completed a window.
    pub fn server_step(&mut self, msg: &GradientMessage) -> Result<Option<WeightUpdate>> {
        let contributor = Contributor {
            learner: msg.learner,
            seq: msg.seq,
            timestamp: msg.timestamp,
        };
        if msg.gradient.len() != self.current.weights.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for a model with {} parameters",
                msg.gradient.len(),
                self.current.weights.len()
            )));
        }
        self.check_contributor(&contributor)?;
        self.received += 1;
        if self.cfg.policy == SyncPolicy::Async {
            let single = PartialAggregate::from_gradient(msg)?;
            return self.apply(&msg.gradient, single).map(Some);
        }
        self.pending.push(msg)?;
        self.maybe_fire()
    }

    /// Handle an aggregate relayed by a tree node.
    pub fn apply_partial(&mut self, partial: PartialAggregate) -> Result<Option<WeightUpdate>> {
        if partial.count() == 0 {
            return Err(Error::Protocol("empty aggregate relayed to the root".into()));
        }
        for c in &partial.contributors {
            self.check_contributor(c)?;
        }
        if self.pending.count() + partial.count() > self.required {
            return Err(Error::Protocol(format!(
                "aggregate of {} gradients overflows the window ({} pending, {} required)",
                partial.count(),
                self.pending.count(),
                self.required
            )));
        }
        self.received += partial.count() as u64;
        self.pending.merge(&partial)?;
        self.maybe_fire()
    }

    fn maybe_fire(&mut self) -> Result<Option<WeightUpdate>> {
        if self.pending.count() < self.required {
            return Ok(None);
        }
        let len = self.current.weights.len();
        let window = std::mem::replace(&mut self.pending, PartialAggregate::empty(len));
        let mean = window.mean()?;
        self.apply(&mean, window).map(Some)
    }

    fn apply(&mut self, gradient: &Gradient, window: PartialAggregate) -> Result<WeightUpdate> {
        let alpha = self.alpha();
        let next = sgd_step(
            &self.current.weights,
            gradient,
            alpha,
            self.cfg.momentum,
            self.cfg.weight_decay,
            &mut self.velocity,
        )?;
        let ts = self.current.timestamp.next();
        let record = VectorClockRecord::new(
            ts,
            window.contributors.iter().map(|c| c.timestamp).collect(),
            window.contributors.iter().map(|c| c.learner).collect(),
        )?;
        self.current = Arc::new(VersionedWeights {
            weights: next,
            timestamp: ts,
        });
        self.window_learners.clear();
        self.consumed += window.count() as u64;
        self.updates += 1;
        Ok(WeightUpdate {
            weights: Arc::clone(&self.current),
            record,
            contributors: window.contributors,
            loss_sum: window.loss_sum,
            errors: window.errors,
            samples: window.samples,
        })
    }
}
